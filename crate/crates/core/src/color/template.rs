use super::{compute_histogram, histogram_distance, mean_histogram, ColorHistogram, RgbImage};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Outcome of template selection with the intermediate statistics.
#[derive(Clone, Debug)]
pub struct TemplateSelection {
    pub index: usize,
    pub histograms: Vec<ColorHistogram>,
    pub mean: ColorHistogram,
    /// Distance of every image's histogram to the mean histogram.
    pub distances: Vec<f64>,
}

impl TemplateSelection {
    pub fn winner(&self) -> &ColorHistogram {
        &self.histograms[self.index]
    }
}

/// Picks the image whose color histogram is closest to the dataset's mean histogram.
pub fn select_template_detailed(images: &[RgbImage], bins: usize, mode: Execution) -> Result<TemplateSelection> {
    if images.is_empty() {
        return Err(Error::Empty("template candidates"));
    }
    let histograms = exec::map(images, mode, |img| compute_histogram(img, bins))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_histogram(&histograms)?;
    let distances = exec::map(&histograms, mode, |h| histogram_distance(&mean, h))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    // strict comparison keeps the lowest index on ties
    let mut index = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[index] {
            index = i;
        }
    }
    Ok(TemplateSelection {
        index,
        histograms,
        mean,
        distances,
    })
}

/// Index of the selected template image; ties go to the lowest index.
pub fn select_template(images: &[RgbImage], bins: usize) -> Result<usize> {
    Ok(select_template_detailed(images, bins, Execution::Parallel)?.index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image() {
        let img = RgbImage::filled(3, 3, [10, 20, 30]).unwrap();
        assert_eq!(select_template(&[img], 256).unwrap(), 0);
    }

    #[test]
    fn majority_color_wins() {
        let black = RgbImage::filled(4, 4, [0, 0, 0]).unwrap();
        let white = RgbImage::filled(4, 4, [255, 255, 255]).unwrap();
        assert_eq!(select_template(&[black.clone(), black.clone(), white.clone()], 256).unwrap(), 0);
        assert_eq!(select_template(&[white.clone(), black.clone(), black], 256).unwrap(), 1);
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(select_template(&[], 256), Err(Error::Empty(_))));
    }

    #[test]
    fn modes_agree() {
        let imgs: Vec<RgbImage> = (0..12)
            .map(|k| RgbImage::from_fn(8, 8, |x, y| [(x * k) as u8, (y * 3 + k) as u8, (k * 20) as u8]).unwrap())
            .collect();
        let a = select_template_detailed(&imgs, 64, Execution::Sequential).unwrap();
        let b = select_template_detailed(&imgs, 64, Execution::Parallel).unwrap();
        assert_eq!(a.index, b.index);
        assert_eq!(a.distances, b.distances);
        let max = a.distances.iter().cloned().fold(0.0, f64::max);
        assert!(a.distances[a.index] <= max);
    }
}
