use serde::{Deserialize, Serialize};

use crate::color::RgbImage;
use crate::error::{Error, Result};

/// What to do with the pixels left over when a side is not a multiple of the tile size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePolicy {
    /// Keep them: the last tile of each row/column is shifted back to end at the border.
    #[default]
    Retain,
    /// Drop partial tiles.
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSpec {
    pub tile_size: usize,
    pub edge_policy: EdgePolicy,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            tile_size: 256,
            edge_policy: EdgePolicy::Retain,
        }
    }
}

/// A tile and the position of its top-left pixel in the source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub image: RgbImage,
}

fn axis_offsets(extent: usize, tile: usize, policy: EdgePolicy) -> Result<Vec<usize>> {
    let full = extent / tile;
    let mut offsets: Vec<usize> = (0..full).map(|i| i * tile).collect();
    if !extent.is_multiple_of(tile) && policy == EdgePolicy::Retain {
        if extent < tile {
            return Err(Error::TileLargerThanImage { tile, extent });
        }
        offsets.push(extent - tile);
    }
    Ok(offsets)
}

/// Top-left corners of the tiles of a `width×height` image, row by row.
pub fn tile_origins(width: usize, height: usize, spec: &TileSpec) -> Result<Vec<(usize, usize)>> {
    if spec.tile_size == 0 {
        return Err(Error::Config("tile_size must be positive".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageTooSmall { width, height, min: 1 });
    }
    let xs = axis_offsets(width, spec.tile_size, spec.edge_policy)?;
    let ys = axis_offsets(height, spec.tile_size, spec.edge_policy)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

pub fn tile_image(img: &RgbImage, spec: &TileSpec) -> Result<Vec<Tile>> {
    tile_origins(img.width(), img.height(), spec)?
        .into_iter()
        .map(|(x, y)| {
            Ok(Tile {
                x,
                y,
                image: img.crop(x, y, spec.tile_size, spec.tile_size)?,
            })
        })
        .collect()
}
