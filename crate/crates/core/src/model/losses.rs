use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Mean over the spatial axes of a `B×d×h×w` map, giving `B×d`.
pub fn global_average_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("pooling needs a 4-D map, got {s:?}")));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let pooled = tape.mean_axis(flat, 2)?;
    tape.reshape(pooled, &[s[0], s[1]])
}

/// `1 − cos(fa, fa_same) + 1 + cos(fa, fb)`, each feature taken as one flat vector.
pub fn contrastive_color_loss(tape: &mut Tape, fa: Var, fa_same: Var, fb: Var) -> Result<Var> {
    let pos = tape.cosine_similarity(fa, fa_same)?;
    let neg = tape.cosine_similarity(fa, fb)?;
    let d = tape.sub(neg, pos)?;
    tape.add_scalar(d, 2.0)
}

/// `1 − cos(fa, fa_jittered)`.
pub fn contrastive_structure_loss(tape: &mut Tape, fa: Var, fa_jittered: Var) -> Result<Var> {
    let c = tape.cosine_similarity(fa, fa_jittered)?;
    let n = tape.scale(c, -1.0)?;
    tape.add_scalar(n, 1.0)
}

/// Mean squared error between a reconstruction and its target image.
pub fn reconstruction_loss(tape: &mut Tape, reconstruction: Var, target: Var) -> Result<Var> {
    tape.mse(reconstruction, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn v(tape: &mut Tape, data: &[f32]) -> Var {
        tape.constant(Tensor::new(&[data.len()], data.to_vec()).unwrap())
    }

    fn close(a: f32, b: f32) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn color_loss_cases() {
        let mut t = Tape::new();
        let (a, b, neg) = (v(&mut t, &[1.0, 0.0]), v(&mut t, &[0.0, 2.0]), v(&mut t, &[-3.0, 0.0]));
        let l = contrastive_color_loss(&mut t, a, a, b).unwrap();
        assert!(close(t.item(l), 1.0));
        let l = contrastive_color_loss(&mut t, a, a, a).unwrap();
        assert!(close(t.item(l), 2.0));
        let l = contrastive_color_loss(&mut t, a, a, neg).unwrap();
        assert!(close(t.item(l), 0.0));
    }

    #[test]
    fn structure_loss_cases() {
        let mut t = Tape::new();
        let (a, b, neg) = (v(&mut t, &[1.0, 1.0]), v(&mut t, &[1.0, -1.0]), v(&mut t, &[-2.0, -2.0]));
        let l = contrastive_structure_loss(&mut t, a, a).unwrap();
        assert!(close(t.item(l), 0.0));
        let l = contrastive_structure_loss(&mut t, a, b).unwrap();
        assert!(close(t.item(l), 1.0));
        let l = contrastive_structure_loss(&mut t, a, neg).unwrap();
        assert!(close(t.item(l), 2.0));
    }

    #[test]
    fn zero_features_stay_finite() {
        let mut t = Tape::new();
        let z = v(&mut t, &[0.0, 0.0]);
        let l = contrastive_color_loss(&mut t, z, z, z).unwrap();
        assert!(close(t.item(l), 2.0));
    }

    #[test]
    fn reconstruction_cases() {
        let mut t = Tape::new();
        let x = v(&mut t, &[0.2, 0.5, 0.7]);
        let l = reconstruction_loss(&mut t, x, x).unwrap();
        assert_eq!(t.item(l), 0.0);
        let shifted = t.add_scalar(x, 0.1).unwrap();
        let l = reconstruction_loss(&mut t, shifted, x).unwrap();
        assert!(close(t.item(l), 0.01));
    }

    #[test]
    fn pooling_averages_space() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap());
        let p = global_average_pool(&mut t, x).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 2.0]);
    }
}
