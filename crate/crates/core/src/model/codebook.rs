use rand::Rng;

use super::{FeatureMap, FeatureRole};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Learned set of `K` color vectors of dimension `d`, with hit counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    usage: Vec<u64>,
}

impl Codebook {
    /// Entries drawn uniformly from `[−1/K, 1/K]`.
    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Empty("codebook"));
        }
        let b = 1.0 / size as f32;
        Self::from_entries(Tensor::uniform(&[size, dim], -b, b, rng)?)
    }

    pub fn from_entries(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 || entries.shape()[0] == 0 || entries.shape()[1] == 0 {
            return Err(Error::Empty("codebook"));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite("codebook entries"));
        }
        let k = entries.shape()[0];
        Ok(Self {
            entries: entries.with_requires_grad(true),
            usage: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Tensor {
        &mut self.entries
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.entries.data()[i * d..(i + 1) * d]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Number of entries hit at least once since the last reset.
    pub fn used_entries(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    /// Index of the closest entry (squared L2) for every `d`-length row; ties go to the lowest index.
    pub fn nearest(&self, rows: &[f32]) -> Result<Vec<usize>> {
        let d = self.dim();
        if !rows.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(rows.len(), d, self.size(), d));
        }
        Ok(rows
            .chunks_exact(d)
            .map(|row| {
                let mut best = (0, f32::INFINITY);
                for (i, e) in self.entries.data().chunks_exact(d).enumerate() {
                    let dist: f32 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.1 {
                        best = (i, dist);
                    }
                }
                best.0
            })
            .collect())
    }

    /// Replaces never-used entries with randomly chosen feature rows and clears the counters.
    pub fn restart_dead<R: Rng + ?Sized>(&mut self, features: &[f32], rng: &mut R) -> usize {
        let d = self.dim();
        let rows = features.len() / d;
        if rows == 0 {
            return 0;
        }
        let mut restarted = 0;
        for i in 0..self.size() {
            if self.usage[i] == 0 {
                let r = rng.gen_range(0..rows);
                self.entries.data_mut()[i * d..(i + 1) * d].copy_from_slice(&features[r * d..(r + 1) * d]);
                restarted += 1;
            }
        }
        self.reset_usage();
        restarted
    }
}

fn color_rows(tape: &mut Tape, f: &FeatureMap, cb_var: Var) -> Result<(Var, usize)> {
    f.expect_role(FeatureRole::Color)?;
    let rows = f.token_rows(tape)?;
    let d = tape.shape(rows)[1];
    let cb_shape = tape.shape(cb_var);
    if cb_shape.len() != 2 || cb_shape[1] != d {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: tape.shape(rows).to_vec(),
            rhs: cb_shape.to_vec(),
        });
    }
    Ok((rows, d))
}

/// Replaces every spatial vector of `f` by its nearest codebook entry.
///
/// `cb_var` must hold `cb.entries()` on the tape. The forward value is the
/// entry itself; gradients pass straight through to `f` and also reach the
/// selected entries. Usage counters are incremented.
pub fn quantize(tape: &mut Tape, f: &FeatureMap, cb_var: Var, cb: &mut Codebook) -> Result<(FeatureMap, Vec<usize>)> {
    let (q, idx) = quantize_untracked(tape, f, cb_var, cb)?;
    cb.record(&idx);
    Ok((q, idx))
}

/// [`quantize`] without touching the usage counters.
pub(crate) fn quantize_untracked(tape: &mut Tape, f: &FeatureMap, cb_var: Var, cb: &Codebook) -> Result<(FeatureMap, Vec<usize>)> {
    let (rows, _) = color_rows(tape, f, cb_var)?;
    let idx = cb.nearest(tape.value(rows).data())?;
    let st = tape.straight_through(rows, cb_var, &idx)?;
    let q = FeatureMap::from_token_rows(tape, st, f, FeatureRole::QuantizedColor)?;
    Ok((q, idx))
}

/// Embedding loss `‖sg[f] − e‖ + α‖sg[e] − f‖`, averaged over spatial positions.
///
/// The first term moves only the codebook, the second only the encoder.
pub fn codebook_loss(tape: &mut Tape, f: &FeatureMap, cb_var: Var, cb: &Codebook, alpha: f32) -> Result<Var> {
    let (rows, _) = color_rows(tape, f, cb_var)?;
    let idx = cb.nearest(tape.value(rows).data())?;
    let e = tape.gather_rows(cb_var, &idx)?;
    let f_sg = tape.stop_gradient(rows)?;
    let d1 = tape.sub(f_sg, e)?;
    let n1 = tape.row_norms(d1)?;
    let codebook_term = tape.mean(n1)?;
    let e_sg = tape.stop_gradient(e)?;
    let d2 = tape.sub(e_sg, rows)?;
    let n2 = tape.row_norms(d2)?;
    let m2 = tape.mean(n2)?;
    let commitment = tape.scale(m2, alpha)?;
    tape.add(codebook_term, commitment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from_rows(tape: &mut Tape, rows: &[f32], d: usize, requires_grad: bool) -> FeatureMap {
        let n = rows.len() / d;
        // (1, d, 1, n) layout: channel-major
        let mut chw = vec![0.0; rows.len()];
        for t in 0..n {
            for c in 0..d {
                chw[c * n + t] = rows[t * d + c];
            }
        }
        let v = tape.leaf(Tensor::new(&[1, d, 1, n], chw).unwrap().with_requires_grad(requires_grad));
        FeatureMap::new(v, FeatureRole::Color)
    }

    fn book(entries: &[f32], d: usize) -> Codebook {
        Codebook::from_entries(Tensor::new(&[entries.len() / d, d], entries.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn nearest_by_inspection() {
        let cb = book(&[0.0, 0.0, 1.0, 1.0], 2);
        assert_eq!(cb.nearest(&[0.2, 0.1]).unwrap(), vec![0]);
        assert_eq!(cb.nearest(&[0.5, 0.5]).unwrap(), vec![0], "tie goes to lowest index");
        let cb = book(&[0.0, 0.0, 1.0, 1.0, 2.0, 0.0, 3.0, -1.0], 2);
        assert_eq!(cb.nearest(&[3.0, -1.0]).unwrap(), vec![3]);
    }

    #[test]
    fn quantize_counts_usage_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = Codebook::random(8, 3, &mut rng).unwrap();
        let rows: Vec<f32> = (0..15).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let mut tape = Tape::new();
        let f = map_from_rows(&mut tape, &rows, 3, false);
        let cbv = tape.watch(cb.entries());
        let (q, idx) = quantize(&mut tape, &f, cbv, &mut cb).unwrap();
        assert_eq!(cb.usage().iter().sum::<u64>(), 5);
        let again = FeatureMap::new(q.var(), FeatureRole::Color);
        let (q2, idx2) = quantize(&mut tape, &again, cbv, &mut cb).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(tape.value(q.var()).data(), tape.value(q2.var()).data());
        cb.reset_usage();
        assert_eq!(cb.used_entries(), 0);
    }

    #[test]
    fn loss_single_vector() {
        let cb = book(&[1.0, 2.0], 2);
        let mut tape = Tape::new();
        let f = map_from_rows(&mut tape, &[4.0, 6.0], 2, true);
        let cbv = tape.watch(cb.entries());
        let loss = codebook_loss(&mut tape, &f, cbv, &cb, 0.25).unwrap();
        assert!((tape.item(loss) - 5.0 * 1.25).abs() < 1e-6);
    }

    #[test]
    fn exact_match_costs_nothing() {
        let cb = book(&[1.0, 2.0, -1.0, 0.5], 2);
        let mut tape = Tape::new();
        let f = map_from_rows(&mut tape, &[-1.0, 0.5, 1.0, 2.0], 2, true);
        let cbv = tape.watch(cb.entries());
        let loss = codebook_loss(&mut tape, &f, cbv, &cb, 0.25).unwrap();
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn stop_gradient_placement() {
        let cb = book(&[1.0, 2.0], 2);
        let mut tape = Tape::new();
        let f = map_from_rows(&mut tape, &[4.0, 6.0], 2, true);
        let cbv = tape.watch(cb.entries());
        let (rows, _) = color_rows(&mut tape, &f, cbv).unwrap();
        let idx = cb.nearest(tape.value(rows).data()).unwrap();
        let e = tape.gather_rows(cbv, &idx).unwrap();
        let f_sg = tape.stop_gradient(rows).unwrap();
        let d1 = tape.sub(f_sg, e).unwrap();
        let n1 = tape.row_norms(d1).unwrap();
        let first = tape.mean(n1).unwrap();
        let g = tape.backward(first).unwrap();
        assert!(g.get(f.var()).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(g.get(cbv).unwrap().iter().any(|&v| v != 0.0));

        let e_sg = tape.stop_gradient(e).unwrap();
        let d2 = tape.sub(e_sg, rows).unwrap();
        let n2 = tape.row_norms(d2).unwrap();
        let second = tape.mean(n2).unwrap();
        let g = tape.backward(second).unwrap();
        assert!(g.get(cbv).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(g.get(f.var()).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_reaches_features_and_entries() {
        let mut cb = book(&[0.0, 0.0, 1.0, 1.0], 2);
        let mut tape = Tape::new();
        let f = map_from_rows(&mut tape, &[0.9, 0.8], 2, true);
        let cbv = tape.watch(cb.entries());
        let (q, _) = quantize(&mut tape, &f, cbv, &mut cb).unwrap();
        let s = tape.sum(q.var()).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(f.var()).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(cbv).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn dead_entries_restart_from_features() {
        let mut cb = book(&[0.0, 0.0, 1.0, 1.0], 2);
        cb.record(&[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(cb.restart_dead(&[5.0, 6.0], &mut rng), 1);
        assert_eq!(cb.entry(1), &[5.0, 6.0]);
        assert_eq!(cb.used_entries(), 0);
    }
}
