use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_color_preserving, augment_structure_preserving};
use super::codebook::{codebook_loss, quantize};
use super::losses::{contrastive_color_loss, contrastive_structure_loss, global_average_pool, reconstruction_loss};
use super::{select_batch, FeatureMap, FeatureRole, StainPidr};
use crate::color::RgbImage;
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Tape, Tensor, Var};

/// One training example: an image, two augmented views of it and an image from the other color domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub a: RgbImage,
    /// Same colors as `a`, different geometry.
    pub a_prime: RgbImage,
    /// Same geometry as `a`, different colors.
    pub a_dprime: RgbImage,
    /// From the other color domain.
    pub b: RgbImage,
}

impl TrainingBatch {
    pub fn from_pair(a: &RgbImage, b: &RgbImage, seed: u64) -> Self {
        Self {
            a_prime: augment_color_preserving(a, seed),
            a_dprime: augment_structure_preserving(a, seed.wrapping_add(1)),
            a: a.clone(),
            b: b.clone(),
        }
    }

    /// Draws `a` from a random domain and `b` from the other one.
    pub fn sample<R: Rng + ?Sized>(domain_a: &[RgbImage], domain_b: &[RgbImage], rng: &mut R) -> Result<Self> {
        if domain_a.is_empty() || domain_b.is_empty() {
            return Err(Error::Empty("training domain"));
        }
        let (first, second) = if rng.gen() { (domain_a, domain_b) } else { (domain_b, domain_a) };
        let a = &first[rng.gen_range(0..first.len())];
        let b = &second[rng.gen_range(0..second.len())];
        Ok(Self::from_pair(a, b, rng.gen()))
    }
}

/// Value of every loss term after one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub contrast_color: f32,
    pub contrast_structure: f32,
    pub codebook: f32,
    pub recon_a: f32,
    pub recon_b: f32,
    pub total: f32,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 6] = ["contrast_color", "contrast_structure", "codebook", "recon_a", "recon_b", "total"];

    pub fn values(&self) -> [f32; 6] {
        [
            self.contrast_color,
            self.contrast_structure,
            self.codebook,
            self.recon_a,
            self.recon_b,
            self.total,
        ]
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

fn stack(tape: &mut Tape, images: &[&RgbImage]) -> Result<Var> {
    let n = images.len();
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(n * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::DimensionMismatch(img.width(), img.height(), w, h));
        }
        data.extend(img.to_tensor().into_data());
    }
    Ok(tape.constant(Tensor::new(&[n, 3, h, w], data)?))
}

fn weighted(tape: &mut Tape, terms: &[(Var, f32)]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let s = tape.scale(v, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total)
}

/// Features of the reconstructed images, kept for codebook restarts.
pub(crate) struct StepOutput {
    pub report: LossReport,
    pub color_rows: Vec<f32>,
}

/// Fills the gradient slot of every parameter and codebook entry; returns whether any loss term is active.
fn forward_backward(model: &mut StainPidr, batch: &TrainingBatch) -> Result<(StepOutput, bool)> {
    let config = model.config().clone();
    let weights = &config.loss_weights;
    let mut tape = Tape::new();
    let m = model.bind(&mut tape, true);

    // batch order: A, B, then the augmented view
    let color_in = stack(&mut tape, &[&batch.a, &batch.b, &batch.a_prime])?;
    let structure_in = stack(&mut tape, &[&batch.a, &batch.b, &batch.a_dprime])?;
    let color = model.encode_color(&mut tape, &m, color_in)?;
    let structure = model.encode_structure(&mut tape, &m, structure_in)?;

    let pooled = global_average_pool(&mut tape, color.var())?;
    let ca = tape.gather_rows(pooled, &[0])?;
    let cb = tape.gather_rows(pooled, &[1])?;
    let ca_prime = tape.gather_rows(pooled, &[2])?;
    let contrast_color = contrastive_color_loss(&mut tape, ca, ca_prime, cb)?;

    let pooled = global_average_pool(&mut tape, structure.var())?;
    let sa = tape.gather_rows(pooled, &[0])?;
    let sa_dprime = tape.gather_rows(pooled, &[2])?;
    let contrast_structure = contrastive_structure_loss(&mut tape, sa, sa_dprime)?;

    let recon_items: &[usize] = if config.reconstruct_both { &[0, 1] } else { &[0] };
    let c_sel = FeatureMap::new(select_batch(&mut tape, color.var(), recon_items)?, FeatureRole::Color);
    let s_sel = FeatureMap::new(select_batch(&mut tape, structure.var(), recon_items)?, FeatureRole::Structure);
    let (quantized, _) = quantize(&mut tape, &c_sel, m.codebook, model.codebook_mut())?;
    let vq = codebook_loss(&mut tape, &c_sel, m.codebook, model.codebook(), config.alpha)?;
    let stained = model.stain_module(&mut tape, &m, &s_sel, &quantized)?;
    let decoded = model.decode(&mut tape, &m, &stained)?;
    let targets = select_batch(&mut tape, color_in, recon_items)?;
    let mut recon = Vec::with_capacity(recon_items.len());
    for i in 0..recon_items.len() {
        let out = select_batch(&mut tape, decoded, &[i])?;
        let target = select_batch(&mut tape, targets, &[i])?;
        recon.push(reconstruction_loss(&mut tape, out, target)?);
    }

    let mut terms = vec![
        (contrast_color, weights.contrast_color),
        (contrast_structure, weights.contrast_structure),
        (vq, weights.codebook),
    ];
    terms.extend(recon.iter().map(|&r| (r, weights.reconstruction)));
    let total = weighted(&mut tape, &terms)?;

    let report = LossReport {
        contrast_color: tape.item(contrast_color),
        contrast_structure: tape.item(contrast_structure),
        codebook: tape.item(vq),
        recon_a: tape.item(recon[0]),
        recon_b: recon.get(1).map_or(0.0, |&r| tape.item(r)),
        total: total.map_or(0.0, |t| tape.item(t)),
    };
    let color_rows = {
        let rows = c_sel.token_rows(&mut tape)?;
        tape.value(rows).data().to_vec()
    };

    model.params_mut().zero_grad();
    model.codebook_mut().entries_mut().zero_grad();
    let Some(total) = total else {
        return Ok((StepOutput { report, color_rows }, false));
    };
    let grads = tape.backward(total)?;
    model.params_mut().accumulate(&grads, &m.params)?;
    grads.accumulate_into(m.codebook, model.codebook_mut().entries_mut())?;
    Ok((StepOutput { report, color_rows }, true))
}

pub(crate) fn step_inner(model: &mut StainPidr, opt: &mut AdamW, batch: &TrainingBatch) -> Result<StepOutput> {
    let (out, active) = forward_backward(model, batch)?;
    if active {
        let mut tensors = Vec::new();
        let (params, codebook) = model.split_mut();
        tensors.extend(params.tensors_mut());
        tensors.push(codebook.entries_mut());
        opt.step(&mut tensors)?;
    }
    Ok(out)
}

/// Evaluates the weighted training loss on `batch` and leaves its gradient in every
/// parameter's (and the codebook's) gradient slot, without updating anything.
///
/// Codebook usage counters are updated as in a training step.
pub fn compute_gradients(model: &mut StainPidr, batch: &TrainingBatch) -> Result<LossReport> {
    Ok(forward_backward(model, batch)?.0.report)
}

/// Computes every loss term on `batch` and applies one optimizer step to all components.
///
/// With every loss weight at zero nothing is updated.
pub fn train_step(model: &mut StainPidr, opt: &mut AdamW, batch: &TrainingBatch) -> Result<LossReport> {
    let step = opt.steps_taken() as usize;
    let out = step_inner(model, opt, batch).map_err(|e| match e {
        Error::NonFinite(op) => Error::Diverged { step, term: op },
        other => other,
    })?;
    if let Some(term) = out.report.first_non_finite() {
        return Err(Error::Diverged { step, term });
    }
    Ok(out.report)
}

/// Seeded training loop over two color domains.
#[derive(Debug)]
pub struct Trainer {
    model: StainPidr,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(model: StainPidr) -> Self {
        let optimizer = AdamW::new(model.config().optimizer.clone());
        let rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x005e_ed0f_ba7c);
        Self {
            model,
            optimizer,
            rng,
            steps: 0,
        }
    }

    pub fn model(&self) -> &StainPidr {
        &self.model
    }

    pub fn into_model(self) -> StainPidr {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Samples a batch and trains on it.
    pub fn step(&mut self, domain_a: &[RgbImage], domain_b: &[RgbImage]) -> Result<LossReport> {
        let batch = TrainingBatch::sample(domain_a, domain_b, &mut self.rng)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &TrainingBatch) -> Result<LossReport> {
        let step = self.steps;
        let out = step_inner(&mut self.model, &mut self.optimizer, batch).map_err(|e| match e {
            Error::NonFinite(op) => Error::Diverged { step, term: op },
            other => other,
        })?;
        if let Some(term) = out.report.first_non_finite() {
            return Err(Error::Diverged { step, term });
        }
        self.steps += 1;
        let every = self.model.config().codebook_restart_interval;
        if every > 0 && self.steps.is_multiple_of(every) {
            let n = self.model.codebook_mut().restart_dead(&out.color_rows, &mut self.rng);
            log::debug!("step {}: restarted {n} unused codebook entries", self.steps);
        }
        Ok(out.report)
    }

    /// Runs `steps` steps, calling `on_step` after each.
    pub fn fit(
        &mut self,
        domain_a: &[RgbImage],
        domain_b: &[RgbImage],
        steps: usize,
        mut on_step: impl FnMut(usize, &LossReport),
    ) -> Result<Vec<LossReport>> {
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let report = self.step(domain_a, domain_b)?;
            on_step(self.steps, &report);
            history.push(report);
        }
        Ok(history)
    }
}
