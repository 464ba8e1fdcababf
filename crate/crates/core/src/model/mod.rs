//! The decoupled restaining network.
//!
//! A color encoder and a structure encoder map an image to two `d×h'×w'`
//! feature maps. Color features are snapped to a learned codebook, a stack of
//! stain blocks injects them into the structure tokens through
//! cross-attention, and a decoder turns the result back into an image.

mod augment;
mod checkpoint;
mod codebook;
mod layers;
mod losses;
mod params;
mod train;

pub use augment::{augment_color_preserving, augment_structure_preserving, ColorAugment, StructureAugment};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use codebook::{codebook_loss, quantize, Codebook};
pub use losses::{contrastive_color_loss, contrastive_structure_loss, global_average_pool, reconstruction_loss};
pub use params::{Bound, ParamStore};
pub use train::{compute_gradients, train_step, LossReport, Trainer, TrainingBatch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::RgbImage;
use crate::error::{Error, Result};
use crate::tensor::{AdamWConfig, Tape, Tensor, Var};

/// Number of stain blocks in the stain module.
pub const STAIN_BLOCKS: usize = 6;

/// Weights of the four training objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub contrast_color: f32,
    pub contrast_structure: f32,
    pub codebook: f32,
    pub reconstruction: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrast_color: 1.0,
            contrast_structure: 1.0,
            codebook: 1.0,
            reconstruction: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            contrast_color: 0.0,
            contrast_structure: 0.0,
            codebook: 0.0,
            reconstruction: 0.0,
        }
    }

    pub fn all_zero(&self) -> bool {
        [self.contrast_color, self.contrast_structure, self.codebook, self.reconstruction]
            .iter()
            .all(|&w| w == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square input tiles.
    pub image_size: usize,
    /// Feature dimension `d` of both encoders and the codebook.
    pub feature_channels: usize,
    pub codebook_size: usize,
    pub num_stain_blocks: usize,
    pub attention_heads: usize,
    /// Hidden width of the stain-block MLP, as a multiple of `d`.
    pub mlp_ratio: usize,
    /// Commitment weight of the codebook loss.
    pub alpha: f32,
    pub loss_weights: LossWeights,
    /// Apply the reconstruction loss to the second image of each batch too.
    pub reconstruct_both: bool,
    /// Start attention output and MLP output projections at zero so every stain block is the identity.
    pub zero_init_residual: bool,
    /// Every this many steps, move never-used codebook entries onto recent encoder outputs. 0 disables.
    pub codebook_restart_interval: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            feature_channels: 64,
            codebook_size: 256,
            num_stain_blocks: STAIN_BLOCKS,
            attention_heads: 4,
            mlp_ratio: 2,
            alpha: 0.25,
            loss_weights: LossWeights::default(),
            reconstruct_both: true,
            zero_init_residual: true,
            codebook_restart_interval: 0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        let d = self.feature_channels;
        if d == 0 || !d.is_multiple_of(4) {
            return bad(format!("feature_channels must be a positive multiple of 4, got {d}"));
        }
        if self.attention_heads == 0 || !d.is_multiple_of(self.attention_heads) {
            return bad(format!("feature_channels {d} is not divisible by {} heads", self.attention_heads));
        }
        if self.codebook_size == 0 {
            return bad("codebook_size must be positive".into());
        }
        if self.num_stain_blocks == 0 || self.mlp_ratio == 0 {
            return bad("num_stain_blocks and mlp_ratio must be positive".into());
        }
        if self.num_stain_blocks != STAIN_BLOCKS {
            log::warn!("using {} stain blocks instead of {STAIN_BLOCKS}", self.num_stain_blocks);
        }
        let w = &self.loss_weights;
        if [self.alpha, w.contrast_color, w.contrast_structure, w.codebook, w.reconstruction]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("alpha and loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Side length of the feature maps.
    pub fn feature_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn tokens(&self) -> usize {
        self.feature_size() * self.feature_size()
    }
}

/// What a feature map represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureRole {
    Color,
    Structure,
    QuantizedColor,
    Stained,
}

/// A `B×d×h'×w'` feature map on a tape, tagged with its role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    var: Var,
    role: FeatureRole,
}

impl FeatureMap {
    pub fn new(var: Var, role: FeatureRole) -> Self {
        Self { var, role }
    }

    pub fn var(&self) -> Var {
        self.var
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }

    pub(crate) fn expect_role(&self, role: FeatureRole) -> Result<()> {
        if self.role != role {
            return Err(Error::InvalidArgument(format!("expected a {role:?} feature map, got {:?}", self.role)));
        }
        Ok(())
    }

    /// Spatial vectors as `[B, h'·w', d]`.
    pub fn tokens(&self, tape: &mut Tape) -> Result<Var> {
        let s = tape.shape(self.var).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape(format!("feature map must be 4-D, got {s:?}")));
        }
        let t = tape.permute(self.var, &[0, 2, 3, 1])?;
        tape.reshape(t, &[s[0], s[2] * s[3], s[1]])
    }

    /// Spatial vectors of all batch items as `[B·h'·w', d]`.
    pub fn token_rows(&self, tape: &mut Tape) -> Result<Var> {
        let t = self.tokens(tape)?;
        let s = tape.shape(t).to_vec();
        tape.reshape(t, &[s[0] * s[1], s[2]])
    }

    /// Folds tokens (`[B, n, d]` or `[B·n, d]`) back into the geometry of `like`.
    pub fn from_token_rows(tape: &mut Tape, tokens: Var, like: &FeatureMap, role: FeatureRole) -> Result<Self> {
        let s = tape.shape(like.var).to_vec();
        let t = tape.reshape(tokens, &[s[0], s[2], s[3], s[1]])?;
        let var = tape.permute(t, &[0, 3, 1, 2])?;
        Ok(Self { var, role })
    }
}

/// Selects batch items `index` of a tensor whose first axis is the batch.
pub(crate) fn select_batch(tape: &mut Tape, x: Var, index: &[usize]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let per_item: usize = s[1..].iter().product();
    let flat = tape.reshape(x, &[s[0], per_item])?;
    let picked = tape.gather_rows(flat, index)?;
    let mut shape = s;
    shape[0] = index.len();
    tape.reshape(picked, &shape)
}

/// Parameter handles of a model recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub params: Bound,
    pub codebook: Var,
}

/// Color encoder, structure encoder, codebook, stain module and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StainPidr {
    config: ModelConfig,
    params: ParamStore,
    codebook: Codebook,
}

impl StainPidr {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.feature_channels;
        let mut params = ParamStore::new();
        layers::init_encoder(&mut params, "color_encoder", d, &mut rng)?;
        layers::init_encoder(&mut params, "structure_encoder", d, &mut rng)?;
        for b in 0..config.num_stain_blocks {
            layers::init_stain_block(
                &mut params,
                &format!("stain.block{b}"),
                d,
                config.mlp_ratio,
                config.zero_init_residual,
                &mut rng,
            )?;
        }
        layers::init_decoder(&mut params, "decoder", d, &mut rng)?;
        let codebook = Codebook::random(config.codebook_size, d, &mut rng)?;
        Ok(Self { config, params, codebook })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Codebook {
        &mut self.codebook
    }

    pub(crate) fn split_mut(&mut self) -> (&mut ParamStore, &mut Codebook) {
        (&mut self.params, &mut self.codebook)
    }

    /// Weight count including the codebook.
    pub fn num_values(&self) -> usize {
        self.params.num_values() + self.codebook.entries().numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let params = self.params.bind(tape, trainable);
        let codebook = if trainable {
            tape.watch(self.codebook.entries())
        } else {
            tape.constant(self.codebook.entries().clone())
        };
        BoundModel { params, codebook }
    }

    fn check_images(&self, tape: &Tape, img: Var) -> Result<()> {
        let s = tape.shape(img);
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::InvalidShape(format!("expected B×3×{n}×{n} images, got {s:?}")));
        }
        Ok(())
    }

    pub fn encode_color(&self, tape: &mut Tape, m: &BoundModel, img: Var) -> Result<FeatureMap> {
        self.check_images(tape, img)?;
        let var = layers::encoder(tape, &m.params, "color_encoder", img)?;
        Ok(FeatureMap::new(var, FeatureRole::Color))
    }

    pub fn encode_structure(&self, tape: &mut Tape, m: &BoundModel, img: Var) -> Result<FeatureMap> {
        self.check_images(tape, img)?;
        let var = layers::encoder(tape, &m.params, "structure_encoder", img)?;
        Ok(FeatureMap::new(var, FeatureRole::Structure))
    }

    /// One stain block applied to structure tokens with quantized color tokens.
    pub fn stain_block(&self, tape: &mut Tape, m: &BoundModel, block: usize, x: Var, color: Var) -> Result<Var> {
        if block >= self.config.num_stain_blocks {
            return Err(Error::InvalidArgument(format!("no stain block {block}")));
        }
        layers::stain_block(tape, &m.params, &format!("stain.block{block}"), x, color, self.config.attention_heads)
    }

    /// Attention probabilities of a block's cross-attention, `[B·heads, n, m]`.
    pub fn cross_attention_weights(&self, tape: &mut Tape, m: &BoundModel, block: usize, x: Var, color: Var) -> Result<Var> {
        let prefix = format!("stain.block{block}");
        let h = layers::norm(tape, &m.params, &format!("{prefix}.norm2"), x)?;
        layers::attention_weights(
            tape,
            &m.params,
            &format!("{prefix}.cross_attn"),
            h,
            color,
            self.config.attention_heads,
        )
    }

    /// Restains structure features with quantized color features through every stain block.
    pub fn stain_module(&self, tape: &mut Tape, m: &BoundModel, structure: &FeatureMap, color: &FeatureMap) -> Result<FeatureMap> {
        structure.expect_role(FeatureRole::Structure)?;
        color.expect_role(FeatureRole::QuantizedColor)?;
        let (ss, sc) = (tape.shape(structure.var()).to_vec(), tape.shape(color.var()).to_vec());
        if ss.len() != 4 || sc.len() != 4 || ss[0] != sc[0] || ss[1] != sc[1] {
            return Err(Error::ShapeMismatch {
                op: "stain_module",
                lhs: ss,
                rhs: sc,
            });
        }
        let mut x = structure.tokens(tape)?;
        let c = color.tokens(tape)?;
        for b in 0..self.config.num_stain_blocks {
            x = self.stain_block(tape, m, b, x, c)?;
        }
        FeatureMap::from_token_rows(tape, x, structure, FeatureRole::Stained)
    }

    pub fn decode(&self, tape: &mut Tape, m: &BoundModel, stained: &FeatureMap) -> Result<Var> {
        stained.expect_role(FeatureRole::Stained)?;
        let s = tape.shape(stained.var());
        let f = self.config.feature_size();
        if s.len() != 4 || s[1] != self.config.feature_channels || s[2] != f || s[3] != f {
            return Err(Error::InvalidShape(format!(
                "decoder expects B×{}×{f}×{f}, got {s:?}",
                self.config.feature_channels
            )));
        }
        layers::decoder(tape, &m.params, "decoder", stained.var())
    }

    /// Structure of `structure_imgs` restained with the colors of `color_imgs`, without recording usage.
    fn restain(&self, tape: &mut Tape, m: &BoundModel, structure_imgs: Var, color_imgs: Var) -> Result<Var> {
        let s = self.encode_structure(tape, m, structure_imgs)?;
        let c = self.encode_color(tape, m, color_imgs)?;
        let (q, _) = codebook::quantize_untracked(tape, &c, m.codebook, &self.codebook)?;
        let st = self.stain_module(tape, m, &s, &q)?;
        self.decode(tape, m, &st)
    }

    fn image_var(&self, tape: &mut Tape, img: &RgbImage) -> Result<Var> {
        let n = self.config.image_size;
        if img.width() != n || img.height() != n {
            return Err(Error::DimensionMismatch(img.width(), img.height(), n, n));
        }
        Ok(tape.constant(img.to_tensor()))
    }

    /// `src` restained with the colors of `template`. Reentrant: weights are only read.
    pub fn normalize_image(&self, src: &RgbImage, template: &RgbImage) -> Result<RgbImage> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let s = self.image_var(&mut tape, src)?;
        let t = self.image_var(&mut tape, template)?;
        let out = self.restain(&mut tape, &m, s, t)?;
        RgbImage::from_tensor(tape.value(out))
    }

    /// Decoder output for `img` restained with its own colors, as a `1×3×H×W` tensor in `[0, 1]`.
    pub fn reconstruct(&self, img: &RgbImage) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let x = self.image_var(&mut tape, img)?;
        let out = self.restain(&mut tape, &m, x, x)?;
        Ok(tape.value(out).clone())
    }

    /// Encoder output for `img` (`role` must be color or structure).
    pub fn features(&self, img: &RgbImage, role: FeatureRole) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false);
        let x = self.image_var(&mut tape, img)?;
        let f = match role {
            FeatureRole::Color => self.encode_color(&mut tape, &m, x)?,
            FeatureRole::Structure => self.encode_structure(&mut tape, &m, x)?,
            other => return Err(Error::InvalidArgument(format!("{other:?} is not an encoder output"))),
        };
        Ok(tape.value(f.var()).clone())
    }

    /// Cosine similarity of the pooled encoder features of two images.
    pub fn feature_similarity(&self, a: &RgbImage, b: &RgbImage, role: FeatureRole) -> Result<f32> {
        let fa = self.features(a, role)?;
        let fb = self.features(b, role)?;
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(fa), tape.constant(fb));
        let pa = global_average_pool(&mut tape, va)?;
        let pb = global_average_pool(&mut tape, vb)?;
        let c = tape.cosine_similarity(pa, pb)?;
        Ok(tape.item(c))
    }
}
