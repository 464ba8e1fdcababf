//! Building blocks of the encoders, stain module and decoder.
//!
//! Every function records its computation on a tape using parameters looked
//! up by name from a [`Bound`] store. Token tensors are `[B, n, d]`.

use rand::Rng;

use super::params::{fan_in_uniform, Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const ENCODER_STAGES: usize = 3;
const ENCODER_KERNEL: usize = 3;
const DECODER_KERNEL: usize = 4;

/// Channel widths of the encoder stages, ending at `d`.
pub(crate) fn encoder_widths(d: usize) -> [usize; ENCODER_STAGES] {
    [d / 4, d / 2, d]
}

fn norm_params(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[width])?);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width])?);
    Ok(())
}

fn linear_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<()> {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])?
    } else {
        fan_in_uniform(&[fan_in, fan_out], fan_in, rng)?
    };
    store.insert(format!("{prefix}.weight"), w);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])?);
    Ok(())
}

pub(crate) fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    let mut c_in = 3;
    for (i, c_out) in encoder_widths(d).into_iter().enumerate() {
        let fan_in = c_in * ENCODER_KERNEL * ENCODER_KERNEL;
        store.insert(
            format!("{prefix}.stage{i}.weight"),
            fan_in_uniform(&[c_out, c_in, ENCODER_KERNEL, ENCODER_KERNEL], fan_in, rng)?,
        );
        store.insert(format!("{prefix}.stage{i}.bias"), Tensor::zeros(&[c_out])?);
        if i + 1 < ENCODER_STAGES {
            norm_params(store, &format!("{prefix}.stage{i}.norm"), c_out)?;
        }
        c_in = c_out;
    }
    Ok(())
}

pub(crate) fn init_stain_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    zero_residual: bool,
    rng: &mut R,
) -> Result<()> {
    for attn in ["self_attn", "cross_attn"] {
        for proj in ["query", "key", "value"] {
            linear_params(store, &format!("{prefix}.{attn}.{proj}"), d, d, false, rng)?;
        }
        linear_params(store, &format!("{prefix}.{attn}.out"), d, d, zero_residual, rng)?;
    }
    for n in 1..=3 {
        norm_params(store, &format!("{prefix}.norm{n}"), d)?;
    }
    linear_params(store, &format!("{prefix}.mlp.fc1"), d, d * mlp_ratio, false, rng)?;
    linear_params(store, &format!("{prefix}.mlp.fc2"), d * mlp_ratio, d, zero_residual, rng)?;
    Ok(())
}

pub(crate) fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    let widths = [d, d / 2, d / 4, 3];
    for i in 0..ENCODER_STAGES {
        let (c_in, c_out) = (widths[i], widths[i + 1]);
        // transposed conv: each input pixel spreads over (k/stride)² outputs
        let fan_in = c_in * DECODER_KERNEL * DECODER_KERNEL / 4;
        store.insert(
            format!("{prefix}.stage{i}.weight"),
            fan_in_uniform(&[c_in, c_out, DECODER_KERNEL, DECODER_KERNEL], fan_in, rng)?,
        );
        store.insert(format!("{prefix}.stage{i}.bias"), Tensor::zeros(&[c_out])?);
        if i + 1 < ENCODER_STAGES {
            norm_params(store, &format!("{prefix}.stage{i}.norm"), c_out)?;
        }
    }
    Ok(())
}

/// `x·W + b` for `x: [..., din]`.
pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let din = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / din.max(1);
    let flat = tape.reshape(x, &[rows, din])?;
    let y = tape.matmul(flat, p.get(&format!("{prefix}.weight"))?)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.bias"))?, 1)?;
    let dout = tape.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("nonempty shape") = dout;
    tape.reshape(y, &out_shape)
}

pub(crate) fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{prefix}.gain"))?, p.get(&format!("{prefix}.bias"))?)
}

/// Layer norm across the channel axis of a `B×C×H×W` map.
fn norm_channels(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let last = tape.permute(x, &[0, 2, 3, 1])?;
    let y = norm(tape, p, prefix, last)?;
    tape.permute(y, &[0, 3, 1, 2])
}

/// Three stride-2 stages `conv3×3 → LN → GELU`; the last is a bare convolution.
pub(crate) fn encoder(tape: &mut Tape, p: &Bound, prefix: &str, img: Var) -> Result<Var> {
    let mut x = img;
    for i in 0..ENCODER_STAGES {
        x = tape.conv2d(x, p.get(&format!("{prefix}.stage{i}.weight"))?, 2, 1)?;
        x = tape.add_bias(x, p.get(&format!("{prefix}.stage{i}.bias"))?, 1)?;
        if i + 1 < ENCODER_STAGES {
            x = norm_channels(tape, p, &format!("{prefix}.stage{i}.norm"), x)?;
            x = tape.gelu(x)?;
        }
    }
    Ok(x)
}

/// Three stride-2 transposed-conv stages back to RGB in `[0, 1]`.
pub(crate) fn decoder(tape: &mut Tape, p: &Bound, prefix: &str, features: Var) -> Result<Var> {
    let mut x = features;
    for i in 0..ENCODER_STAGES {
        x = tape.conv_transpose2d(x, p.get(&format!("{prefix}.stage{i}.weight"))?, 2, 1)?;
        x = tape.add_bias(x, p.get(&format!("{prefix}.stage{i}.bias"))?, 1)?;
        if i + 1 < ENCODER_STAGES {
            x = norm_channels(tape, p, &format!("{prefix}.stage{i}.norm"), x)?;
            x = tape.gelu(x)?;
        }
    }
    tape.sigmoid(x)
}

/// Splits `[B, n, d]` into `[B·h, n, d/h]`.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, n, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, n, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (heads, n, dh) = (s[0] / batch, s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, n, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, n, heads * dh])
}

/// Softmax attention probabilities `[B·h, n, m]` of queries over keys.
pub(crate) fn attention_weights(tape: &mut Tape, p: &Bound, prefix: &str, queries: Var, keys: Var, heads: usize) -> Result<Var> {
    let q = linear(tape, p, &format!("{prefix}.query"), queries)?;
    let k = linear(tape, p, &format!("{prefix}.key"), keys)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let dh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    tape.softmax(scores, 2)
}

/// Multi-head attention of `queries: [B, n, d]` over `context: [B, m, d]`.
pub(crate) fn attention(tape: &mut Tape, p: &Bound, prefix: &str, queries: Var, context: Var, heads: usize) -> Result<Var> {
    let batch = tape.shape(queries)[0];
    let w = attention_weights(tape, p, prefix, queries, context, heads)?;
    let v = linear(tape, p, &format!("{prefix}.value"), context)?;
    let v = split_heads(tape, v, heads)?;
    let mixed = tape.matmul(w, v)?;
    let merged = merge_heads(tape, mixed, batch)?;
    linear(tape, p, &format!("{prefix}.out"), merged)
}

/// Self-attention, cross-attention onto the color tokens, then an MLP, each residual.
pub(crate) fn stain_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, color: Var, heads: usize) -> Result<Var> {
    let (sx, sc) = (tape.shape(x).to_vec(), tape.shape(color).to_vec());
    if sx.len() != 3 || sc.len() != 3 || sx[0] != sc[0] || sx[2] != sc[2] {
        return Err(Error::ShapeMismatch {
            op: "stain_block",
            lhs: sx,
            rhs: sc,
        });
    }
    let h = norm(tape, p, &format!("{prefix}.norm1"), x)?;
    let a = attention(tape, p, &format!("{prefix}.self_attn"), h, h, heads)?;
    let x1 = tape.add(x, a)?;
    let h = norm(tape, p, &format!("{prefix}.norm2"), x1)?;
    let a = attention(tape, p, &format!("{prefix}.cross_attn"), h, color, heads)?;
    let x2 = tape.add(x1, a)?;
    let h = norm(tape, p, &format!("{prefix}.norm3"), x2)?;
    let h = linear(tape, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, p, &format!("{prefix}.mlp.fc2"), h)?;
    tape.add(x2, h)
}
