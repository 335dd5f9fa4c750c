//! Encoder-only temporal transformer over TCN tokens.
//!
//! Pre-norm layers: `h = x + MHSA(LN(x))`, `out = h + FFN(LN(h))`, with
//! dropout on each sublayer output. Attention is unmasked within a
//! window and never crosses windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::nd::{Mode, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 8,
            model_dim: 32,
            ffn_dim: 64,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "encoder: model dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("encoder: model dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "encoder: dropout rate {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Sinusoidal encoding: `PE(t, 2i) = sin(t / 10000^(2i/dim))`,
/// `PE(t, 2i+1) = cos(t / 10000^(2i/dim))`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even dim, got {dim}"
        )));
    }
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            data[t * dim + 2 * i] = angle.sin();
            data[t * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, dim, data)
}

/// Attention weights `softmax(Q·Kᵀ / √d_k)` per segment of `seg` rows.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, seg: usize) -> Result<Var> {
    let dk = tape.value(q).cols();
    let qs = tape.scale(q, 1.0 / (dk as f64).sqrt())?;
    let scores = tape.seg_matmul_bt(qs, k, seg)?;
    tape.softmax_rows(scores)
}

/// `softmax(Q·Kᵀ / √d_k) · V` per segment of `seg` rows.
pub fn scaled_attention(tape: &mut Tape, q: Var, k: Var, v: Var, seg: usize) -> Result<Var> {
    let a = attention_weights(tape, q, k, seg)?;
    tape.seg_matmul(a, v, seg)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, num_heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            num_heads,
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seg: usize) -> Result<Var> {
        let dim = store.value(self.query.weight).cols();
        if tape.value(x).cols() != store.value(self.query.weight).rows() {
            return shape_err(
                "multi_head_attention",
                format!("{} token dims for {dim}", tape.value(x).cols()),
            );
        }
        if self.num_heads == 0 || !dim.is_multiple_of(self.num_heads) {
            return shape_err(
                "multi_head_attention",
                format!("dim {dim} with {} heads", self.num_heads),
            );
        }
        let dk = dim / self.num_heads;
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            heads.push(scaled_attention(tape, qh, kh, vh, seg)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.output.forward(tape, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.model_dim)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.model_dim, cfg.num_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.model_dim)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn1"), cfg.model_dim, cfg.ffn_dim, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn2"), cfg.ffn_dim, cfg.model_dim, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seg: usize,
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.norm1.forward(tape, store, x)?;
        let a = self.attention.forward(tape, store, n, seg)?;
        let a = tape.dropout(a, dropout, mode, rng)?;
        let h = tape.add(x, a)?;

        let n = self.norm2.forward(tape, store, h)?;
        let f = self.ffn_in.forward(tape, store, n)?;
        let f = tape.relu(f)?;
        let f = tape.dropout(f, dropout, mode, rng)?;
        let f = self.ffn_out.forward(tape, store, f)?;
        let f = tape.dropout(f, dropout, mode, rng)?;
        tape.add(h, f)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|l| EncoderLayer::new(store, &format!("{prefix}.layer{l}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// Adds positional encoding to `[segments·seg × model_dim]` tokens and
    /// runs every layer.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        seg: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (rows, dim) = (tape.value(tokens).rows(), tape.value(tokens).cols());
        if dim != self.config.model_dim || seg == 0 || rows % seg != 0 {
            return shape_err("encoder_forward", format!("{rows}x{dim} tokens, segment {seg}"));
        }
        let pe = positional_encoding(seg, dim)?;
        let tiled: Vec<f64> = pe.data().iter().copied().cycle().take(rows * dim).collect();
        let pe = tape.constant(Tensor::matrix(rows, dim, tiled)?);
        let mut h = tape.add(tokens, pe)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, seg, self.config.dropout_rate, mode, rng)?;
        }
        Ok(h)
    }
}
