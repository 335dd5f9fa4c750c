//! Temporal convolutional network: a stack of residual blocks built from
//! weight-normalized dilated causal convolutions.
//!
//! Sequences are batched as stacked segments of `seg` rows (see
//! [`crate::nd::Tape::shift_rows`]); causality holds within each segment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{gaussian, xavier_uniform};
use crate::nd::{Mode, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            num_blocks: 4,
            kernel_size: 3,
            channels: 32,
            dilations: vec![1, 2, 4, 8],
            dropout_rate: 0.1,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dilations.len() != self.num_blocks {
            return bad(format!(
                "tcn: {} dilations for {} blocks",
                self.dilations.len(),
                self.num_blocks
            ));
        }
        if self.kernel_size == 0 || self.channels == 0 || self.input_dim == 0 {
            return bad("tcn: kernel size, channels and input dim must be positive".into());
        }
        if self.dilations.contains(&0) {
            return bad("tcn: dilations must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("tcn: dropout rate {}", self.dropout_rate));
        }
        let rf = receptive_field(self.kernel_size, &self.dilations);
        if rf < window {
            return bad(format!("tcn: receptive field {rf} shorter than window {window}"));
        }
        Ok(())
    }
}

/// Time steps visible to one output step; each block applies two convolutions.
pub fn receptive_field(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + 2 * kernel_size.saturating_sub(1) * dilations.iter().sum::<usize>()
}

/// `f(t) = Σ_i W_i · x(t − i·dilation)` with zero history before the
/// segment start.
///
/// `w` holds the taps stacked by rows: `kernel × ch_in` rows (a
/// `[kernel, ch_in, ch_out]` tensor has the same layout), `ch_out` columns.
pub fn dilated_causal_conv(tape: &mut Tape, x: Var, w: Var, dilation: usize, seg: usize) -> Result<Var> {
    let ch_in = tape.value(x).cols();
    let taps = tape.value(w).rows();
    if dilation == 0 || taps == 0 || !taps.is_multiple_of(ch_in) {
        return shape_err(
            "dilated_causal_conv",
            format!("{taps} weight rows for {ch_in} input channels, dilation {dilation}"),
        );
    }
    let mut out: Option<Var> = None;
    for i in 0..taps / ch_in {
        let shift = i * dilation;
        if shift >= seg {
            // the tap only ever sees padding
            break;
        }
        let xi = if shift == 0 { x } else { tape.shift_rows(x, shift, seg)? };
        let wi = tape.slice_rows(w, i * ch_in, ch_in)?;
        let yi = tape.matmul(xi, wi)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, yi)?,
            None => yi,
        });
    }
    Ok(out.expect("tap 0 always contributes"))
}

/// Weight-normalized causal convolution with bias.
#[derive(Debug, Clone)]
pub struct CausalConv {
    pub direction: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl CausalConv {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        ch_in: usize,
        ch_out: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = gaussian(rng, kernel * ch_in, ch_out, 0.01);
        let mut norms = vec![0.0; ch_out];
        for r in 0..v.rows() {
            for (c, n) in norms.iter_mut().enumerate() {
                *n += v.get(r, c).powi(2);
            }
        }
        let g = Tensor::vector(norms.into_iter().map(f64::sqrt).collect());
        Ok(Self {
            direction: store.add(format!("{name}.v"), v)?,
            gain: store.add(format!("{name}.g"), g)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[ch_out]))?,
            dilation,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seg: usize) -> Result<Var> {
        let v = tape.param(store, self.direction);
        let g = tape.param(store, self.gain);
        let w = tape.weight_norm(v, g)?;
        let y = dilated_causal_conv(tape, x, w, self.dilation, seg)?;
        let b = tape.param(store, self.bias);
        tape.add_row(y, b)
    }
}

/// `T_{j+1} = T_j + R(T_j)` where `R` is conv → ReLU → dropout → conv →
/// ReLU → dropout. When the channel count changes, `T_j` is lifted by a
/// 1×1 convolution first.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    pub projection: Option<(ParamId, ParamId)>,
}

impl TcnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seg: usize,
        dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x, seg)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout, mode, rng)?;
        let h = self.conv2.forward(tape, store, h, seg)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, dropout, mode, rng)?;
        let skip = match self.projection {
            Some((w, b)) => {
                let w = tape.param(store, w);
                let b = tape.param(store, b);
                let s = tape.matmul(x, w)?;
                tape.add_row(s, b)?
            }
            None => x,
        };
        tape.add(skip, h)
    }
}

#[derive(Debug, Clone)]
pub struct Tcn {
    pub config: TcnConfig,
    pub blocks: Vec<TcnBlock>,
}

impl Tcn {
    pub fn new<R: Rng>(config: TcnConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut ch_in = config.input_dim;
        for (j, &dil) in config.dilations.iter().enumerate() {
            let name = format!("{prefix}.block{j}");
            let ch = config.channels;
            let conv1 = CausalConv::new(store, &format!("{name}.conv1"), config.kernel_size, ch_in, ch, dil, rng)?;
            let conv2 = CausalConv::new(store, &format!("{name}.conv2"), config.kernel_size, ch, ch, dil, rng)?;
            let projection = if ch_in != ch {
                let w = store.add(format!("{name}.proj.weight"), xavier_uniform(rng, ch_in, ch))?;
                let b = store.add(format!("{name}.proj.bias"), Tensor::zeros(&[ch]))?;
                Some((w, b))
            } else {
                None
            };
            blocks.push(TcnBlock {
                conv1,
                conv2,
                projection,
            });
            ch_in = ch;
        }
        Ok(Self { config, blocks })
    }

    /// Maps `[segments·seg × input_dim]` to `[segments·seg × channels]`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seg: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if tape.value(x).cols() != self.config.input_dim {
            return shape_err(
                "tcn_forward",
                format!(
                    "{} input channels, expected {}",
                    tape.value(x).cols(),
                    self.config.input_dim
                ),
            );
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, store, h, seg, self.config.dropout_rate, mode, rng)?;
        }
        Ok(h)
    }
}
