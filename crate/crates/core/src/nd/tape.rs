//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node holding its output and
//! whatever activations its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse execution order, accumulates parameter
//! gradients into the [`ParamStore`], and clears the tape.
//!
//! Ops work on 2-D views (`rows × cols`). Batched sequences are stored
//! as stacked segments of equal length `seg`; the `seg_*` and
//! [`Tape::shift_rows`] ops never mix rows of different segments.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::geom;
use crate::nd::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::nd::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Abs(usize),
    Sum(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Dropout { x: usize, mask: Vec<f64> },
    WeightNorm { v: usize, g: usize, norms: Vec<f64> },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    SelectRows { x: usize, rows: Vec<usize> },
    ShiftRows { x: usize, shift: usize, seg: usize },
    SegMatMulBt { a: usize, b: usize, seg: usize },
    SegMatMul { att: usize, v: usize, seg: usize },
    Atan2 { y: usize, x: usize },
    AngularDiff { a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of leaf variables from one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.leaves.iter().find(|(i, _)| *i == v.idx).map(|(_, t)| t)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes; outstanding [`Var`]s become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.generation, self.generation, "stale variable");
        &self.nodes[v.idx].value
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.idx >= self.nodes.len() {
            return Err(Error::StaleVariable);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => op_inputs(&op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            idx: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, "constant").expect("constant must be finite")
    }

    /// Records an input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), "param")
            .expect("parameters are finite")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), "matmul")
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        self.same_shape(name, ia, ib)?;
        let av = &self.nodes[ia].value;
        let data = av
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op(ia, ib), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (ix, ir) = (self.node(x)?, self.node(row)?);
        let (xv, rv) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let cols = xv.cols();
        if rv.len() != cols {
            return shape_err(name, format!("row of {} for {} columns", rv.len(), cols));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                if mul {
                    *d *= r;
                } else {
                    *d += r;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let op = if mul { Op::MulRow(ix, ir) } else { Op::AddRow(ix, ir) };
        self.push(t, op, name)
    }

    /// Adds a length-`cols` vector to every row (bias).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", false)
    }

    /// Multiplies every row elementwise by a length-`cols` vector (gain).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.node(x)?;
        let t = self.nodes[ix].value.map(|v| v * s);
        self.push(t, Op::Scale(ix, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.node(x)?;
        let t = self.nodes[ix].value.map(|v| v.max(0.0));
        self.push(t, Op::Relu(ix), "relu")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let ix = self.node(x)?;
        let t = self.nodes[ix].value.map(f64::abs);
        self.push(t, Op::Abs(ix), "abs")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.node(x)?;
        let s = self.nodes[ix].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(ix), "sum")
    }

    /// Row-wise softmax, max-shifted before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::SoftmaxRows(ix), "softmax_rows")
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::LayerNorm { x: ix, rstd }, "layer_norm")
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        let ix = self.node(x)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = &self.nodes[ix].value;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { x: ix, mask }, "dropout")
    }

    /// `g · v / ‖v‖` with the norm taken per output column of `v`
    /// (`v: fan_in × out`, `g: out`).
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (iv, ig) = (self.node(v)?, self.node(g)?);
        let (vv, gv) = (&self.nodes[iv].value, &self.nodes[ig].value);
        let (rows, cols) = (vv.rows(), vv.cols());
        if gv.len() != cols {
            return shape_err("weight_norm", format!("{} gains for {cols} outputs", gv.len()));
        }
        let mut norms = vec![0.0; cols];
        for r in 0..rows {
            for (c, n) in norms.iter_mut().enumerate() {
                *n += vv.get(r, c).powi(2);
            }
        }
        for (c, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if *n == 0.0 {
                return Err(Error::ZeroNorm(c));
            }
        }
        let mut data = vv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for ((d, n), gc) in row.iter_mut().zip(&norms).zip(gv.data()) {
                *d *= gc / n;
            }
        }
        let t = Tensor::new(vv.shape().to_vec(), data)?;
        self.push(t, Op::WeightNorm { v: iv, g: ig, norms }, "weight_norm")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let idx = xs.iter().map(|&v| self.node(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let rows = self.nodes[first].value.rows();
        if idx.iter().any(|&i| self.nodes[i].value.rows() != rows) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(idx), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        if start + len > xv.cols() {
            return shape_err("slice_cols", format!("{start}+{len} > {}", xv.cols()));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(
            Tensor::matrix(rows, len, data)?,
            Op::SliceCols { x: ix, start },
            "slice_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        if start + len > xv.rows() {
            return shape_err("slice_rows", format!("{start}+{len} > {}", xv.rows()));
        }
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            Tensor::matrix(len, cols, data)?,
            Op::SliceRows { x: ix, start },
            "slice_rows",
        )
    }

    /// Gathers the given rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return shape_err("select_rows", format!("row {bad} of {}", xv.rows()));
        }
        let mut data = Vec::with_capacity(rows.len() * xv.cols());
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor::matrix(rows.len(), xv.cols(), data)?;
        self.push(
            t,
            Op::SelectRows {
                x: ix,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// Delays each segment of `seg` rows by `shift` steps, zero-filling
    /// the first `shift` rows of every segment.
    pub fn shift_rows(&mut self, x: Var, shift: usize, seg: usize) -> Result<Var> {
        let ix = self.node(x)?;
        let xv = &self.nodes[ix].value;
        check_segments("shift_rows", xv.rows(), seg)?;
        let cols = xv.cols();
        let mut data = vec![0.0; xv.len()];
        for s in 0..xv.rows() / seg {
            for t in shift..seg {
                let dst = (s * seg + t) * cols;
                let src = (s * seg + t - shift) * cols;
                data[dst..dst + cols].copy_from_slice(&xv.data()[src..src + cols]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::ShiftRows { x: ix, shift, seg }, "shift_rows")
    }

    /// Per segment, `A_s · B_sᵀ`; output is `rows × seg`.
    pub fn seg_matmul_bt(&mut self, a: Var, b: Var, seg: usize) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        self.same_shape("seg_matmul_bt", ia, ib)?;
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (rows, d) = (av.rows(), av.cols());
        check_segments("seg_matmul_bt", rows, seg)?;
        let mut out = vec![0.0; rows * seg];
        for s in 0..rows / seg {
            let r = s * seg * d..(s + 1) * seg * d;
            gemm_nt(
                &av.data()[r.clone()],
                &bv.data()[r],
                &mut out[s * seg * seg..(s + 1) * seg * seg],
                seg,
                d,
                seg,
            );
        }
        let t = Tensor::matrix(rows, seg, out)?;
        self.push(t, Op::SegMatMulBt { a: ia, b: ib, seg }, "seg_matmul_bt")
    }

    /// Per segment, `Att_s · V_s` with `att: rows × seg`, `v: rows × d`.
    pub fn seg_matmul(&mut self, att: Var, v: Var, seg: usize) -> Result<Var> {
        let (ia, iv) = (self.node(att)?, self.node(v)?);
        let (av, vv) = (&self.nodes[ia].value, &self.nodes[iv].value);
        let (rows, d) = (vv.rows(), vv.cols());
        check_segments("seg_matmul", rows, seg)?;
        if av.rows() != rows || av.cols() != seg {
            return shape_err(
                "seg_matmul",
                format!("weights {:?} for {rows} rows of segment {seg}", av.shape()),
            );
        }
        let mut out = vec![0.0; rows * d];
        for s in 0..rows / seg {
            gemm_nn(
                &av.data()[s * seg * seg..(s + 1) * seg * seg],
                &vv.data()[s * seg * d..(s + 1) * seg * d],
                &mut out[s * seg * d..(s + 1) * seg * d],
                seg,
                seg,
                d,
            );
        }
        let t = Tensor::matrix(rows, d, out)?;
        self.push(t, Op::SegMatMul { att: ia, v: iv, seg }, "seg_matmul")
    }

    /// Elementwise quadrant-aware direction of `(x, y)`; see
    /// [`geom::direction_of`] for the degenerate rule.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.zip_with(
            y,
            x,
            "atan2",
            |y, x| geom::direction_of(x, y),
            |y, x| Op::Atan2 { y, x },
        )
    }

    /// Elementwise [`geom::angular_diff`].
    pub fn angular_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "angular_diff", geom::angular_diff, |a, b| Op::AngularDiff {
            a,
            b,
        })
    }

    /// Back-propagates from the scalar `loss`, adds parameter gradients
    /// into `store`, returns leaf gradients and clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let il = self.node(loss)?;
        let shape = self.nodes[il].value.shape().to_vec();
        if self.nodes[il].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=il).map(|_| None).collect();
        grads[il] = Some(Tensor::filled(&shape, 1.0));
        let mut out = Gradients {
            leaves: Vec::new(),
            generation: self.generation,
        };
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::Leaf => out.leaves.push((i, g)),
                _ => self.backprop_node(i, &g, &mut grads)?,
            }
        }
        self.clear();
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |j: usize| &nodes[j].value;
        let wants = |j: usize| nodes[j].needs_grad;
        let mut acc = |j: usize, data: Vec<f64>| {
            let t = Tensor::new(nodes[j].value.shape().to_vec(), data).expect("gradient shape");
            match &mut grads[j] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &nodes[i].op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(gd, bv.data(), &mut ga, m, n, k);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), gd, &mut gb, m, k, n);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, gd.to_vec());
                }
                if wants(*b) {
                    acc(*b, gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, gd.to_vec());
                }
                if wants(*b) {
                    acc(*b, gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(x, r) => {
                if wants(*x) {
                    acc(*x, gd.to_vec());
                }
                if wants(*r) {
                    let cols = val(*r).len();
                    let mut gr = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (s, v) in gr.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*r, gr);
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let cols = rv.len();
                if wants(*x) {
                    let gx = gd
                        .chunks(cols)
                        .flat_map(|row| row.iter().zip(rv.data()).map(|(g, s)| g * s))
                        .collect();
                    acc(*x, gx);
                }
                if wants(*r) {
                    let mut gr = vec![0.0; cols];
                    for (grow, xrow) in gd.chunks(cols).zip(xv.data().chunks(cols)) {
                        for ((s, g), xv) in gr.iter_mut().zip(grow).zip(xrow) {
                            *s += g * xv;
                        }
                    }
                    acc(*r, gr);
                }
            }
            Op::Scale(x, s) => acc(*x, gd.iter().map(|g| g * s).collect()),
            Op::Relu(x) => acc(
                *x,
                gd.iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(x) => acc(*x, gd.iter().zip(val(*x).data()).map(|(g, v)| g * sign(*v)).collect()),
            Op::Sum(x) => acc(*x, vec![gd[0]; val(*x).len()]),
            Op::SoftmaxRows(x) => {
                let y = &nodes[i].value;
                let cols = y.cols();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &nodes[i].value;
                let cols = y.cols();
                let n = cols as f64;
                let mut gx = Vec::with_capacity(y.len());
                for ((yr, gr), r) in y.data().chunks(cols).zip(gd.chunks(cols)).zip(rstd) {
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| r * (g - mg - y * mgy)));
                }
                acc(*x, gx);
            }
            Op::Dropout { x, mask } => acc(*x, gd.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::WeightNorm { v, g: gi, norms } => {
                let (vv, gv) = (val(*v), val(*gi));
                let cols = vv.cols();
                // dot_c = Σ_r G_rc v_rc
                let mut dot = vec![0.0; cols];
                for (grow, vrow) in gd.chunks(cols).zip(vv.data().chunks(cols)) {
                    for ((d, g), v) in dot.iter_mut().zip(grow).zip(vrow) {
                        *d += g * v;
                    }
                }
                if wants(*gi) {
                    acc(*gi, dot.iter().zip(norms).map(|(d, n)| d / n).collect());
                }
                if wants(*v) {
                    let mut gvv = Vec::with_capacity(vv.len());
                    for (grow, vrow) in gd.chunks(cols).zip(vv.data().chunks(cols)) {
                        for c in 0..cols {
                            let n = norms[c];
                            gvv.push(gv.data()[c] / n * (grow[c] - vrow[c] * dot[c] / (n * n)));
                        }
                    }
                    acc(*v, gvv);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = gd
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (cols, w) = (xv.cols(), g.cols());
                let mut gx = vec![0.0; xv.len()];
                for (r, grow) in gd.chunks(w).enumerate() {
                    gx[r * cols + start..r * cols + start + w].copy_from_slice(grow);
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                gx[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                acc(*x, gx);
            }
            Op::SelectRows { x, rows } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (grow, &r) in gd.chunks(cols).zip(rows) {
                    for (d, v) in gx[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                acc(*x, gx);
            }
            Op::ShiftRows { x, shift, seg } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for s in 0..xv.rows() / seg {
                    for t in *shift..*seg {
                        let src = (s * seg + t) * cols;
                        let dst = (s * seg + t - shift) * cols;
                        gx[dst..dst + cols].copy_from_slice(&gd[src..src + cols]);
                    }
                }
                acc(*x, gx);
            }
            Op::SegMatMulBt { a, b, seg } => {
                let (av, bv) = (val(*a), val(*b));
                let (rows, d, seg) = (av.rows(), av.cols(), *seg);
                let mut ga = vec![0.0; rows * d];
                let mut gb = vec![0.0; rows * d];
                for s in 0..rows / seg {
                    let r = s * seg * d..(s + 1) * seg * d;
                    let gs = &gd[s * seg * seg..(s + 1) * seg * seg];
                    gemm_nn(gs, &bv.data()[r.clone()], &mut ga[r.clone()], seg, seg, d);
                    gemm_tn(gs, &av.data()[r.clone()], &mut gb[r], seg, seg, d);
                }
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::SegMatMul { att, v, seg } => {
                let (av, vv) = (val(*att), val(*v));
                let (rows, d, seg) = (vv.rows(), vv.cols(), *seg);
                let mut gatt = vec![0.0; rows * seg];
                let mut gv = vec![0.0; rows * d];
                for s in 0..rows / seg {
                    let r = s * seg * d..(s + 1) * seg * d;
                    let ra = s * seg * seg..(s + 1) * seg * seg;
                    gemm_nt(
                        &gd[r.clone()],
                        &vv.data()[r.clone()],
                        &mut gatt[ra.clone()],
                        seg,
                        d,
                        seg,
                    );
                    gemm_tn(&av.data()[ra], &gd[r.clone()], &mut gv[r], seg, seg, d);
                }
                if wants(*att) {
                    acc(*att, gatt);
                }
                if wants(*v) {
                    acc(*v, gv);
                }
            }
            Op::Atan2 { y, x } => {
                let (yv, xv) = (val(*y), val(*x));
                let mut gy = Vec::with_capacity(yv.len());
                let mut gx = Vec::with_capacity(xv.len());
                for ((&g, &yy), &xx) in gd.iter().zip(yv.data()).zip(xv.data()) {
                    if xx.abs() < geom::DIRECTION_EPS && yy.abs() < geom::DIRECTION_EPS {
                        gy.push(0.0);
                        gx.push(0.0);
                    } else {
                        let r2 = xx * xx + yy * yy;
                        gy.push(g * xx / r2);
                        gx.push(-g * yy / r2);
                    }
                }
                if wants(*y) {
                    acc(*y, gy);
                }
                if wants(*x) {
                    acc(*x, gx);
                }
            }
            Op::AngularDiff { a, b } => {
                let s: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .zip(gd)
                    .map(|((x, y), g)| g * sign(geom::wrap_angle(x - y)))
                    .collect();
                if wants(*b) {
                    acc(*b, s.iter().map(|v| -v).collect());
                }
                if wants(*a) {
                    acc(*a, s);
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_segments(op: &'static str, rows: usize, seg: usize) -> Result<()> {
    if seg == 0 || !rows.is_multiple_of(seg) {
        return shape_err(op, format!("{rows} rows do not split into segments of {seg}"));
    }
    Ok(())
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Constant | Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _) | Op::Relu(x) | Op::Abs(x) | Op::Sum(x) | Op::SoftmaxRows(x) => vec![*x],
        Op::LayerNorm { x, .. }
        | Op::Dropout { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SliceRows { x, .. }
        | Op::SelectRows { x, .. }
        | Op::ShiftRows { x, .. } => vec![*x],
        Op::WeightNorm { v, g, .. } => vec![*v, *g],
        Op::ConcatCols(parts) => parts.clone(),
        Op::SegMatMulBt { a, b, .. } => vec![*a, *b],
        Op::SegMatMul { att, v, .. } => vec![*att, *v],
        Op::Atan2 { y, x } => vec![*y, *x],
        Op::AngularDiff { a, b } => vec![*a, *b],
    }
}
