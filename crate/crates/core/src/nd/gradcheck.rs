//! Central finite-difference oracle for taped gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nd::{ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for
/// the gradient of scalar-valued `f` at `x`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let xv = tape.leaf(x.clone())?;
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss, &mut store)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut probe = x.clone();
            probe.data_mut()[i] += delta;
            let mut t = Tape::new();
            let v = t.leaf(probe)?;
            let out = f(&mut t, v)?;
            Ok(scalar_of(&t, out))
        };
        let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check against every parameter in `store`. When
/// `coords_per_param` is set, only that many randomly chosen coordinates
/// of each parameter are probed (chosen with `seed`).
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    mut f: F,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            let mut eval = |x: f64, store: &mut ParamStore| -> Result<f64> {
                store.value_mut(id).data_mut()[c] = x;
                let mut t = Tape::new();
                let out = f(&mut t, store)?;
                Ok(scalar_of(&t, out))
            };
            let plus = eval(orig + FD_STEP, store)?;
            let minus = eval(orig - FD_STEP, store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi].data()[c], numeric));
        }
    }
    Ok(worst)
}
