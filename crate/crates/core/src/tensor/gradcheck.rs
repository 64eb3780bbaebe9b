//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub h: f64,
    /// Check at most this many coordinates, chosen uniformly with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Coordinates where both the analytic and numeric derivative are below
    /// this magnitude are counted but excluded from the maximum.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            max_coords: None,
            seed: 0,
            abs_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// max |analytic − numeric| / (|numeric| + 1e-12)
    pub max_rel_error: f64,
    /// (input, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub skipped_below_floor: usize,
}

fn eval_inputs<F>(f: &F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = point.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

fn coordinates(sizes: &[usize], opts: &FdOptions) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
        .collect();
    match opts.max_coords {
        Some(k) if k < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks = sample(&mut rng, all.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|p| all[p]).collect()
        }
        _ => all,
    }
}

fn compare(
    coords: &[(usize, usize)],
    analytic: impl Fn(usize, usize) -> f64,
    mut numeric: impl FnMut(usize, usize) -> Result<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_below_floor: 0,
    };
    for &(i, j) in coords {
        let a = analytic(i, j);
        let n = numeric(i, j)?;
        report.checked += 1;
        if a.abs() < opts.abs_floor && n.abs() < opts.abs_floor {
            report.skipped_below_floor += 1;
            continue;
        }
        let rel = (a - n).abs() / (n.abs() + 1e-12);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, j, a, n));
        }
    }
    Ok(report)
}

/// Compare tape gradients of the scalar `f` with respect to each tensor in
/// `point` against central differences. `f` receives a fresh graph and one
/// leaf per input tensor.
pub fn finite_diff_check<F>(f: F, point: &[Tensor<f64>], opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let base = eval_inputs(&f, point)?;
    let again = eval_inputs(&f, point)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(format!("{base} != {again} on repeated evaluation")));
    }
    let mut g = Graph::new();
    let vars = point.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let sizes: Vec<usize> = point.iter().map(|t| t.numel()).collect();
    let coords = coordinates(&sizes, opts);
    let h = opts.h;
    compare(
        &coords,
        |i, j| grads[i].data()[j],
        |i, j| {
            let mut shifted = point.to_vec();
            let orig = point[i].data()[j];
            shifted[i].data_mut()[j] = orig + h;
            let fp = eval_inputs(&f, &shifted)?;
            shifted[i].data_mut()[j] = orig - h;
            let fm = eval_inputs(&f, &shifted)?;
            Ok((fp - fm) / (2.0 * h))
        },
        opts,
    )
}

/// Same check with respect to every parameter of `params`. `f` receives a
/// graph bound to a (possibly perturbed) copy of the store.
pub fn finite_diff_check_params<F>(f: F, params: &ParamStore<f64>, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(p);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };
    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(format!("{base} != {again} on repeated evaluation")));
    }
    let mut g = Graph::with_params(params);
    let out = f(&mut g)?;
    g.backward(out)?;
    let grads = g.param_grads();
    let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.numel()).collect();
    let coords = coordinates(&sizes, opts);
    let h = opts.h;
    let mut work = params.clone();
    compare(
        &coords,
        |i, j| grads.get(super::ParamId(i)).map_or(0.0, |t| t.data()[j]),
        |i, j| {
            let id = super::ParamId(i);
            let orig = params.get(id).expect("param exists").data()[j];
            work.value_mut(id)[j] = orig + h;
            let fp = eval(&work)?;
            work.value_mut(id)[j] = orig - h;
            let fm = eval(&work)?;
            work.value_mut(id)[j] = orig;
            Ok((fp - fm) / (2.0 * h))
        },
        opts,
    )
}
