//! Finite-difference verification of tape gradients.
//!
//! The analytic side runs in the graph's own precision. Central differences
//! are always evaluated in `f64` so the oracle's rounding noise stays far
//! below the tolerance even when the analytic side is `f32`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// A scalar-valued computation over a list of leaves, buildable at any precision.
pub trait GradGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, leaves: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub enum Sampling {
    All,
    /// Check a seeded random subset of each leaf (at least one element per leaf).
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error, `|a−n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub sampling: Sampling,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-3, floor: 1e-3, sampling: Sampling::All }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
}

fn evaluate<T: Scalar, G: GradGraph>(graph: &G, leaves: &[Tensor<T>]) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone().with_requires_grad(false))).collect();
    let out = graph.build(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NotScalar(value.shape()));
    }
    Ok(value.data()[0].to_f64_lossy())
}

/// Compares analytic gradients against central differences for every leaf
/// with `requires_grad` set.
pub fn grad_check<T: Scalar, G: GradGraph>(
    graph: &G,
    leaves: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph.build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut probe: Vec<Tensor<f64>> = leaves.iter().map(|t| t.cast::<f64>()).collect();
    let base = evaluate(graph, &probe)?;
    let again = evaluate(graph, &probe)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(base, again));
    }

    let mut reports = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(vars[li]) {
            Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; leaf.numel()],
        };
        let indices: Vec<usize> = match &opts.sampling {
            Sampling::All => (0..leaf.numel()).collect(),
            Sampling::Fraction { fraction, seed } => {
                let count = ((leaf.numel() as f64 * fraction).ceil() as usize).clamp(1, leaf.numel());
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(li as u64));
                let mut idx = rand::seq::index::sample(&mut rng, leaf.numel(), count).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let mut report = LeafReport { leaf: li, checked: indices.len(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for &i in &indices {
            let orig = probe[li].data()[i];
            probe[li].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(graph, &probe)?;
            probe[li].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(graph, &probe)?;
            probe[li].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(opts.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { leaves: reports, max_rel_error })
}
