//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever runs forward passes, so it shares no code with
//! the backward sweep it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Gradients whose analytic and numeric magnitudes are both below this
    /// are compared absolutely instead of relatively.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            abs_floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Relative error of one element. When both magnitudes are under `abs_floor`
/// the pair counts as exact if `|a - n| <= abs_floor`, else as
/// `|a - n| / abs_floor`.
pub fn element_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        if diff <= abs_floor {
            0.0
        } else {
            diff / abs_floor
        }
    } else {
        diff / scale
    }
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    g.bind(store);
    let out = f(&mut g)?;
    g.value(out).item()
}

/// Compare backward against central differences for every tensor in `store`.
///
/// `f` must build a scalar from a graph in which every entry of `store` is
/// bound by name (look them up with [`Graph::param_var`]).
pub fn check_gradients<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    g.bind(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, tensor) in store.iter() {
        let numel = tensor.numel();
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let picks: Vec<usize> = match opts.max_elements {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for i in picks {
            let orig = tensor.data()[i];
            let set = |probe: &mut ParamStore<f64>, v: f64| {
                probe.get_mut(name).expect("bound tensor").data_mut()[i] = v;
            };
            set(&mut probe, orig + opts.step);
            let plus = evaluate(&probe, &f)?;
            set(&mut probe, orig - opts.step);
            let minus = evaluate(&probe, &f)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!("finite difference of `{name}`[{i}] is not finite")));
            }
            let a = analytic.data()[i];
            let err = element_error(a, numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                if err >= report.max_error {
                    report.worst = Some(Mismatch {
                        tensor: name.to_string(),
                        element: i,
                        analytic: a,
                        numeric,
                        error: err,
                    });
                }
            }
        }
    }
    Ok(report)
}
