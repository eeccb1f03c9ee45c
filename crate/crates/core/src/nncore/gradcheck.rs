//! Central finite-difference verification of tape gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tape::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub epsilon: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many entries per parameter tensor (sampled).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            floor: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// `(row, col, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn mean_rel(&self) -> f64 {
        let (sum, n) = self
            .params
            .iter()
            .fold((0.0, 0usize), |(s, n), p| (s + p.mean_rel * p.checked as f64, n + p.checked));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn flagged(&self, tolerance: f64) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.max_rel > tolerance)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.flagged(tolerance).is_empty()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::invalid("gradient check", "loss must be a (1, 1) scalar"));
    }
    Ok(g.value(loss)[[0, 0]])
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Computes analytic gradients with the tape and compares them against
/// central differences for every trainable parameter.
pub fn gradient_check<F>(store: &mut ParamStore<f64>, loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?.into_params()
    };
    compare_gradients(store, loss_fn, &analytic, opts)
}

/// Compares a supplied gradient against central differences.
pub fn compare_gradients<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    analytic: &Gradients<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::invalid("gradient check", format!("epsilon {} outside [1e-7, 1e-3]", opts.epsilon)));
    }
    let base = eval_loss(store, &loss_fn)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let total = rows * cols;
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(max) if max < total => {
                let mut picked = sample(&mut rng, total, max).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..total).collect(),
        };
        let zeros = Array2::zeros((rows, cols));
        let grad = analytic.get(id).unwrap_or(&zeros);
        let mut max_rel = 0.0;
        let mut sum_rel = 0.0;
        let mut worst = (0, 0, 0.0, 0.0);
        for &flat in &entries {
            let (r, c) = (flat / cols, flat % cols);
            let original = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = original + opts.epsilon;
            let plus = eval_loss(store, &loss_fn);
            store.get_mut(id)[[r, c]] = original - opts.epsilon;
            let minus = eval_loss(store, &loss_fn);
            store.get_mut(id)[[r, c]] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss with {}[{r}, {c}] perturbed by ±{}",
                    store.name(id),
                    opts.epsilon
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad[[r, c]];
            let rel = relative_error(a, numeric, opts.floor);
            sum_rel += rel;
            if rel >= max_rel {
                max_rel = rel;
                worst = (r, c, a, numeric);
            }
        }
        if !entries.is_empty() {
            report.params.push(ParamCheck {
                name: store.name(id).to_string(),
                checked: entries.len(),
                max_rel,
                mean_rel: sum_rel / entries.len() as f64,
                worst,
            });
        }
    }
    Ok(report)
}

/// Central-difference gradient of a scalar loss with respect to an input matrix.
pub fn numeric_input_gradient<F>(store: &ParamStore<f64>, input: &Array2<f64>, epsilon: f64, loss_fn: F) -> Result<Array2<f64>>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |x: Array2<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let v = g.constant(x);
        let loss = loss_fn(&mut g, v)?;
        let value = g.value(loss)[[0, 0]];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("loss during input perturbation".into()))
        }
    };
    let mut out = Array2::zeros(input.dim());
    for ((r, c), slot) in out.indexed_iter_mut() {
        let mut plus = input.clone();
        plus[[r, c]] += epsilon;
        let mut minus = input.clone();
        minus[[r, c]] -= epsilon;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
    }
    Ok(out)
}
