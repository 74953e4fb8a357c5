use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{LsanError, Result};

/// Denominator floor for relative error, so gradients that are
/// numerically zero are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement between analytic and central-difference gradients for one tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `loss` with `(f(θ+ε) − f(θ−ε)) / 2ε` on
/// up to `samples` coordinates of every tensor in `params`.
///
/// `loss` must register tensor `i` of `params` as graph parameter key `i`.
pub fn finite_diff_check<S, F>(
    state: &mut S,
    params: fn(&mut S) -> &mut [Tensor<f64>],
    names: &[String],
    mut loss: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&S, &mut Graph<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(LsanError::Config(format!("finite difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let out = loss(state, &mut g)?;
    g.backward(out)?;
    let count = params(state).len();
    let analytic: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            g.param_grad(i)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params(state)[i].len()])
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |state: &S| -> Result<f64> {
        let mut g = Graph::inference();
        let v = loss(state, &mut g)?;
        Ok(g.value(v).data()[0])
    };
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, samples).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: (0.0, 0.0),
        };
        for c in coords {
            let orig = params(state)[i].data()[c];
            params(state)[i].data_mut()[c] = orig + eps;
            let plus = eval(state)?;
            params(state)[i].data_mut()[c] = orig - eps;
            let minus = eval(state)?;
            params(state)[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (grad[c] - numeric).abs();
            let rel = abs / grad[c].abs().max(numeric.abs()).max(REL_FLOOR);
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = (grad[c], numeric);
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        report.tensors.push(check);
    }
    Ok(report)
}
