//! Central finite-difference checks of analytic gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// that round-off in near-zero gradients is not amplified.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Where the worst mismatch occurred, e.g. `conv1.w[3]`.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn compare(&mut self, what: &str, analytic: &[f64], numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = rel_err(a, n);
            if e > self.max_rel_err || self.checked == 0 {
                self.max_rel_err = self.max_rel_err.max(e);
                self.worst = format!("{what}[{i}] analytic {a:e} numeric {n:e}");
            }
            self.checked += 1;
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

/// Random projection weights in `[-1, 1)` with the dims of `like`.
pub fn projection(like: &Tensor, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, stream::INIT, u64::MAX);
    let data = (0..like.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(like.dims(), data).expect("dims taken from an existing tensor")
}

/// Checks every learnable parameter and the input gradient of a
/// single-input graph against central differences of `⟨g(x), r⟩` for a
/// seeded random `r`.
pub fn check_graph(g: &mut Graph, x: &Tensor, seed: u64, step: f64) -> Result<GradReport> {
    let input = g
        .input_names()
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::InvalidInput("graph has no input".into()))?;
    let y = g.forward_single(x)?;
    let r = projection(&y, seed);
    g.zero_grads();
    g.backward(&r)?;
    let gx = g
        .input_grad(&input)
        .cloned()
        .ok_or_else(|| Error::State("no input gradient after backward".into()))?;

    let mut report = GradReport::default();
    let objective = |g: &mut Graph, x: &Tensor| -> Result<f64> { g.forward_single(x)?.dot(&r) };

    let numeric_x = numeric_gradient(
        |v| objective(g, &Tensor::from_vec(x.dims(), v.to_vec())?),
        x.data(),
        step,
    )?;
    report.compare(&input, gx.data(), &numeric_x);

    for pi in 0..g.params().len() {
        if !g.params()[pi].learnable {
            continue;
        }
        let name = g.params()[pi].name.clone();
        let analytic = g.params()[pi].grad.data().to_vec();
        let original = g.params()[pi].value.clone();
        let numeric = numeric_gradient(
            |v| {
                g.params_mut()[pi].value.data_mut().copy_from_slice(v);
                objective(g, x)
            },
            original.data(),
            step,
        )?;
        g.params_mut()[pi].value = original;
        report.compare(&name, &analytic, &numeric);
    }
    Ok(report)
}
