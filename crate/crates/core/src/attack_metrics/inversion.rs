//! Input reconstruction from an observed single-sample update of a dense
//! softmax layer.

use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;

use crate::error::{Error, Result};
use crate::model::Architecture;

/// Rows with `|grad_b| <= GRAD_FLOOR` carry no usable signal.
pub const GRAD_FLOOR: f64 = 1e-9;

/// For one sample, row `r` of the weight gradient is `grad_b[r] · x`, so
/// any row with a nonzero bias gradient gives the input back exactly. Uses
/// the row with the largest `|grad_b|`.
pub fn invert_gradients_analytic(grad_w: &[f64], grad_b: &[f64]) -> Result<Vec<f64>> {
    let classes = grad_b.len();
    if classes == 0 || grad_w.len() % classes != 0 {
        return Err(Error::Parameter(format!(
            "weight gradient of length {} does not split into {classes} rows",
            grad_w.len()
        )));
    }
    let inputs = grad_w.len() / classes;
    let (row, gb) = grad_b
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_finite())
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .ok_or_else(|| Error::AttackInapplicable("no finite bias gradient".into()))?;
    if gb.abs() <= GRAD_FLOOR {
        return Err(Error::AttackInapplicable("every bias gradient is zero".into()));
    }
    Ok(grad_w[row * inputs..(row + 1) * inputs].iter().map(|g| g / gb).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlgConfig {
    pub iterations: usize,
    /// Adam step size.
    pub step: f64,
    /// Seeds the uniform `[0, 1]` starting image.
    pub seed: u64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        DlgConfig { iterations: 500, step: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlgResult {
    /// Best image found, clamped to `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    /// Gradient-matching loss of `image`.
    pub loss: f64,
    /// Set when the loss became non-finite; `image` is then the best
    /// iterate before that point.
    pub diverged: bool,
}

/// Gradient matching: minimise `Σ (∇θ(x̂, ŷ) − g)²` over the observed
/// coordinates, with `ŷ` read off the negative bias gradient and `x̂`
/// updated by Adam on the analytic matching gradient. Coordinates the
/// attacker could not read are `None` and drop out of the loss.
///
/// Only the single-layer model is supported. The first iteration only
/// evaluates the starting point.
pub fn invert_dlg(
    observed: &[Option<f64>],
    arch: &Architecture,
    params: &[f64],
    cfg: &DlgConfig,
) -> Result<DlgResult> {
    let Architecture::Logistic { inputs, classes } = *arch else {
        return Err(Error::AttackInapplicable("gradient matching is implemented for the single-layer model".into()));
    };
    if cfg.iterations == 0 {
        return Err(Error::Parameter("iterations must be at least 1".into()));
    }
    if observed.len() != arch.param_count() || params.len() != arch.param_count() {
        return Err(Error::Parameter(format!(
            "expected {} coordinates, got {} observed and {} parameters",
            arch.param_count(),
            observed.len(),
            params.len()
        )));
    }
    let (ow, ob) = observed.split_at(classes * inputs);
    let (w, b) = params.split_at(classes * inputs);
    // The true class is the only one with a negative bias gradient.
    let label = ob
        .iter()
        .enumerate()
        .filter_map(|(r, g)| g.map(|g| (r, g)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(r, _)| r);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = (0..inputs).map(|_| rng.gen::<f64>()).collect();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; inputs];
    let mut v = vec![0.0; inputs];
    let mut best = DlgResult { image: x.clone(), label, loss: f64::INFINITY, diverged: false };

    for t in 1..=cfg.iterations {
        let (loss, grad) = matching_loss(&x, label, w, b, ow, ob, inputs, classes);
        if !loss.is_finite() {
            best.diverged = true;
            break;
        }
        if loss < best.loss {
            best.loss = loss;
            best.image.clone_from(&x);
        }
        if t == cfg.iterations {
            break;
        }
        for j in 0..inputs {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            let mh = m[j] / (1.0 - beta1.powi(t as i32));
            let vh = v[j] / (1.0 - beta2.powi(t as i32));
            x[j] = (x[j] - cfg.step * mh / (vh.sqrt() + eps)).clamp(0.0, 1.0);
        }
    }
    Ok(best)
}

/// Loss and its gradient in `x`. With `δ = softmax(Wx + b) − onehot(y)`
/// the model gradient is `(δ xᵀ, δ)`; the chain through `δ` uses the
/// softmax Jacobian `diag(p) − p pᵀ`.
#[allow(clippy::too_many_arguments)]
fn matching_loss(
    x: &[f64],
    label: usize,
    w: &[f64],
    b: &[f64],
    ow: &[Option<f64>],
    ob: &[Option<f64>],
    inputs: usize,
    classes: usize,
) -> (f64, Vec<f64>) {
    let z: Vec<f64> = (0..classes)
        .map(|r| b[r] + w[r * inputs..(r + 1) * inputs].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ez: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let total: f64 = ez.iter().sum();
    let p: Vec<f64> = ez.iter().map(|e| e / total).collect();
    let delta: Vec<f64> = (0..classes).map(|r| p[r] - f64::from(u8::from(r == label))).collect();

    let mut loss = 0.0;
    let mut gx = vec![0.0; inputs];
    // dL/dδ_r
    let mut u = vec![0.0; classes];
    for r in 0..classes {
        for j in 0..inputs {
            if let Some(g) = ow[r * inputs + j] {
                let res = delta[r] * x[j] - g;
                loss += res * res;
                gx[j] += 2.0 * res * delta[r];
                u[r] += 2.0 * res * x[j];
            }
        }
        if let Some(g) = ob[r] {
            let res = delta[r] - g;
            loss += res * res;
            u[r] += 2.0 * res;
        }
    }
    // dL/dz = J u with J = diag(p) − p pᵀ
    let pu: f64 = p.iter().zip(&u).map(|(a, c)| a * c).sum();
    let dz: Vec<f64> = (0..classes).map(|r| p[r] * (u[r] - pu)).collect();
    for r in 0..classes {
        for j in 0..inputs {
            gx[j] += dz[r] * w[r * inputs + j];
        }
    }
    (loss, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn setup(seed: u64) -> (Architecture, Vec<f64>, Vec<f64>, usize, Vec<f64>) {
        let arch = Architecture::Logistic { inputs: 64, classes: 4 };
        let mut rng = SplitMix64::new(seed);
        let params: Vec<f64> = (0..arch.param_count()).map(|_| (rng.next_f64() - 0.5) * 0.2).collect();
        let x: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let label = (seed % 4) as usize;
        let (_, grad) = arch.sample_gradient(&params, &x, label);
        (arch, params, x, label, grad)
    }

    #[test]
    fn analytic_recovers_the_input() {
        let (_, _, x, _, grad) = setup(3);
        let (gw, gb) = grad.split_at(256);
        let xr = invert_gradients_analytic(gw, gb).unwrap();
        for (a, b) in xr.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_needs_a_bias_signal() {
        assert!(matches!(invert_gradients_analytic(&[0.0; 8], &[0.0; 2]), Err(Error::AttackInapplicable(_))));
        assert!(matches!(invert_gradients_analytic(&[0.0; 7], &[0.0; 2]), Err(Error::Parameter(_))));
    }

    #[test]
    fn matching_gradient_agrees_with_finite_differences() {
        let (_, params, x, label, grad) = setup(5);
        let obs: Vec<Option<f64>> = grad.iter().enumerate().map(|(i, g)| (i % 3 != 0).then_some(g + 0.01)).collect();
        let (w, b) = params.split_at(256);
        let (ow, ob) = obs.split_at(256);
        let x0: Vec<f64> = x.iter().map(|v| 0.9 * v + 0.05).collect();
        let (_, g) = matching_loss(&x0, label, w, b, ow, ob, 64, 4);
        let h = 1e-6;
        for j in [0, 7, 31, 63] {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (matching_loss(&xp, label, w, b, ow, ob, 64, 4).0 - matching_loss(&xm, label, w, b, ow, ob, 64, 4).0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn dlg_single_iteration_returns_the_start() {
        let (arch, params, _, _, grad) = setup(1);
        let obs: Vec<Option<f64>> = grad.into_iter().map(Some).collect();
        let cfg = DlgConfig { iterations: 1, ..Default::default() };
        let r = invert_dlg(&obs, &arch, &params, &cfg).unwrap();
        let mut rng = StdRng::seed_from_u64(cfg.seed);
        let start: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        assert_eq!(r.image, start);
        assert!(invert_dlg(&obs, &arch, &params, &DlgConfig { iterations: 0, ..cfg }).is_err());
    }

    #[test]
    fn dlg_label_inference_and_convergence() {
        let (arch, params, x, label, grad) = setup(2);
        let obs: Vec<Option<f64>> = grad.into_iter().map(Some).collect();
        let r = invert_dlg(&obs, &arch, &params, &DlgConfig::default()).unwrap();
        assert_eq!(r.label, label);
        assert!(!r.diverged);
        let err = r.image.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.05, "max pixel error {err}");
    }

    #[test]
    fn dlg_rejects_hidden_layers() {
        let arch = Architecture::Mlp { inputs: 4, hidden: 3, classes: 2 };
        let n = arch.param_count();
        assert!(matches!(
            invert_dlg(&vec![None; n], &arch, &vec![0.0; n], &DlgConfig::default()),
            Err(Error::AttackInapplicable(_))
        ));
    }
}
