//! Central-difference verification of every hand-derived gradient.
//!
//! Each operation in the backward chain is checked on freshly drawn random
//! instances: the two loss heads with respect to both embedding inputs, the
//! embedder parameter gradients for both architectures, and the two
//! vector-Jacobian products (row softmax, column normalization) the chain is
//! built from. Instances that land near a hinge tie are redrawn, because the
//! loss is not differentiable exactly at a tie and central differences
//! straddle the kink.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assoc::{backward, forward_raw, LossConfig, LossKind};
use crate::error::Result;
use crate::matrix::{
    finite_difference_check, l2_normalize_backward, l2_normalize_columns, row_softmax,
    row_softmax_backward, Matrix,
};
use crate::train::LearnedEmbedder;

/// Tolerance on ties: instances whose hinge decision would flip under a
/// perturbation of this size are redrawn.
pub const TIE_TOLERANCE: f64 = 1e-4;

/// Switch for deliberately corrupting one analytic gradient, used to prove
/// the checker actually fails when a backward pass is wrong.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the analytic input gradient of the symmetric loss.
    FlipInputGradientSign,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Random loss instances per input-gradient op.
    pub instances: usize,
    /// Random instances per parameter-gradient op (each instance checks the
    /// full flattened parameter vector).
    pub param_instances: usize,
    /// Instances for the standalone vector-Jacobian product ops.
    pub vjp_instances: usize,
    pub seed: u64,
    /// Maximum allowed relative error, `|fd - analytic| / max(1, |analytic|)`.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            param_instances: 20,
            vjp_instances: 25,
            seed: 0,
            tolerance: 1e-5,
            step: 1e-6,
        }
    }
}

/// Outcome for one checked operation.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: String,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn unit_columns(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Matrix {
    loop {
        let m = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(rng));
        if let Ok(n) = crate::matrix::l2_normalize_columns(&m) {
            return n;
        }
    }
}

/// Draws an off-tie loss instance with `K1, K2 ∈ [2, 8]`, `D ∈ [2, 16]`.
fn draw_instance(rng: &mut ChaCha8Rng, cfg: &LossConfig) -> (Matrix, Matrix) {
    loop {
        let d = rng.gen_range(2..=16);
        let k1 = rng.gen_range(2..=8);
        let k2 = rng.gen_range(2..=8);
        let x1 = unit_columns(rng, d, k1);
        let x2 = unit_columns(rng, d, k2);
        let pass = match forward_raw(&x1, &x2, cfg) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if pass.near_hinge_tie(TIE_TOLERANCE) {
            continue;
        }
        return (x1, x2);
    }
}

fn check_input_gradients(
    kind: LossKind,
    suite: &SuiteConfig,
    rng: &mut ChaCha8Rng,
    fault: Option<Fault>,
) -> Result<OpReport> {
    let cfg = LossConfig { kind, ..LossConfig::default() };
    let mut worst = 0.0f64;
    for _ in 0..suite.instances {
        let (x1, x2) = draw_instance(rng, &cfg);
        let pass = forward_raw(&x1, &x2, &cfg)?;
        let g = backward(&pass);
        let mut d_x1 = g.d_x1;
        if fault == Some(Fault::FlipInputGradientSign) && kind == LossKind::Symmetric {
            d_x1 = d_x1.scaled(-1.0);
        }
        let e1 = finite_difference_check(
            |m| forward_raw(m, &x2, &cfg).unwrap().loss(),
            &x1,
            &d_x1,
            suite.step,
        )?;
        let e2 = finite_difference_check(
            |m| forward_raw(&x1, m, &cfg).unwrap().loss(),
            &x2,
            &g.d_x2,
            suite.step,
        )?;
        worst = worst.max(e1).max(e2);
    }
    Ok(OpReport {
        op: format!("{}-loss/input-gradients", cfg.kind.as_str()),
        checks: suite.instances,
        max_rel_err: worst,
        tolerance: suite.tolerance,
    })
}

fn param_max_rel(
    model: &LearnedEmbedder,
    x1: &Matrix,
    x2: &Matrix,
    cfg: &LossConfig,
    step: f64,
) -> Result<f64> {
    let loss_of = |m: &LearnedEmbedder| -> f64 {
        let (e1, _) = m.embed_raw(x1).unwrap();
        let (e2, _) = m.embed_raw(x2).unwrap();
        forward_raw(&e1, &e2, cfg).unwrap().loss()
    };
    let (e1, t1) = model.embed_raw(x1)?;
    let (e2, t2) = model.embed_raw(x2)?;
    let pass = forward_raw(&e1, &e2, cfg)?;
    let g = backward(&pass);
    let g1 = model.embed_backward(&t1, &g.d_x1)?.into_flat();
    let g2 = model.embed_backward(&t2, &g.d_x2)?.into_flat();
    let analytic: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();

    let base = model.params_flat();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + step;
        probe.set_params_flat(&p)?;
        let up = loss_of(&probe);
        p[i] = base[i] - step;
        probe.set_params_flat(&p)?;
        let down = loss_of(&probe);
        p[i] = base[i];
        let fd = (up - down) / (2.0 * step);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn check_param_gradients(
    two_layer: bool,
    suite: &SuiteConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OpReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < suite.param_instances {
        let d = rng.gen_range(2..=6);
        let k1 = rng.gen_range(2..=6);
        let k2 = rng.gen_range(2..=6);
        let x1 = Matrix::from_fn(d, k1, |_, _| StandardNormal.sample(rng));
        let x2 = Matrix::from_fn(d, k2, |_, _| StandardNormal.sample(rng));
        let model = if two_layer {
            LearnedEmbedder::two_layer(d, d + 2, d, rng)?
        } else {
            LearnedEmbedder::linear(d, d, rng)?
        };
        let kind = if checked % 2 == 0 { LossKind::Asymmetric } else { LossKind::Symmetric };
        let cfg = LossConfig { kind, ..LossConfig::default() };
        let (e1, _) = model.embed_raw(&x1)?;
        let (e2, _) = model.embed_raw(&x2)?;
        if forward_raw(&e1, &e2, &cfg)?.near_hinge_tie(TIE_TOLERANCE) {
            continue;
        }
        worst = worst.max(param_max_rel(&model, &x1, &x2, &cfg, suite.step)?);
        checked += 1;
    }
    Ok(OpReport {
        op: if two_layer {
            "two-layer-embedder/parameter-gradients".into()
        } else {
            "single-layer-embedder/parameter-gradients".into()
        },
        checks: suite.param_instances,
        max_rel_err: worst,
        tolerance: suite.tolerance,
    })
}

fn check_row_softmax_vjp(suite: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut worst = 0.0f64;
    for _ in 0..suite.vjp_instances {
        let rows = rng.gen_range(2..=8);
        let cols = rng.gen_range(2..=8);
        let temp = rng.gen_range(0.5..20.0);
        let m = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let w = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let y = row_softmax(&m, temp)?;
        let analytic = row_softmax_backward(&y, &w, temp)?;
        let objective = |probe: &Matrix| -> f64 {
            let y = row_softmax(probe, temp).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(finite_difference_check(objective, &m, &analytic, suite.step)?);
    }
    Ok(OpReport {
        op: "row-softmax/vjp".into(),
        checks: suite.vjp_instances,
        max_rel_err: worst,
        tolerance: suite.tolerance,
    })
}

fn check_normalize_vjp(suite: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    let mut worst = 0.0f64;
    for _ in 0..suite.vjp_instances {
        let d = rng.gen_range(2..=8);
        let k = rng.gen_range(2..=8);
        // Keep columns away from zero norm, where normalization is singular.
        let m = loop {
            let m = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(rng));
            let ok = (0..k).all(|j| {
                let n: f64 = (0..d).map(|i| m.get(i, j) * m.get(i, j)).sum();
                n.sqrt() > 0.3
            });
            if ok {
                break m;
            }
        };
        let w = Matrix::from_fn(d, k, |_, _| StandardNormal.sample(rng));
        let analytic = l2_normalize_backward(&m, &w)?;
        let objective = |probe: &Matrix| -> f64 {
            let y = l2_normalize_columns(probe).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(finite_difference_check(objective, &m, &analytic, suite.step)?);
    }
    Ok(OpReport {
        op: "column-normalize/vjp".into(),
        checks: suite.vjp_instances,
        max_rel_err: worst,
        tolerance: suite.tolerance,
    })
}

/// Runs every gradient check once and returns one report per operation.
pub fn run_suite(suite: &SuiteConfig) -> Result<Vec<OpReport>> {
    run_suite_with_fault(suite, None)
}

/// Same as [`run_suite`] but optionally corrupts one analytic gradient so
/// callers can verify the suite rejects a wrong backward pass.
pub fn run_suite_with_fault(suite: &SuiteConfig, fault: Option<Fault>) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    Ok(vec![
        check_input_gradients(LossKind::Symmetric, suite, &mut rng, fault)?,
        check_input_gradients(LossKind::Asymmetric, suite, &mut rng, fault)?,
        check_param_gradients(false, suite, &mut rng)?,
        check_param_gradients(true, suite, &mut rng)?,
        check_row_softmax_vjp(suite, &mut rng)?,
        check_normalize_vjp(suite, &mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteConfig {
        SuiteConfig { instances: 10, param_instances: 4, vjp_instances: 6, ..SuiteConfig::default() }
    }

    #[test]
    fn suite_passes_on_correct_gradients() {
        let reports = run_suite(&quick()).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed(), "{}: max rel err {}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn op_names_are_unique() {
        let reports = run_suite(&quick()).unwrap();
        let mut names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), reports.len());
    }

    #[test]
    fn injected_sign_flip_is_caught() {
        let reports =
            run_suite_with_fault(&quick(), Some(Fault::FlipInputGradientSign)).unwrap();
        let sym = reports.iter().find(|r| r.op.starts_with("symmetric")).unwrap();
        assert!(!sym.passed(), "sign flip went unnoticed: {}", sym.max_rel_err);
        let rest_ok = reports.iter().filter(|r| !r.op.starts_with("symmetric")).all(|r| r.passed());
        assert!(rest_ok);
    }
}
