//! Self-checks for the derivative identities and divergence formulas.
//!
//! Finite differences use central stencils with two rounds of Richardson
//! extrapolation. Steps on activations are scaled by `1/|g|` so that every
//! stencil moves the logit by the same amount regardless of gradient size.

use serde::Serialize;

use crate::cam::{SmoothFn, SmoothKind};
use crate::error::Result;
use crate::metrics::{kl_divergence, mdd, ProbDist};
use crate::model::{Model, ScalarKind};
use crate::pipeline::synthetic_image;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Logit-space step used by the finite-difference stencils.
pub const LOGIT_STEP: f64 = 0.1;

/// Central difference of order 1, 2 or 3 with step `h`.
pub fn central_difference(f: &dyn Fn(f64) -> f64, x: f64, order: usize, h: f64) -> f64 {
    match order {
        1 => (f(x + h) - f(x - h)) / (2.0 * h),
        2 => (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h),
        3 => (f(x + 2.0 * h) - 2.0 * f(x + h) + 2.0 * f(x - h) - f(x - 2.0 * h)) / (2.0 * h * h * h),
        _ => panic!("unsupported derivative order {order}"),
    }
}

/// Central difference refined by two Richardson steps (error `O(h⁶)`).
pub fn richardson(f: &dyn Fn(f64) -> f64, x: f64, order: usize, h: f64) -> f64 {
    let d: Vec<f64> = [h, h / 2.0, h / 4.0].iter().map(|&s| central_difference(f, x, order, s)).collect();
    let r1 = (4.0 * d[1] - d[0]) / 3.0;
    let r2 = (4.0 * d[2] - d[1]) / 3.0;
    (16.0 * r2 - r1) / 15.0
}

/// Symmetric relative error; 0 when both values are 0.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Deliberate faults for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates the analytic second derivative of the smooth function.
    FlipSecondDerivative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub worst_error: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: true,
            checks: 0,
            worst_error: 0.0,
            tolerance,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, label: impl FnOnce() -> String, err: f64, tolerance: f64) {
        self.worst_error = self.worst_error.max(err);
        self.spot_check(label, err, tolerance);
    }

    /// A check that gates the result without entering `worst_error`.
    fn spot_check(&mut self, label: impl FnOnce() -> String, err: f64, tolerance: f64) {
        self.checks += 1;
        if err.is_nan() || err >= tolerance {
            self.passed = false;
            if self.failures.len() < 10 {
                self.failures.push(format!("{}: error {err:.3e} ≥ {tolerance:.0e}", label()));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

fn analytic(kind: SmoothKind, logits: &Tensor, class: usize, fault: Fault) -> Result<[f64; 3]> {
    let d = SmoothFn::new(kind, logits, class)?.at_current();
    let d2 = if fault == Fault::FlipSecondDerivative { -d.d2 } else { d.d2 };
    Ok([d.d1, d2, d.d3])
}

/// Compares `f⁽ⁿ⁾(S^c)·gⁿ` with finite differences of `Y^c` in one activation
/// entry of the final scoring point, for `n = 1, 2, 3`.
pub fn derivative_identity(model: &Model, samples: usize, seed: u64, fault: Fault) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("derivative-identity", 1e-4);
    let point = model
        .spec()
        .final_scoring_point()
        .expect("model has a scoring point")
        .to_string();
    let [c, h, w] = model.input_shape();
    let mut rng = Prng::new(seed);
    for sample in 0..samples {
        let image = synthetic_image(c, h, w, rng.next_u64());
        let trace = model.forward_trace(&image, None, ScalarKind::Logit)?;
        let pt = trace.point(&point)?;
        let class = trace.class_index;
        let mut idx = rng.next_index(pt.gradient.len());
        while pt.gradient.data()[idx] == 0.0 {
            idx = rng.next_index(pt.gradient.len());
        }
        let g = pt.gradient.data()[idx];
        let a0 = pt.activation.data()[idx];
        for kind in [SmoothKind::Exp, SmoothKind::Softmax] {
            let smooth = SmoothFn::new(kind, &trace.logits, class)?;
            let y = |a: f64| {
                let mut act = pt.activation.clone();
                act.data_mut()[idx] = a;
                let s = model.logits_from(&point, &act).expect("valid activation").data()[class];
                smooth.eval(s).value
            };
            let d = analytic(kind, &trace.logits, class, fault)?;
            for order in 1..=3 {
                let exact = d[order - 1] * g.powi(order as i32);
                let fd = richardson(&y, a0, order, LOGIT_STEP / g.abs());
                let tol = if order == 3 { 1e-3 } else { 1e-4 };
                suite.check(|| format!("sample {sample} {kind:?} order {order}"), relative_error(exact, fd), tol);
            }
        }
    }
    Ok(suite)
}

/// Compares the softmax derivative polynomials with finite differences of
/// `S^c ↦ Y^c` at random logit vectors, plus the spot value at `Y = 0.5`.
pub fn softmax_polynomials(samples: usize, seed: u64, fault: Fault) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("softmax-polynomials", 1e-5);
    let mut rng = Prng::new(seed);
    for sample in 0..samples {
        let classes = 2 + rng.next_index(9);
        let logits = Tensor::vector((0..classes).map(|_| 2.0 * rng.next_gaussian()).collect());
        let class = rng.next_index(classes);
        let smooth = SmoothFn::new(SmoothKind::Softmax, &logits, class)?;
        let y = |s: f64| smooth.eval(s).value;
        let d = analytic(SmoothKind::Softmax, &logits, class, fault)?;
        let s0 = logits.data()[class];
        for order in 1..=3 {
            let fd = richardson(&y, s0, order, LOGIT_STEP);
            suite.check(
                || format!("sample {sample} order {order}"),
                relative_error(d[order - 1], fd),
                1e-5,
            );
        }
    }
    let d = analytic(SmoothKind::Softmax, &Tensor::vector(vec![0.0, 0.0]), 0, fault)?;
    for (got, want, name) in [(d[0], 0.25, "f′"), (d[1], 0.0, "f″"), (d[2], -0.125, "f‴")] {
        suite.spot_check(|| format!("spot value {name} at Y = 0.5"), (got - want).abs(), 1e-15);
    }
    Ok(suite)
}

fn random_distribution(rng: &mut Prng, classes: usize) -> ProbDist {
    let raw: Vec<f64> = (0..classes).map(|_| rng.next_f64() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    ProbDist::new(raw.into_iter().map(|v| v / total).collect()).expect("normalized")
}

/// Checks the divergence against the mean of the two KL directions.
pub fn mdd_symmetric_kl(samples: usize, seed: u64) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("mdd-symmetric-kl", 1e-12);
    let mut rng = Prng::new(seed);
    for sample in 0..samples {
        let classes = 2 + rng.next_index(9);
        let x = random_distribution(&mut rng, classes);
        let y = random_distribution(&mut rng, classes);
        let sym = (kl_divergence(&x, &y)? + kl_divergence(&y, &x)?) / 2.0;
        suite.check(|| format!("pair {sample}"), (mdd(&x, &y)? - sym).abs(), 1e-12);
        suite.spot_check(|| format!("self pair {sample}"), mdd(&x, &x)?.abs(), f64::MIN_POSITIVE);
    }
    let worked = mdd(&ProbDist::new(vec![0.7, 0.3])?, &ProbDist::new(vec![0.5, 0.5])?)?;
    suite.spot_check(|| "worked value".into(), (worked - 0.084730).abs(), 1e-6);
    Ok(suite)
}

/// Runs all three suites.
pub fn run_all(model: &Model, seed: u64, fault: Fault) -> Result<VerifyReport> {
    let suites = vec![
        derivative_identity(model, 8, seed, fault)?,
        softmax_polynomials(100, seed, fault)?,
        mdd_symmetric_kl(1000, seed)?,
    ];
    Ok(VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}
