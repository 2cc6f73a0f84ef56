//! Central finite-difference gradient checks.

use st3d::tensor::{Tape, Var};
use st3d::{Rng, Tensor};

pub const STEP: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_TOL + REL_TOL * numeric.abs()
}

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst: f64,
}

impl Report {
    pub fn record(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        self.worst = self.worst.max(err / (ABS_TOL + REL_TOL * numeric.abs()));
        if !within_tolerance(analytic, numeric) {
            self.failures.push(format!("{what}: analytic {analytic:.6} vs numeric {numeric:.6}"));
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a tape. At most
/// `max_per_input` elements of each input are perturbed (all when smaller).
pub fn check<F>(name: &str, inputs: &[Tensor], max_per_input: usize, rng: &mut Rng, f: F) -> Report
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor], with_grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = with_grad;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs, true);
    tape.backward(out).unwrap();
    let grads: Vec<Vec<f32>> = vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();

    let mut report = Report::default();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.below(n)).collect()
        };
        for i in picks {
            let value = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut()[i] = (f64::from(input.data()[i]) + delta) as f32;
                let (tape, _, out) = eval(&perturbed, false);
                f64::from(tape.value(out).item().unwrap())
            };
            let numeric = (value(STEP) - value(-STEP)) / (2.0 * STEP);
            report.record(&format!("{name}[input {k}][{i}]"), f64::from(grads[k][i]), numeric);
        }
    }
    report
}

/// Reduces any tensor to a scalar through a fixed random projection so
/// every output element carries a distinct weight.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let f = shape.per_sample();
    let mut rng = Rng::new(seed);
    let w = super::random_tensor(st3d::Shape::matrix(3, f), 1.0, &mut rng);
    let b = super::random_tensor(st3d::Shape::new(3, 1, 1, 1, 1), 1.0, &mut rng);
    let w = tape.leaf(w);
    let b = tape.leaf(b);
    let y = tape.linear(x, w, b).unwrap();
    tape.sum(y)
}

/// Spacing and pair count for [`fitted_slope`] on whole networks.
pub const NET_SPACING: f32 = 5e-5;
pub const NET_PAIRS: usize = 6;

/// Least-squares slope through symmetric pairs `f(x0 ± k·spacing)`,
/// `k = 1..=pairs`. Deep ReLU/max-pool networks at f32 sit between two error
/// sources: activation kinks crossed by wide steps and rounding noise in
/// narrow ones; averaging several narrow pairs keeps both small. The realised
/// step (after f32 rounding of `x0 ± d`) is used, not the nominal one.
pub fn fitted_slope(x0: f32, spacing: f32, pairs: usize, mut f: impl FnMut(f32) -> f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..=pairs {
        let d = spacing * k as f32;
        let (hi, lo) = (x0 + d, x0 - d);
        let dx = f64::from(hi) - f64::from(lo);
        let df = f(hi) - f(lo);
        num += dx * df;
        den += dx * dx;
    }
    num / den
}
