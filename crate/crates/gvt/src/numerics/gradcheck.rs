//! Central-difference verification of analytic gradients.
//!
//! The checker evaluates a tensor function twice per perturbed component and
//! compares `(f(x+h) - f(x-h)) / 2h` against the tape gradient. Non-scalar
//! outputs are reduced through a fixed random projection so the full
//! Jacobian action is exercised. Relative error uses a unit floor:
//! `|a - n| / max(1, |a|, |n|)` — an absolute criterion for tiny gradients,
//! relative for large ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many components per input (seeded subset); `None`
    /// checks every component.
    pub max_components: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-4,
            tol: 1e-4,
            max_components: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdComponent {
    pub input: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<FdComponent>,
    pub failures: Vec<FdComponent>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst.as_ref().map(|c| c.rel_err).unwrap_or(0.0)
    }

    fn record(&mut self, c: FdComponent) {
        self.checked += 1;
        if c.rel_err > self.tol {
            self.failures.push(c.clone());
        }
        if self.worst.as_ref().map(|wc| c.rel_err > wc.rel_err).unwrap_or(true) {
            self.worst = Some(c);
        }
    }

    /// Fold another report in (used when an op is checked on many random
    /// instances).
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        if let Some(c) = other.worst {
            if self.worst.as_ref().map(|wc| c.rel_err > wc.rel_err).unwrap_or(true) {
                self.worst = Some(c);
            }
        }
    }
}

/// Compare the tape gradient of `f` against central differences at the
/// given inputs. `f` must be deterministic in its inputs.
pub fn finite_diff_check<F>(f: &F, inputs: &[(Vec<f64>, Vec<usize>)], opts: &FdOptions) -> FdReport
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect();
    let out = f(&tape, &leaves);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (out.numel() as u64).wrapping_mul(0x9e37));
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wt = tape.constant(w.clone(), out.shape().to_vec());
    let loss = out.mul(&wt).sum_all();
    let grads = tape
        .backward(&loss)
        .expect("finite_diff_check: forward pass poisoned");
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_dense(l)).collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = vals
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| tape.leaf(d.clone(), s.clone(), false))
            .collect();
        let out = f(&tape, &leaves);
        out.data().iter().zip(&w).map(|(o, wi)| o * wi).sum()
    };

    let mut report = FdReport {
        tol: opts.tol,
        ..FdReport::default()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    for (i, (data, _)) in inputs.iter().enumerate() {
        let mut comps: Vec<usize> = (0..data.len()).collect();
        if let Some(maxc) = opts.max_components {
            if comps.len() > maxc {
                // Fisher-Yates prefix gives a seeded subset without replacement.
                for j in 0..maxc {
                    let pick = rng.gen_range(j..comps.len());
                    comps.swap(j, pick);
                }
                comps.truncate(maxc);
            }
        }
        let mut vals = base.clone();
        for &c in &comps {
            vals[i][c] = data[c] + opts.eps;
            let fp = eval(&vals);
            vals[i][c] = data[c] - opts.eps;
            let fm = eval(&vals);
            vals[i][c] = data[c];
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[i][c];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.record(FdComponent {
                input: i,
                component: c,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    report
}

// ── built-in op registry ─────────────────────────────────────────────

pub type CheckFn = fn(&mut ChaCha8Rng, &FdOptions) -> FdReport;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random values bounded away from zero (for ops with a kink at 0).
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

macro_rules! unary_check {
    ($fname:ident, $method:ident, $lo:expr, $hi:expr) => {
        fn $fname(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
            let data = rand_vec(rng, 6, $lo, $hi);
            finite_diff_check(
                &|_t: &Tape, xs: &[Tensor]| xs[0].$method(),
                &[(data, vec![2, 3])],
                opts,
            )
        }
    };
}

unary_check!(check_exp, exp, -2.0, 2.0);
unary_check!(check_sigmoid, sigmoid, -4.0, 4.0);
unary_check!(check_tanh, tanh, -3.0, 3.0);
unary_check!(check_gelu, gelu, -3.0, 3.0);
unary_check!(check_softplus, softplus, -4.0, 4.0);
unary_check!(check_softmax, softmax_last, -2.0, 2.0);
unary_check!(check_sum_all, sum_all, -2.0, 2.0);
unary_check!(check_mean_all, mean_all, -2.0, 2.0);

fn check_relu(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let data = rand_vec_off_zero(rng, 6, 0.05);
    finite_diff_check(&|_t: &Tape, xs: &[Tensor]| xs[0].relu(), &[(data, vec![6])], opts)
}

fn check_wrap_periodic(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    // keep inputs away from wrap boundaries: FD straddling a branch of the
    // sawtooth does not measure the identity surrogate
    let data: Vec<f64> = (0..6)
        .map(|_| {
            let base = rng.gen_range(0.05..(std::f64::consts::PI - 0.05));
            base + std::f64::consts::PI * rng.gen_range(-3i32..4) as f64
        })
        .collect();
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].wrap_periodic(std::f64::consts::PI),
        &[(data, vec![6])],
        opts,
    )
}

fn check_add(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 6, -2.0, 2.0);
    let b = rand_vec(rng, 6, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].add(&xs[1]),
        &[(a, vec![2, 3]), (b, vec![2, 3])],
        opts,
    )
}

fn check_sub(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 6, -2.0, 2.0);
    let b = rand_vec(rng, 6, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].sub(&xs[1]),
        &[(a, vec![2, 3]), (b, vec![2, 3])],
        opts,
    )
}

fn check_mul(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 6, -2.0, 2.0);
    let b = rand_vec(rng, 6, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].mul(&xs[1]),
        &[(a, vec![2, 3]), (b, vec![2, 3])],
        opts,
    )
}

fn check_scale(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 4, -2.0, 2.0);
    let k = rng.gen_range(-3.0..3.0);
    finite_diff_check(
        &move |_t: &Tape, xs: &[Tensor]| xs[0].scale(k),
        &[(a, vec![4])],
        opts,
    )
}

fn check_add_scalar(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 4, -2.0, 2.0);
    let k = rng.gen_range(-3.0..3.0);
    finite_diff_check(
        &move |_t: &Tape, xs: &[Tensor]| xs[0].add_scalar(k),
        &[(a, vec![4])],
        opts,
    )
}

fn check_reshape(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 12, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].reshape(&[3, 4]).sigmoid(),
        &[(a, vec![2, 6])],
        opts,
    )
}

fn check_permute(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 24, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].permute(&[2, 0, 1]).tanh(),
        &[(a, vec![2, 3, 4])],
        opts,
    )
}

fn check_narrow(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 24, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].narrow(1, 1, 2).sigmoid(),
        &[(a, vec![2, 4, 3])],
        opts,
    )
}

fn check_select_rows(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 12, -2.0, 2.0);
    // repeated index exercises accumulation
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].select_rows(&[2, 0, 2]).tanh(),
        &[(a, vec![4, 3])],
        opts,
    )
}

fn check_repeat_leading(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 6, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].repeat_leading(3).sigmoid(),
        &[(a, vec![2, 3])],
        opts,
    )
}

fn check_sum_axis(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 24, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].sum_axis(1).tanh(),
        &[(a, vec![2, 4, 3])],
        opts,
    )
}

fn check_add_bias(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 12, -2.0, 2.0);
    let b = rand_vec(rng, 3, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].add_bias(&xs[1]),
        &[(a, vec![4, 3]), (b, vec![3])],
        opts,
    )
}

fn check_scale_rows(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 24, -2.0, 2.0);
    let s = rand_vec(rng, 6, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].scale_rows(&xs[1]),
        &[(a, vec![2, 3, 4]), (s, vec![2, 3])],
        opts,
    )
}

fn check_matmul(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let x = rand_vec(rng, 8, -2.0, 2.0);
    let w = rand_vec(rng, 12, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].matmul(&xs[1]),
        &[(x, vec![2, 4]), (w, vec![4, 3])],
        opts,
    )
}

fn check_bmm(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 12, -2.0, 2.0);
    let b = rand_vec(rng, 16, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| xs[0].bmm(&xs[1]),
        &[(a, vec![2, 3, 2]), (b, vec![2, 2, 4])],
        opts,
    )
}

fn check_layer_norm(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let x = rand_vec(rng, 12, -2.0, 2.0);
    let g = rand_vec(rng, 4, 0.5, 1.5);
    let b = rand_vec(rng, 4, -0.5, 0.5);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| super::ops::layer_norm(&xs[0], &xs[1], &xs[2], 1e-5),
        &[(x, vec![3, 4]), (g, vec![4]), (b, vec![4])],
        opts,
    )
}

fn check_concat_rows(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let a = rand_vec(rng, 6, -2.0, 2.0);
    let b = rand_vec(rng, 9, -2.0, 2.0);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| super::ops::concat_rows(&[&xs[0], &xs[1]]).sigmoid(),
        &[(a, vec![2, 3]), (b, vec![3, 3])],
        opts,
    )
}

fn check_conv2d(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let x = rand_vec(rng, 4 * 4 * 2, -1.0, 1.0);
    let w = rand_vec(rng, 3 * 3 * 2 * 2, -0.5, 0.5);
    let b = rand_vec(rng, 2, -0.5, 0.5);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| super::ops::conv2d(&xs[0], &xs[1], &xs[2], 2, 1),
        &[
            (x, vec![4, 4, 2]),
            (w, vec![3, 3, 2, 2]),
            (b, vec![2]),
        ],
        opts,
    )
}

fn check_conv2d_transpose(rng: &mut ChaCha8Rng, opts: &FdOptions) -> FdReport {
    let x = rand_vec(rng, 3 * 3 * 2, -1.0, 1.0);
    let w = rand_vec(rng, 4 * 4 * 2 * 2, -0.5, 0.5);
    let b = rand_vec(rng, 2, -0.5, 0.5);
    finite_diff_check(
        &|_t: &Tape, xs: &[Tensor]| super::ops::conv2d_transpose(&xs[0], &xs[1], &xs[2], 2, 1),
        &[
            (x, vec![3, 3, 2]),
            (w, vec![4, 4, 2, 2]),
            (b, vec![2]),
        ],
        opts,
    )
}

/// Every differentiable built-in op and its checker. Straight-through ops
/// (`hard_gate`, `detach`) are excluded: their surrogate gradients are
/// deliberately not the derivative of the forward map.
pub fn builtin_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("add", check_add),
        ("sub", check_sub),
        ("mul", check_mul),
        ("scale", check_scale),
        ("add_scalar", check_add_scalar),
        ("exp", check_exp),
        ("sigmoid", check_sigmoid),
        ("tanh", check_tanh),
        ("relu", check_relu),
        ("gelu", check_gelu),
        ("softplus", check_softplus),
        ("wrap_periodic", check_wrap_periodic),
        ("reshape", check_reshape),
        ("permute", check_permute),
        ("narrow", check_narrow),
        ("select_rows", check_select_rows),
        ("repeat_leading", check_repeat_leading),
        ("sum_all", check_sum_all),
        ("mean_all", check_mean_all),
        ("sum_axis", check_sum_axis),
        ("add_bias", check_add_bias),
        ("scale_rows", check_scale_rows),
        ("matmul", check_matmul),
        ("bmm", check_bmm),
        ("softmax_last", check_softmax),
        ("layer_norm", check_layer_norm),
        ("concat_rows", check_concat_rows),
        ("conv2d", check_conv2d),
        ("conv2d_transpose", check_conv2d_transpose),
    ]
}

/// Run every built-in check on `trials` random instances; returns
/// `(op name, merged report)` per op.
pub fn run_builtin_checks(trials: usize, opts: &FdOptions) -> Vec<(&'static str, FdReport)> {
    let mut out = Vec::new();
    for (name, check) in builtin_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
        let mut merged = FdReport {
            tol: opts.tol,
            ..FdReport::default()
        };
        for trial in 0..trials {
            let mut trial_rng =
                ChaCha8Rng::seed_from_u64(rng.gen::<u64>() ^ trial as u64);
            merged.merge(check(&mut trial_rng, opts));
        }
        out.push((name, merged));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_matches_central_difference() {
        let report = finite_diff_check(
            &|_t: &Tape, xs: &[Tensor]| xs[0].mul(&xs[0]),
            &[(vec![2.0], vec![1])],
            &FdOptions::default(),
        );
        assert!(report.pass());
        assert!(report.worst_rel_err() < 1e-6, "{}", report.worst_rel_err());
    }

    #[test]
    fn constant_op_passes_with_zero_gradients() {
        // output does not depend on the input: both gradients are zero
        let report = finite_diff_check(
            &|t: &Tape, _xs: &[Tensor]| t.constant(vec![4.0], vec![1]),
            &[(vec![1.0], vec![1])],
            &FdOptions::default(),
        );
        assert!(report.pass());
        let worst = report.worst.as_ref().unwrap();
        assert_eq!(worst.analytic, 0.0);
        assert_eq!(worst.numeric, 0.0);
    }

    /// Every registered differentiable op matches central differences with
    /// relative error <= 1e-4 at eps = 1e-4 on 100 random inputs.
    #[test]
    fn all_builtin_ops_pass_on_100_random_inputs() {
        let opts = FdOptions::default();
        for (name, report) in run_builtin_checks(100, &opts) {
            assert!(
                report.pass(),
                "op `{name}`: {} failures, worst rel err {:.3e}",
                report.failures.len(),
                report.worst_rel_err()
            );
        }
    }
}
