//! Central finite-difference checks of analytic gradients.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{conv1d, no_grad, scaled_dot_product_attention, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{ccc_loss, cross_entropy};
use crate::weighting::{druw_loss, dwa_loss, rruw_loss, DwaState, UncertaintyState};

/// Perturbation used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between the backward gradient of the scalar
/// `f(inputs)` and central differences, over every element of every
/// input that requires a gradient.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    inputs.iter().for_each(Tensor::zero_grad);
    let root = f(inputs)?;
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    root.backward()?;
    let mut worst = 0.0f64;
    for x in inputs.iter().filter(|x| x.requires_grad()) {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let base = x.to_vec();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + FD_STEP;
            x.assign(&probe)?;
            let up = no_grad(|| f(inputs))?.item();
            probe[i] = base[i] - FD_STEP;
            x.assign(&probe)?;
            let down = no_grad(|| f(inputs))?.item();
            x.assign(&base)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        x.zero_grad();
    }
    Ok(worst)
}

/// Outcome of one row of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::leaf(uniform(rng, shape, lo, hi), shape).expect("valid shape")
}

/// Values bounded away from zero, for kinked ops.
fn leaf_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let data = (0..shape.iter().product())
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::leaf(data, shape).expect("valid shape")
}

/// Fixed random projection turning any output into a scalar.
fn project(out: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(uniform(&mut rng, out.shape(), -1.0, 1.0), out.shape())?;
    Ok(out.mul(&w)?.sum_all())
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn case<F, G>(make: G, f: F) -> Case
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + Clone + 'static,
{
    Box::new(move |rng| {
        let inputs = make(rng);
        let seed = rng.gen();
        let f = f.clone();
        check(&inputs, move |x| project(f(x)?, seed))
    })
}

fn uncertainty_inputs(rng: &mut ChaCha8Rng, tasks: usize, phi: f64) -> Vec<Tensor<f64>> {
    // keep away from the |·| kinks at log α = 0 and Σ|log α| = φ
    let log_alpha = loop {
        let v: Vec<f64> = (0..tasks)
            .map(|_| {
                let m = rng.gen_range(0.05..0.8);
                if rng.gen_bool(0.3) { -m * 0.5 } else { m }
            })
            .collect();
        if (v.iter().map(|s: &f64| s.abs()).sum::<f64>() - phi).abs() > 0.05 {
            break v;
        }
    };
    vec![
        Tensor::leaf(log_alpha, &[tasks]).expect("valid"),
        leaf(rng, &[tasks], 0.1, 2.0),
    ]
}

fn split_losses(t: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    (0..t.numel()).map(|k| t.narrow(0, k, 1)).collect()
}

fn random_dwa(rng: &mut ChaCha8Rng, tasks: usize) -> DwaState {
    let mut d = DwaState::new(tasks, 2.0).expect("valid");
    d.record_epoch(&uniform(rng, &[tasks], 0.2, 2.0)).expect("valid");
    d.record_epoch(&uniform(rng, &[tasks], 0.2, 2.0)).expect("valid");
    d
}

/// Every differentiable operation and both loss families.
fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", case(|r| vec![leaf(r, &[3, 4], -1.0, 1.0), leaf(r, &[4], -1.0, 1.0)], |x| x[0].add(&x[1]))),
        ("sub", case(|r| vec![leaf(r, &[3, 1], -1.0, 1.0), leaf(r, &[1, 4], -1.0, 1.0)], |x| x[0].sub(&x[1]))),
        ("mul", case(|r| vec![leaf(r, &[2, 3, 4], -1.0, 1.0), leaf(r, &[3, 1], -1.0, 1.0)], |x| x[0].mul(&x[1]))),
        ("div", case(|r| vec![leaf(r, &[3, 4], -1.0, 1.0), leaf(r, &[3, 4], 0.5, 2.0)], |x| x[0].div(&x[1]))),
        ("matmul", case(|r| vec![leaf(r, &[3, 5], -1.0, 1.0), leaf(r, &[5, 2], -1.0, 1.0)], |x| x[0].matmul(&x[1]))),
        ("concat", case(|r| vec![leaf(r, &[3, 4], -1.0, 1.0), leaf(r, &[3, 2], -1.0, 1.0)], |x| Tensor::concat(&[&x[0], &x[1]], 1))),
        ("narrow", case(|r| vec![leaf(r, &[4, 5], -1.0, 1.0)], |x| x[0].narrow(1, 1, 3))),
        ("select_rows", case(|r| vec![leaf(r, &[4, 3], -1.0, 1.0)], |x| x[0].select_rows(&[2, 0, 2, 3]))),
        ("reshape", case(|r| vec![leaf(r, &[2, 6], -1.0, 1.0)], |x| x[0].reshape(&[3, 4]))),
        ("sum", case(|r| vec![leaf(r, &[3, 4, 2], -1.0, 1.0)], |x| x[0].sum(1, false))),
        ("mean", case(|r| vec![leaf(r, &[3, 4, 2], -1.0, 1.0)], |x| x[0].mean(2, true))),
        ("variance", case(|r| vec![leaf(r, &[5, 3], -1.0, 1.0)], |x| x[0].variance(0, false))),
        ("exp", case(|r| vec![leaf(r, &[3, 4], -2.0, 2.0)], |x| Ok(x[0].exp()))),
        ("log", case(|r| vec![leaf(r, &[3, 4], 0.2, 3.0)], |x| x[0].log())),
        ("abs", case(|r| vec![leaf_off_zero(r, &[3, 4])], |x| Ok(x[0].abs()))),
        ("relu", case(|r| vec![leaf_off_zero(r, &[3, 4])], |x| Ok(x[0].relu()))),
        ("square", case(|r| vec![leaf(r, &[3, 4], -2.0, 2.0)], |x| Ok(x[0].square()))),
        ("sqrt", case(|r| vec![leaf(r, &[3, 4], 0.2, 3.0)], |x| x[0].sqrt())),
        ("softmax", case(|r| vec![leaf(r, &[3, 5], -2.0, 2.0)], |x| x[0].softmax(1))),
        ("log_softmax", case(|r| vec![leaf(r, &[4, 3], -2.0, 2.0)], |x| x[0].log_softmax(0))),
        ("layer_norm", case(|r| vec![leaf(r, &[3, 6], -2.0, 2.0)], |x| x[0].layer_norm(1e-6))),
        (
            "attention",
            case(
                |r| vec![leaf(r, &[6, 4], -1.0, 1.0), leaf(r, &[8, 4], -1.0, 1.0), leaf(r, &[8, 4], -1.0, 1.0)],
                |x| Ok(scaled_dot_product_attention(&x[0], &x[1], &x[2], 2, 2)?.0),
            ),
        ),
        (
            "conv1d",
            case(|r| vec![leaf(r, &[2, 9, 2], -1.0, 1.0), leaf(r, &[6, 3], -1.0, 1.0)], |x| conv1d(&x[0], &x[1], 3, 2, 1)),
        ),
        (
            "ccc_loss",
            case(|r| vec![leaf(r, &[8, 10], 0.0, 1.0), Tensor::new(uniform(r, &[8, 10], 0.0, 1.0), &[8, 10]).expect("valid")], |x| {
                ccc_loss(&x[0], &x[1])
            }),
        ),
        (
            "cross_entropy",
            Box::new(|r: &mut ChaCha8Rng| {
                let logits = leaf(r, &[6, 8], -3.0, 3.0);
                let labels: Vec<usize> = (0..6).map(|_| r.gen_range(0..8)).collect();
                check(&[logits], move |x| cross_entropy(&x[0], &labels))
            }),
        ),
        (
            "dwa_loss",
            Box::new(|r: &mut ChaCha8Rng| {
                let d = random_dwa(r, 4);
                let l = leaf(r, &[4], 0.1, 2.0);
                check(&[l], move |x| dwa_loss(&split_losses(&x[0])?, &d))
            }),
        ),
        (
            "rruw_loss",
            Box::new(|r: &mut ChaCha8Rng| {
                let inputs = uncertainty_inputs(r, 4, 1.0);
                check(&inputs, |x| {
                    let u = UncertaintyState::from_log_alpha(x[0].clone(), 1.0)?;
                    rruw_loss(&split_losses(&x[1])?, &u)
                })
            }),
        ),
        (
            "druw_loss",
            Box::new(|r: &mut ChaCha8Rng| {
                let inputs = uncertainty_inputs(r, 4, 1.0);
                let d = random_dwa(r, 4);
                check(&inputs, move |x| {
                    let u = UncertaintyState::from_log_alpha(x[0].clone(), 1.0)?;
                    druw_loss(&split_losses(&x[1])?, &u, &d, 1.0)
                })
            }),
        ),
    ]
}

/// Runs every case `trials` times on fresh random inputs.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|(name, case)| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                worst = worst.max(case(&mut rng)?);
            }
            Ok(GradCheckRow { name, trials, max_rel_err: worst })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert!(relative_error(1.0, 1.001) > REL_TOL);
        assert!(relative_error(1e-11, 0.0) < REL_TOL);
        assert!(relative_error(1e-8, 0.0) > REL_TOL);
    }

    #[test]
    fn quadratic_passes() {
        let w = Tensor::leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = check(&[w], |x| Ok(x[0].mul(&x[0])?.sum_all())).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        // detach hides one factor of w·w from the backward pass
        let w = Tensor::leaf(vec![0.3], &[1]).unwrap();
        let err = check(&[w], |x| Ok(x[0].detach().mul(&x[0])?.sum_all())).unwrap();
        // analytic 0.3, numeric 0.6
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn suite_smoke() {
        for row in run_suite(3, 11).unwrap() {
            eprintln!("{:<14} {:.3e}", row.name, row.max_rel_err);
            assert!(row.passed(), "{row:?}");
        }
    }
}
