//! Limited-memory BFGS with projected Armijo backtracking.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const HISTORY: usize = 10;
pub const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub max_iters: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the accepted step is below this, relative to `max(1, |x|_inf)`.
    pub step_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Gradient,
    Step,
    MaxIters,
    LineSearch,
}

impl Stop {
    pub fn converged(self) -> bool {
        matches!(self, Stop::Gradient | Stop::Step)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub stop: Stop,
    /// Objective after each accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point. `project`
/// maps a trial point back onto the feasible set; the sufficient-decrease
/// test uses the projected step.
///
/// A trial point where `f` reports [`Error::NonFiniteEnergy`] counts as a
/// rejected step. Any error at the starting point is returned.
pub fn minimize<F, P>(mut f: F, x0: Vec<f64>, opts: &Options, project: P) -> Result<Outcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: Fn(&mut [f64]),
{
    let mut x = x0;
    project(&mut x);
    let (mut fx, mut g) = f(&x)?;
    let mut trace = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let n = x.len();

    for iter in 0..opts.max_iters {
        if inf_norm(&g) < opts.grad_tol {
            return Ok(Outcome { x, value: fx, iterations: iter, stop: Stop::Gradient, trace });
        }

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        if dot(&d, &g) >= 0.0 {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
        }

        let mut step = if mem.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xt);
            let moved: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            match f(&xt) {
                Ok((ft, gt)) if ft <= fx + ARMIJO_C * decrease && decrease < 0.0 => {
                    accepted = Some((xt, ft, gt, moved));
                    break;
                }
                Ok(_) | Err(Error::NonFiniteEnergy { .. }) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((xt, ft, gt, s)) = accepted else {
            return Ok(Outcome { x, value: fx, iterations: iter, stop: Stop::LineSearch, trace });
        };

        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem.len() == HISTORY {
                mem.pop_front();
            }
            mem.push_back((s.clone(), y, 1.0 / sy));
        }
        let small = inf_norm(&s) <= opts.step_tol * inf_norm(&xt).max(1.0);
        x = xt;
        fx = ft;
        g = gt;
        trace.push(fx);
        if small {
            return Ok(Outcome { x, value: fx, iterations: iter + 1, stop: Stop::Step, trace });
        }
    }
    let stop = if inf_norm(&g) < opts.grad_tol { Stop::Gradient } else { Stop::MaxIters };
    Ok(Outcome { x, value: fx, iterations: opts.max_iters, stop, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((v, g))
    }

    fn opts(max_iters: usize) -> Options {
        Options { max_iters, grad_tol: 1e-8, step_tol: 1e-14 }
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(rosenbrock, vec![-1.2, 1.0], &opts(500), |_| {}).unwrap();
        assert!(out.stop.converged(), "{:?}", out.stop);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn accepted_values_never_increase() {
        let out = minimize(rosenbrock, vec![-1.2, 1.0], &opts(500), |_| {}).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn projection_keeps_iterates_feasible() {
        // Unconstrained minimum at 5, box at 3.
        let f = |x: &[f64]| Ok(((x[0] - 5.0).powi(2), vec![2.0 * (x[0] - 5.0)]));
        let out = minimize(f, vec![0.0], &opts(100), |x| x[0] = x[0].clamp(-3.0, 3.0)).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_converges_quickly() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&diag).map(|(a, d)| d * a * a).sum();
            Ok((v, x.iter().zip(&diag).map(|(a, d)| 2.0 * d * a).collect()))
        };
        let out = minimize(f, vec![1.0; 4], &opts(100), |_| {}).unwrap();
        assert_eq!(out.stop, Stop::Gradient);
        assert!(out.iterations < 40);
    }

    #[test]
    fn non_finite_trial_points_are_rejected() {
        // Blows up past x = 2; the minimum at 1 is still reached.
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                return Err(Error::NonFiniteEnergy { frame: 0 });
            }
            Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
        };
        let out = minimize(f, vec![-50.0], &opts(100), |_| {}).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }
}
