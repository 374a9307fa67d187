//! Box-constrained first-order solver shared by the controller and the
//! estimator.
//!
//! Projected gradient descent with Barzilai–Borwein trial steps and Armijo
//! backtracking along the projection arc. Only decreasing iterates are
//! accepted, so the returned point is never worse than the (projected) start.
//! Termination uses the norm of the unit-step gradient map
//! `x − P(x − ∇f(x))`, which vanishes exactly at KKT points of the box.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A smooth function of a flat decision vector.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f(x)` into `grad` and returns `f(x)`.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Gradient-map norm at which the solve counts as converged.
    pub tolerance: f64,
    pub sufficient_decrease: f64,
    pub contraction: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-4,
            sufficient_decrease: 1e-4,
            contraction: 0.5,
            max_backtracks: 50,
            initial_step: 1.0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0)
            || !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0)
            || !(self.contraction > 0.0 && self.contraction < 1.0)
            || !(self.initial_step > 0.0)
        {
            return Err(Error::Config("invalid solver settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_map_norm: f64,
    pub log: Vec<IterationRecord>,
}

/// Writes the iteration log as CSV.
pub fn write_iteration_log(log: &[IterationRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["iteration", "objective", "gradient_norm", "step_size"])
        .map_err(|e| Error::format(path, e))?;
    for r in log {
        w.write_record([
            r.iteration.to_string(),
            r.objective.to_string(),
            r.gradient_norm.to_string(),
            r.step_size.to_string(),
        ])
        .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lo[i]).min(hi[i]);
    }
}

fn gradient_map_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (xi, gi))| {
            let d = xi - (xi - gi).max(lo[i]).min(hi[i]);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimizes `objective` over the box `[lo, hi]` from `start` (projected first).
pub fn minimize_box<O: Objective + ?Sized>(
    objective: &O,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    settings: &SolverSettings,
) -> Result<SolveResult> {
    settings.validate()?;
    let n = start.len();
    check_dim("solver lower bounds", n, lo.len())?;
    check_dim("solver upper bounds", n, hi.len())?;
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidInput("solver box has lo > hi".into()));
    }
    let mut x = start.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut f = objective.value_and_gradient(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver(format!("objective is not finite at the starting point ({f})")));
    }

    let mut step = settings.initial_step;
    let mut log = Vec::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    let mut gm = gradient_map_norm(&x, &g, lo, hi);
    log.push(IterationRecord {
        iteration: 0,
        objective: f,
        gradient_norm: gm,
        step_size: 0.0,
    });

    while iterations < settings.max_iterations {
        if gm <= settings.tolerance {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut trial = step;
        for _ in 0..=settings.max_backtracks {
            for i in 0..n {
                x_new[i] = x[i] - trial * g[i];
            }
            project(&mut x_new, lo, hi);
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            if decrease < 0.0 {
                let f_trial = objective.value(&x_new);
                if f_trial.is_finite() && f_trial <= f + settings.sufficient_decrease * decrease {
                    accepted = true;
                    break;
                }
            }
            trial *= settings.contraction;
        }
        if !accepted {
            // no descent left at machine precision
            break;
        }
        iterations += 1;
        let f_new = objective.value_and_gradient(&x_new, &mut g_new);
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            break;
        }
        // Barzilai–Borwein trial step for the next iteration
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = x_new[i] - x[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (trial * 2.0).min(1e12) };
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        gm = gradient_map_norm(&x, &g, lo, hi);
        log.push(IterationRecord {
            iteration: iterations,
            objective: f,
            gradient_norm: gm,
            step_size: trial,
        });
    }
    if !converged && gm <= settings.tolerance {
        converged = true;
    }
    Ok(SolveResult {
        x,
        value: f,
        iterations,
        converged,
        gradient_map_norm: gm,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `Σ aᵢ (xᵢ − cᵢ)²`
    struct Quadratic {
        a: Vec<f64>,
        c: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.a).zip(&self.c).map(|((x, a), c)| a * (x - c).powi(2)).sum()
        }

        fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            for i in 0..x.len() {
                grad[i] = 2.0 * self.a[i] * (x[i] - self.c[i]);
            }
            self.value(x)
        }
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }

        fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            grad[1] = 200.0 * (x[1] - x[0] * x[0]);
            self.value(x)
        }
    }

    fn tight() -> SolverSettings {
        SolverSettings {
            max_iterations: 5000,
            tolerance: 1e-10,
            ..SolverSettings::default()
        }
    }

    #[test]
    fn scalar_quadratic_matches_clipped_minimizer() {
        for (c, expected) in [(0.3, 0.3), (2.0, 1.0), (-4.0, -0.5)] {
            let q = Quadratic {
                a: vec![3.0],
                c: vec![c],
            };
            let r = minimize_box(&q, &[0.0], &[-0.5], &[1.0], &tight()).unwrap();
            assert!((r.x[0] - expected).abs() < 1e-8, "{c}: {}", r.x[0]);
            assert!(r.converged);
        }
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let q = Quadratic {
            a: vec![1.0, 1.0],
            c: vec![0.2, 0.4],
        };
        let r = minimize_box(&q, &[0.2, 0.4], &[0.0; 2], &[1.0; 2], &SolverSettings::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x, vec![0.2, 0.4]);
    }

    #[test]
    fn rosenbrock_inside_box() {
        let r = minimize_box(&Rosenbrock, &[-1.0, 1.5], &[-2.0, -2.0], &[2.0, 2.0], &tight()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        // box excluding the unconstrained minimum
        let r = minimize_box(&Rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[0.5, 2.0], &tight()).unwrap();
        assert!((r.x[0] - 0.5).abs() < 1e-8 && (r.x[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        struct Bad;
        impl Objective for Bad {
            fn value(&self, _: &[f64]) -> f64 {
                f64::NAN
            }
            fn value_and_gradient(&self, _: &[f64], _: &mut [f64]) -> f64 {
                f64::NAN
            }
        }
        assert!(matches!(
            minimize_box(&Bad, &[0.0], &[0.0], &[1.0], &SolverSettings::default()),
            Err(Error::Solver(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let s = SolverSettings {
            max_iterations: 2,
            tolerance: 0.0,
            ..SolverSettings::default()
        };
        let r = minimize_box(&Rosenbrock, &[-1.0, 1.5], &[-2.0; 2], &[2.0; 2], &s).unwrap();
        assert!(!r.converged);
        assert!(r.iterations <= 2);
    }

    proptest! {
        #[test]
        fn iterates_are_feasible_and_monotone(
            a in prop::collection::vec(0.1f64..10.0, 3),
            c in prop::collection::vec(-3f64..3.0, 3),
            x0 in prop::collection::vec(-5f64..5.0, 3),
        ) {
            let q = Quadratic { a, c: c.clone() };
            let (lo, hi) = (vec![-1.0; 3], vec![1.0; 3]);
            let r = minimize_box(&q, &x0, &lo, &hi, &tight()).unwrap();
            prop_assert!(r.x.iter().all(|v| (-1.0..=1.0).contains(v)));
            for w in r.log.windows(2) {
                prop_assert!(w[1].objective <= w[0].objective);
            }
            for i in 0..3 {
                prop_assert!((r.x[i] - c[i].clamp(-1.0, 1.0)).abs() < 1e-8);
            }
        }
    }
}
