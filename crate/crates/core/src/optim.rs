//! Derivative-free minimization: argmin's Nelder-Mead simplex wrapped in a restart loop.

use argmin::core::{CostFunction, Error, Executor, State};
use argmin::solver::neldermead::NelderMead;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evaluations: usize,
    /// Stop a run when the standard deviation of simplex values drops below this.
    pub f_tolerance: f64,
    /// Restart from the best point with a fresh simplex until a restart fails to improve.
    pub max_restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 40_000,
            f_tolerance: 1e-14,
            max_restarts: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

struct Objective<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, Error> {
        let v = (self.0)(x);
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

/// Minimize `f` starting from `start`, with initial simplex edge lengths `step`.
///
/// Non-finite objective values are treated as +inf.
pub fn nelder_mead<F>(f: F, start: &[f64], step: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(start.len(), step.len());
    let objective = Objective(f);
    let mut best = Minimum {
        x: start.to_vec(),
        value: objective.cost(&start.to_vec()).unwrap_or(f64::INFINITY),
        evaluations: 1,
    };
    for _ in 0..=opts.max_restarts {
        let before = best.value;
        let budget = opts.max_evaluations.saturating_sub(best.evaluations);
        if budget <= start.len() + 1 {
            break;
        }
        let Some(run) = simplex_run(&objective, &best.x, step, opts.f_tolerance, budget) else {
            break;
        };
        let evaluations = best.evaluations + run.evaluations;
        if run.value < best.value {
            best = Minimum { evaluations, ..run };
        } else {
            best.evaluations = evaluations;
        }
        if before - best.value <= opts.f_tolerance * before.abs().max(1.0) {
            break;
        }
    }
    best
}

fn simplex_run<F>(objective: &Objective<F>, start: &[f64], step: &[f64], tol: f64, budget: usize) -> Option<Minimum>
where
    F: Fn(&[f64]) -> f64,
{
    let mut simplex = vec![start.to_vec()];
    for (i, h) in step.iter().enumerate() {
        let mut v = start.to_vec();
        v[i] += h;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(tol).ok()?;
    // Each iteration costs at most dim + 2 evaluations (a shrink).
    let iters = (budget / (start.len() + 2)).max(1) as u64;
    let res = Executor::new(Objective(&objective.0), solver)
        .configure(|s| s.max_iters(iters))
        .run()
        .ok()?;
    let state = res.state();
    Some(Minimum {
        x: state.get_best_param()?.clone(),
        value: state.get_best_cost(),
        evaluations: state.get_func_counts().values().sum::<u64>() as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], &[0.5, 0.5], &NelderMeadOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-5, "{:?}", m);
        assert!((m.x[1] - 1.0).abs() < 1e-5, "{:?}", m);
    }

    #[test]
    fn quadratic_in_four_dims() {
        let target = [0.5, 1.0, -2.0, 0.5];
        let f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let m = nelder_mead(f, &[0.0; 4], &[1.0; 4], &NelderMeadOptions::default());
        for (a, b) in m.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn infinite_regions_are_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 2.0).powi(2) };
        let m = nelder_mead(f, &[1.0], &[0.5], &NelderMeadOptions::default());
        assert!((m.x[0] - 2.0).abs() < 1e-5);
    }
}
