//! Dense Levenberg–Marquardt for small problems (calibration, single-pose refinement).
//!
//! Parameters live on a manifold described by the problem: the Jacobian is taken with
//! respect to a local increment and [`LeastSquares::retract`] applies that increment.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquares {
    type State: Clone;

    fn num_increments(&self) -> usize;

    /// Stacked residuals, or `None` when the state is outside the model domain.
    fn residuals(&self, state: &Self::State) -> Option<DVector<f64>>;

    fn jacobian(&self, state: &Self::State) -> Option<DMatrix<f64>>;

    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Clone, Debug)]
pub struct LmSettings {
    pub initial_lambda: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    /// Absolute cost below which the fit is considered exact.
    pub cost_floor: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-3,
            max_iterations: 200,
            relative_tolerance: 1e-10,
            cost_floor: 1e-26,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmOutcome<S> {
    pub state: S,
    /// Half the sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn half_sq(r: &DVector<f64>) -> f64 {
    0.5 * r.norm_squared()
}

/// Runs LM from `initial`. Returns `None` if the initial state is not evaluable.
pub fn minimize<P: LeastSquares>(problem: &P, initial: P::State, settings: &LmSettings) -> Option<LmOutcome<P::State>> {
    let mut state = initial;
    let mut residuals = problem.residuals(&state)?;
    let mut cost = half_sq(&residuals);
    let mut lambda = settings.initial_lambda;
    let mut history = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    let n = problem.num_increments();

    while iterations < settings.max_iterations {
        if cost <= settings.cost_floor {
            converged = true;
            break;
        }
        iterations += 1;
        let jac = problem.jacobian(&state)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &residuals;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut h = jtj.clone();
            for i in 0..n {
                h[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = h.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&jtr);
            let candidate = problem.retract(&state, &delta);
            match problem.residuals(&candidate) {
                Some(r) if half_sq(&r).is_finite() && half_sq(&r) <= cost => {
                    let new_cost = half_sq(&r);
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    state = candidate;
                    residuals = r;
                    cost = new_cost;
                    history.push(cost);
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if rel < settings.relative_tolerance {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No step reduces the cost any further: a (numerical) minimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Some(LmOutcome {
        state,
        cost,
        iterations,
        converged,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fit y = a·exp(b·x).
    struct ExpFit {
        xs: Vec<f64>,
        ys: Vec<f64>,
    }

    impl LeastSquares for ExpFit {
        type State = [f64; 2];
        fn num_increments(&self) -> usize {
            2
        }
        fn residuals(&self, s: &[f64; 2]) -> Option<DVector<f64>> {
            Some(DVector::from_iterator(
                self.xs.len(),
                self.xs.iter().zip(&self.ys).map(|(x, y)| s[0] * (s[1] * x).exp() - y),
            ))
        }
        fn jacobian(&self, s: &[f64; 2]) -> Option<DMatrix<f64>> {
            let mut j = DMatrix::zeros(self.xs.len(), 2);
            for (i, x) in self.xs.iter().enumerate() {
                j[(i, 0)] = (s[1] * x).exp();
                j[(i, 1)] = s[0] * x * (s[1] * x).exp();
            }
            Some(j)
        }
        fn retract(&self, s: &[f64; 2], d: &DVector<f64>) -> [f64; 2] {
            [s[0] + d[0], s[1] + d[1]]
        }
    }

    #[test]
    fn recovers_exponential_parameters() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let ys = xs.iter().map(|x| 2.5 * (-1.3 * x).exp()).collect();
        let out = minimize(&ExpFit { xs, ys }, [1.0, 0.0], &LmSettings::default()).unwrap();
        assert!(out.converged);
        assert!((out.state[0] - 2.5).abs() < 1e-8);
        assert!((out.state[1] + 1.3).abs() < 1e-8);
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }
}
