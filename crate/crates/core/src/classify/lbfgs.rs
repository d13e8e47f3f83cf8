//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Curvature pairs with `s·y <= 0` are skipped, so the implicit inverse
//! Hessian stays positive definite and every search direction is a descent
//! direction. Every accepted step satisfies the Armijo condition, so the
//! objective trace is non-increasing.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct Lbfgs {
    pub memory: usize,
    /// Converged once the gradient max-norm drops below this.
    pub tol: f64,
    pub max_iters: usize,
    pub armijo: f64,
}

impl Default for Lbfgs {
    fn default() -> Self {
        Lbfgs {
            memory: 10,
            tol: 1e-6,
            max_iters: 1000,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_max_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after each accepted step.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl Lbfgs {
    pub fn minimize<F>(&self, objective: F, x0: Vec<f64>) -> Outcome
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let mut x = x0;
        let (mut fx, mut g) = objective(&x);
        let mut trace = vec![fx];
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.memory);
        let mut iterations = 0;

        while iterations < self.max_iters {
            if max_norm(&g) < self.tol {
                break;
            }
            let mut dir = self.direction(&g, &history);
            let mut slope = dot(&dir, &g);
            if slope >= 0.0 || !slope.is_finite() {
                history.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = dot(&dir, &g);
            }
            // Without curvature information, scale the first step to unit length.
            let mut step = if history.is_empty() {
                1.0 / dot(&dir, &dir).sqrt().max(1.0)
            } else {
                1.0
            };

            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
                let (ft, gt) = objective(&trial);
                if ft.is_finite() && ft <= fx + self.armijo * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                step *= 0.5;
            }
            let Some((x_new, f_new, g_new)) = accepted else {
                if history.is_empty() {
                    break;
                }
                history.clear();
                continue;
            };

            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
                if history.len() == self.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            x = x_new;
            fx = f_new;
            g = g_new;
            trace.push(fx);
            iterations += 1;
        }

        let grad_max_norm = max_norm(&g);
        Outcome {
            x,
            value: fx,
            grad_max_norm,
            iterations,
            converged: grad_max_norm < self.tol,
            trace,
        }
    }

    /// Two-loop recursion: returns `-H g`.
    fn direction(&self, g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let out = Lbfgs {
            max_iters: 5000,
            ..Lbfgs::default()
        }
        .minimize(f, vec![-1.2, 1.0]);
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges_fast() {
        let diag = [1.0, 10.0, 100.0];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&diag).map(|(xi, d)| 0.5 * d * xi * xi).sum();
            let g = x.iter().zip(&diag).map(|(xi, d)| d * xi).collect();
            (v, g)
        };
        let out = Lbfgs::default().minimize(f, vec![1.0, 1.0, 1.0]);
        assert!(out.converged);
        assert!(out.iterations < 50, "{}", out.iterations);
    }

    #[test]
    fn stops_at_max_iters() {
        let f = |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]);
        let out = Lbfgs {
            max_iters: 0,
            ..Lbfgs::default()
        }
        .minimize(f, vec![3.0]);
        assert!(!out.converged);
        assert_eq!(out.iterations, 0);
    }
}
