//! Convex duals of the form
//!
//! ```text
//! L(ν)  = c·ν + α Σ_t w_t exp(e_t(ν)/α − 1)          (unstable)
//! L̃(ν) = c·ν + α log Σ_t w_t exp(e_t(ν)/α)           (stable)
//! ```
//!
//! with affine advantages `e_t(ν) = b_t + Σ_j A_tj ν_j`, minimized by damped
//! Newton steps with backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub weight: f64,
    pub offset: f64,
    pub coeffs: Vec<(usize, f64)>,
    /// Variable of the state the term's action is taken in.
    pub source: usize,
}

impl Term {
    pub fn advantage(&self, nu: &[f64]) -> f64 {
        self.offset + self.coeffs.iter().map(|&(j, a)| a * nu[j]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualProblem {
    pub n: usize,
    /// Linear coefficient, `(1 − γ)` times the initial-state weights.
    pub linear: Vec<f64>,
    pub terms: Vec<Term>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    Unstable,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Take a single gradient step per update instead of solving to tolerance.
    pub single_step: bool,
    pub step_size: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            grad_tol: 1e-8,
            max_iter: 500,
            single_step: false,
            step_size: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuSolution {
    pub nu: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

impl DualProblem {
    pub fn advantages(&self, nu: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.advantage(nu)).collect()
    }

    fn linear_part(&self, nu: &[f64]) -> f64 {
        self.linear.iter().zip(nu).map(|(c, x)| c * x).sum()
    }

    pub fn value(&self, nu: &[f64], form: Form) -> f64 {
        let alpha = self.alpha;
        let e = self.advantages(nu);
        let lin = self.linear_part(nu);
        match form {
            Form::Unstable => {
                lin + alpha
                    * self
                        .terms
                        .iter()
                        .zip(&e)
                        .map(|(t, &e)| t.weight * (e / alpha - 1.0).exp())
                        .sum::<f64>()
            }
            Form::Stable => lin + alpha * log_sum_exp(self.terms.iter().zip(&e).map(|(t, &e)| (t.weight, e / alpha))),
        }
    }

    /// Per-term probabilities `q_t` that weight the gradient, and the value.
    fn weights(&self, nu: &[f64], form: Form) -> (f64, Vec<f64>) {
        let alpha = self.alpha;
        let e = self.advantages(nu);
        let lin = self.linear_part(nu);
        match form {
            Form::Unstable => {
                let q: Vec<f64> = self
                    .terms
                    .iter()
                    .zip(&e)
                    .map(|(t, &e)| t.weight * (e / alpha - 1.0).exp())
                    .collect();
                (lin + alpha * q.iter().sum::<f64>(), q)
            }
            Form::Stable => {
                let m = self
                    .terms
                    .iter()
                    .zip(&e)
                    .filter(|(t, _)| t.weight > 0.0)
                    .map(|(_, &e)| e / alpha)
                    .fold(f64::NEG_INFINITY, f64::max);
                let raw: Vec<f64> = self
                    .terms
                    .iter()
                    .zip(&e)
                    .map(|(t, &e)| if t.weight > 0.0 { t.weight * (e / alpha - m).exp() } else { 0.0 })
                    .collect();
                let z: f64 = raw.iter().sum();
                let value = lin + alpha * (m + z.ln());
                (value, raw.into_iter().map(|r| r / z).collect())
            }
        }
    }

    pub fn gradient(&self, nu: &[f64], form: Form) -> Vec<f64> {
        let (_, q) = self.weights(nu, form);
        let mut g = self.linear.clone();
        for (t, qt) in self.terms.iter().zip(&q) {
            for &(j, a) in &t.coeffs {
                g[j] += qt * a;
            }
        }
        g
    }

    fn hessian(&self, q: &[f64], form: Form) -> DMatrix<f64> {
        let n = self.n;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for (t, &qt) in self.terms.iter().zip(q) {
            if qt == 0.0 {
                continue;
            }
            for &(j, a) in &t.coeffs {
                for &(k, b) in &t.coeffs {
                    h[(j, k)] += qt * a * b;
                }
            }
        }
        if form == Form::Stable {
            let mut mean = vec![0.0; n];
            for (t, &qt) in self.terms.iter().zip(q) {
                for &(j, a) in &t.coeffs {
                    mean[j] += qt * a;
                }
            }
            for j in 0..n {
                for k in 0..n {
                    h[(j, k)] -= mean[j] * mean[k];
                }
            }
        }
        h / self.alpha
    }

    /// Fixed point of `ν(s) = α log Σ_t π̂_t exp((e_t(ν) + ν(s))/α)` over the
    /// terms leaving each state, with `π̂` proportional to the term weights.
    /// Off the optimum by `O(α)` per state, which keeps Newton out of the
    /// region where `exp(e/α)` is huge.
    pub fn soft_start(&self, max_iter: usize, tol: f64) -> Vec<f64> {
        let mut nu = vec![0.0; self.n];
        let mut total = vec![0.0; self.n];
        for t in &self.terms {
            total[t.source] += t.weight;
        }
        for _ in 0..max_iter {
            let mut acc: Vec<Vec<(f64, f64)>> = vec![vec![]; self.n];
            for t in &self.terms {
                if t.weight > 0.0 {
                    acc[t.source].push((t.weight / total[t.source], (t.advantage(&nu) + nu[t.source]) / self.alpha));
                }
            }
            let next: Vec<f64> = acc
                .into_iter()
                .zip(&nu)
                .map(|(items, &old)| {
                    if items.is_empty() {
                        old
                    } else {
                        self.alpha * log_sum_exp(items.into_iter())
                    }
                })
                .collect();
            let delta = next.iter().zip(&nu).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            nu = next;
            if !(delta > tol) {
                break;
            }
        }
        if nu.iter().all(|x| x.is_finite()) {
            nu
        } else {
            vec![0.0; self.n]
        }
    }

    /// Newton's method with Armijo backtracking from `start`.
    pub fn minimize(&self, form: Form, start: &[f64], cfg: &InnerConfig) -> Result<NuSolution> {
        let mut nu = start.to_vec();
        let (mut value, mut q) = self.weights(&nu, form);
        if !value.is_finite() {
            return Err(Error::Overflow {
                max_abs_nu: nu.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
            });
        }
        let mut history = vec![value];
        let grad_of = |q: &[f64]| {
            let mut g = self.linear.clone();
            for (t, qt) in self.terms.iter().zip(q) {
                for &(j, a) in &t.coeffs {
                    g[j] += qt * a;
                }
            }
            g
        };
        let mut g = grad_of(&q);
        let norm = |g: &[f64]| g.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        if cfg.single_step {
            let step: Vec<f64> = g.iter().map(|x| -cfg.step_size * x).collect();
            let (next, next_value) = self.backtrack(form, &nu, value, &g, &step);
            if let Some(v) = next_value {
                nu = next;
                value = v;
                history.push(value);
                let (_, q2) = self.weights(&nu, form);
                g = grad_of(&q2);
            }
            return Ok(NuSolution {
                grad_norm: norm(&g),
                nu,
                objective: value,
                iterations: 1,
                history,
            });
        }
        for it in 0..cfg.max_iter {
            let gn = norm(&g);
            if gn <= cfg.grad_tol {
                return Ok(NuSolution {
                    nu,
                    objective: value,
                    grad_norm: gn,
                    iterations: it,
                    history,
                });
            }
            let step = self.newton_step(&q, &g, form);
            if self.rounding_level_step(form, &nu, value, &g, &step, gn, &grad_of) {
                nu.iter_mut().zip(&step).for_each(|(x, d)| *x += d);
                value = self.value(&nu, form);
                history.push(value);
                let (_, q2) = self.weights(&nu, form);
                q = q2;
                g = grad_of(&q);
                continue;
            }
            let (next, next_value) = self.backtrack(form, &nu, value, &g, &step);
            match next_value {
                Some(v) => {
                    nu = next;
                    value = v;
                    history.push(value);
                }
                None => {
                    // Newton direction failed: fall back to steepest descent.
                    let scale = 1.0 / (1.0 + gn);
                    let sd: Vec<f64> = g.iter().map(|x| -x * scale).collect();
                    let (next, next_value) = self.backtrack(form, &nu, value, &g, &sd);
                    match next_value {
                        Some(v) => {
                            nu = next;
                            value = v;
                            history.push(value);
                        }
                        None => {
                            // No representable decrease left; accept if the
                            // gradient is at rounding level.
                            if gn <= cfg.grad_tol * 1e3 {
                                return Ok(NuSolution {
                                    nu,
                                    objective: value,
                                    grad_norm: gn,
                                    iterations: it,
                                    history,
                                });
                            }
                            return Err(Error::NoConvergence {
                                iterations: it,
                                grad_norm: gn,
                                objective: value,
                            });
                        }
                    }
                }
            }
            let (_, q2) = self.weights(&nu, form);
            q = q2;
            g = grad_of(&q);
        }
        let gn = norm(&g);
        Err(Error::NoConvergence {
            iterations: cfg.max_iter,
            grad_norm: gn,
            objective: value,
        })
    }

    /// Near the optimum the predicted decrease drops below the rounding level
    /// of the objective and Armijo cannot see it; the full Newton step is then
    /// taken if it shrinks the gradient.
    #[allow(clippy::too_many_arguments)]
    fn rounding_level_step(
        &self,
        form: Form,
        nu: &[f64],
        value: f64,
        g: &[f64],
        step: &[f64],
        gn: f64,
        grad_of: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> bool {
        let slope: f64 = g.iter().zip(step).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) || -slope > 1e-12 * (1.0 + value.abs()) {
            return false;
        }
        let trial: Vec<f64> = nu.iter().zip(step).map(|(x, d)| x + d).collect();
        let (v, q) = self.weights(&trial, form);
        v.is_finite() && grad_of(&q).iter().fold(0.0, |m: f64, x| m.max(x.abs())) < gn
    }

    fn newton_step(&self, q: &[f64], g: &[f64], form: Form) -> Vec<f64> {
        let mut h = self.hessian(q, form);
        let scale = (0..self.n).map(|j| h[(j, j)].abs()).fold(0.0, f64::max);
        // a shift-invariant stable form has H·1 = 0 and g ⟂ 1; adding c·11ᵀ
        // removes the null direction without changing the step on its
        // complement
        let shift_null = (0..self.n)
            .map(|j| (0..self.n).map(|k| h[(j, k)]).sum::<f64>().abs())
            .fold(0.0, f64::max)
            <= 1e-10 * (1.0 + scale);
        if form == Form::Stable && shift_null {
            h.add_scalar_mut((1.0 + scale) / self.n as f64);
        }
        let ridge = 1e-12 * (1.0 + scale);
        for j in 0..self.n {
            h[(j, j)] += ridge;
        }
        let rhs = DVector::from_iterator(self.n, g.iter().map(|x| -x));
        if let Some(ch) = h.clone().cholesky() {
            return ch.solve(&rhs).iter().copied().collect();
        }
        match h.lu().solve(&rhs) {
            Some(x) => x.iter().copied().collect(),
            None => rhs.iter().copied().collect(),
        }
    }

    fn backtrack(&self, form: Form, nu: &[f64], value: f64, g: &[f64], step: &[f64]) -> (Vec<f64>, Option<f64>) {
        let slope: f64 = g.iter().zip(step).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            return (nu.to_vec(), None);
        }
        let mut t = 1.0;
        for _ in 0..80 {
            let trial: Vec<f64> = nu.iter().zip(step).map(|(x, d)| x + t * d).collect();
            let v = self.value(&trial, form);
            if v.is_finite() && v <= value + 1e-4 * t * slope {
                return (trial, Some(v));
            }
            t *= 0.5;
        }
        (nu.to_vec(), None)
    }
}

/// `log Σ w_i exp(x_i)` over entries with positive weight.
pub fn log_sum_exp(items: impl Iterator<Item = (f64, f64)>) -> f64 {
    let items: Vec<(f64, f64)> = items.filter(|&(w, _)| w > 0.0).collect();
    let m = items.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + items.iter().map(|&(w, x)| w * (x - m).exp()).sum::<f64>().ln()
}

/// Closed-form inner maximizer `argmax_w w(ê − α log w) = exp(ê/α − 1)`.
pub fn closed_form_w(e_hat: f64, alpha: f64) -> f64 {
    (e_hat / alpha - 1.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> DualProblem {
        // e_0 = 1 − ν0 + 0.5 ν1, e_1 = −ν1 + 0.5 ν0
        DualProblem {
            n: 2,
            linear: vec![0.5, 0.0],
            terms: vec![
                Term {
                    weight: 0.6,
                    offset: 1.0,
                    coeffs: vec![(0, -1.0), (1, 0.5)],
                    source: 0,
                },
                Term {
                    weight: 0.4,
                    offset: 0.0,
                    coeffs: vec![(1, -1.0), (0, 0.5)],
                    source: 1,
                },
            ],
            alpha: 0.7,
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_w(2.0, 2.0), 1.0);
        assert!((closed_form_w(0.0, 1.0) - 0.36787944117144233).abs() < 1e-16);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = two_state();
        let nu = [0.3, -0.2];
        for form in [Form::Unstable, Form::Stable] {
            let g = p.gradient(&nu, form);
            for j in 0..2 {
                let h = 1e-6;
                let mut a = nu;
                let mut b = nu;
                a[j] += h;
                b[j] -= h;
                let fd = (p.value(&a, form) - p.value(&b, form)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8, "{form:?} {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn newton_converges_and_is_monotone() {
        let p = two_state();
        for form in [Form::Unstable, Form::Stable] {
            let sol = p.minimize(form, &[5.0, -5.0], &InnerConfig::default()).unwrap();
            assert!(sol.grad_norm <= 1e-8);
            assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn log_sum_exp_ignores_zero_weights() {
        let v = log_sum_exp([(1.0, 0.0), (0.0, 1e308), (1.0, 0.0)].into_iter());
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }
}
