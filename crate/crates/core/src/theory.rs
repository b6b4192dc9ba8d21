//! Order-level calculators for the estimator's error bounds.
//!
//! Every quantity hidden behind `≲` or `≃` is taken with constant 1, so the
//! outputs describe how the bounds scale with `n`, `p`, `q` and the network
//! size; they are not certified numeric bounds.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Inputs shared by the calculators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Lipschitz constant `L` of the loss.
    pub lipschitz: f64,
    /// Strong-convexity constant `α`.
    pub alpha: f64,
    /// Smoothness order `m` of the coefficient functions.
    pub m: u32,
    pub q: u32,
    pub p: u32,
    pub n: f64,
    /// Failure probability `δ ∈ (0, 1)`.
    pub delta: f64,
    /// Pseudo-dimension `d_P` of the hypothesis class.
    pub pseudo_dim: f64,
    /// Threshold mixing weight `η ∈ (0, 1)`.
    pub eta: f64,
    /// Largest weak-edge magnitude `β̄`.
    pub beta_weak: f64,
    /// Smallest strong-edge magnitude `β̲`.
    pub beta_strong: f64,
    /// Eigenvalue floor `γ` of the conditional second moments.
    pub gamma: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            lipschitz: 4.0,
            alpha: 0.5,
            m: 2,
            q: 2,
            p: 10,
            n: 1e6,
            delta: 0.05,
            pseudo_dim: 1000.0,
            eta: 0.5,
            beta_weak: 0.1,
            beta_strong: 0.5,
            gamma: 0.2,
        }
    }
}

impl BoundInputs {
    /// Positivity and range checks; the edge margin is checked separately by
    /// [`edge_bound_cor2`].
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L", self.lipschitz),
            ("alpha", self.alpha),
            ("n", self.n),
            ("d_P", self.pseudo_dim),
            ("gamma", self.gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} = {v} must be positive and finite")));
            }
        }
        if self.m == 0 || self.q == 0 || self.p == 0 {
            return Err(Error::Domain("m, q and p must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Domain(format!("eta = {} must lie in (0, 1)", self.eta)));
        }
        if !(self.beta_weak >= 0.0) {
            return Err(Error::Domain(format!(
                "beta_weak = {} must be nonnegative",
                self.beta_weak
            )));
        }
        Ok(())
    }

    fn log_nlp(&self) -> Result<f64> {
        let arg = self.n * self.lipschitz * self.p as f64;
        if arg <= 1.0 {
            return Err(Error::Domain(format!("log(nLp) needs nLp > 1, got {arg}")));
        }
        Ok(arg.ln())
    }
}

/// Exponent applied to the rate base.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateMode {
    /// `m / (m + q)`, general Lipschitz losses.
    #[default]
    Lipschitz,
    /// `m / (2m + q)`, squared loss.
    Quadratic,
}

impl RateMode {
    pub fn exponent(self, m: u32, q: u32) -> f64 {
        let (m, q) = (m as f64, q as f64);
        match self {
            RateMode::Lipschitz => m / (m + q),
            RateMode::Quadratic => m / (2.0 * m + q),
        }
    }
}

/// `ξ = (L m⁴ q⁶ p² log²(nLp) log p log(1/δ) log(1/α) / (α n))^e` with the
/// exponent `e` chosen by `mode`.
pub fn xi_theorem2(inputs: &BoundInputs, mode: RateMode) -> Result<f64> {
    inputs.validate()?;
    let BoundInputs {
        lipschitz: l,
        alpha,
        m,
        q,
        p,
        n,
        delta,
        ..
    } = *inputs;
    let (mf, qf, pf) = (m as f64, q as f64, p as f64);
    let log_nlp = inputs.log_nlp()?;
    let base =
        l * mf.powi(4) * qf.powi(6) * pf * pf * log_nlp * log_nlp * pf.ln() * (1.0 / delta).ln() * (1.0 / alpha).ln()
            / (alpha * n);
    if !(base > 0.0) {
        return Err(Error::Domain(format!(
            "rate base {base} is not positive (needs p > 1 and alpha < 1)"
        )));
    }
    Ok(base.powf(mode.exponent(m, q)))
}

/// `⌈x⌉`, with values within `1e-9` of an integer snapped to it so that
/// rounding noise cannot add a layer.
fn snapped_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.ceil()
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
}

/// Network size matched to `ξ`: layers `H = ⌈ξ^{-q/2m}⌉` and neurons
/// `r = ⌈(2e)^q C(m+q, q) q²⌉`.
pub fn network_size_theorem2(m: u32, q: u32, xi: f64) -> Result<(u64, u64)> {
    if m == 0 || q == 0 {
        return Err(Error::Domain("m and q must be positive".into()));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Domain(format!("xi = {xi} must lie in (0, 1)")));
    }
    let h = snapped_ceil(xi.powf(-(q as f64) / (2.0 * m as f64)));
    let r = snapped_ceil((2.0 * std::f64::consts::E).powi(q as i32) * binomial(m + q, q) * (q * q) as f64);
    Ok((h as u64, r as u64))
}

/// `L² d_P p² log(nLp) log(1/δ) / (α n)`.
pub fn generalization_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let pf = inputs.p as f64;
    Ok(inputs.lipschitz
        * inputs.lipschitz
        * inputs.pseudo_dim
        * pf
        * pf
        * inputs.log_nlp()?
        * (1.0 / inputs.delta).ln()
        / (inputs.alpha * inputs.n))
}

/// Expected number of misclassified directed edges at threshold
/// `τ = η β̄ + (1 - η) β̲`:
/// `gen / (α μ γ Δ²) + L ε / (α γ μ Δ²)` with `μ = min(η², (1-η)²)`,
/// `Δ = β̲ - β̄` and `gen` the [`generalization_term`].
pub fn edge_bound_cor2(inputs: &BoundInputs, approx_error: f64) -> Result<f64> {
    inputs.validate()?;
    if !(inputs.beta_strong > inputs.beta_weak) {
        return Err(Error::MarginViolated {
            weak: inputs.beta_weak,
            strong: inputs.beta_strong,
        });
    }
    if !(approx_error >= 0.0) {
        return Err(Error::Domain(format!(
            "approximation error {approx_error} must be nonnegative"
        )));
    }
    let mu = inputs.eta.powi(2).min((1.0 - inputs.eta).powi(2));
    let margin2 = (inputs.beta_strong - inputs.beta_weak).powi(2);
    let denom = inputs.alpha * mu * inputs.gamma * margin2;
    let generalization = generalization_term(inputs)? / denom;
    let approximation = inputs.lipschitz * approx_error / denom;
    Ok(generalization + approximation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn frozen_values() {
        // 50-digit evaluations at the default inputs
        let i = BoundInputs::default();
        assert!(rel(xi_theorem2(&i, RateMode::Lipschitz).unwrap(), 34.642882991561635635) < 1e-12);
        assert!(rel(xi_theorem2(&i, RateMode::Quadratic).unwrap(), 10.626967473525273245) < 1e-12);
        assert!(rel(generalization_term(&i).unwrap(), 167.80309148178825321) < 1e-12);
        let i = BoundInputs { eta: 0.3, ..i };
        assert!(rel(edge_bound_cor2(&i, 0.01).unwrap(), 116557.70241790850917) < 1e-12);
    }

    #[test]
    fn exponents() {
        assert_eq!(RateMode::Lipschitz.exponent(3, 3), 0.5);
        assert_eq!(RateMode::Quadratic.exponent(1, 2), 0.25);
    }

    #[test]
    fn network_sizes() {
        assert_eq!(network_size_theorem2(1, 1, 0.5).unwrap().1, 11);
        assert_eq!(network_size_theorem2(2, 2, 0.5).unwrap().1, 710);
        assert_eq!(network_size_theorem2(2, 2, 1.0 - 1e-12).unwrap().0, 1);
        assert_eq!(network_size_theorem2(1, 2, 0.25).unwrap().0, 4);
        let hs: Vec<u64> = [0.9, 0.5, 0.1, 0.01]
            .iter()
            .map(|&x| network_size_theorem2(2, 3, x).unwrap().0)
            .collect();
        assert!(hs.windows(2).all(|w| w[0] <= w[1]) && hs[0] < hs[3]);
        assert!(network_size_theorem2(1, 1, 1.0).is_err());
        assert!(network_size_theorem2(1, 1, 0.0).is_err());
    }

    #[test]
    fn edge_bound_structure() {
        let i = BoundInputs::default();
        let gen_only = edge_bound_cor2(&i, 0.0).unwrap();
        let expected = generalization_term(&i).unwrap() / (i.alpha * 0.25 * i.gamma * 0.16);
        assert!(rel(gen_only, expected) < 1e-14);
        let mut last = 0.0;
        for strong in [0.5, 0.3, 0.2, 0.15, 0.11, 0.1001] {
            let v = edge_bound_cor2(
                &BoundInputs {
                    beta_strong: strong,
                    ..i
                },
                0.01,
            )
            .unwrap();
            assert!(v > last);
            last = v;
        }
        assert!(matches!(
            edge_bound_cor2(&BoundInputs { beta_strong: 0.1, ..i }, 0.0),
            Err(Error::MarginViolated { .. })
        ));
    }

    #[test]
    fn invalid_inputs() {
        let i = BoundInputs::default();
        assert!(xi_theorem2(&BoundInputs { alpha: 1.0, ..i }, RateMode::Lipschitz).is_err());
        assert!(xi_theorem2(&BoundInputs { p: 1, ..i }, RateMode::Lipschitz).is_err());
        assert!(generalization_term(&BoundInputs { delta: 1.0, ..i }).is_err());
        assert!(generalization_term(&BoundInputs { n: 0.0, ..i }).is_err());
    }

    #[test]
    fn generalization_scaling() {
        let i = BoundInputs::default();
        let g = generalization_term(&i).unwrap();
        let g2 = generalization_term(&BoundInputs {
            pseudo_dim: 2.0 * i.pseudo_dim,
            ..i
        })
        .unwrap();
        assert!(rel(g2, 2.0 * g) < 1e-14);
        // doubling p: factor 4 times the ratio of the log terms
        let gp = generalization_term(&BoundInputs { p: 2 * i.p, ..i }).unwrap();
        let logs = (i.n * i.lipschitz * 20.0).ln() / (i.n * i.lipschitz * 10.0).ln();
        assert!(rel(gp / g, 4.0 * logs) < 1e-14);
    }

    proptest! {
        #[test]
        fn monotone_in_n_and_p(n in 1e3f64..1e9, p in 2u32..200, m in 1u32..4, q in 1u32..4) {
            let i = BoundInputs { n, p, m, q, ..BoundInputs::default() };
            let bigger_n = BoundInputs { n: 2.0 * n, ..i };
            let bigger_p = BoundInputs { p: p + 1, ..i };
            for mode in [RateMode::Lipschitz, RateMode::Quadratic] {
                prop_assert!(xi_theorem2(&bigger_n, mode).unwrap() < xi_theorem2(&i, mode).unwrap());
                prop_assert!(xi_theorem2(&bigger_p, mode).unwrap() > xi_theorem2(&i, mode).unwrap());
            }
            prop_assert!(generalization_term(&bigger_n).unwrap() < generalization_term(&i).unwrap());
            prop_assert!(generalization_term(&bigger_p).unwrap() > generalization_term(&i).unwrap());
        }

        #[test]
        fn quadratic_rate_is_smaller_below_one(n in 1e10f64..1e14, m in 1u32..3) {
            let i = BoundInputs { n, m, q: 1, p: 3, ..BoundInputs::default() };
            let lip = xi_theorem2(&i, RateMode::Lipschitz).unwrap();
            prop_assume!(lip < 1.0);
            prop_assert!(xi_theorem2(&i, RateMode::Quadratic).unwrap() >= lip);
        }
    }
}
