//! Registered scalar coefficient functions and low-degree polynomials.
//!
//! Scenario files select nonlinearities by name + parameters rather than by
//! code, which keeps runs reproducible and configs serializable.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scalar function of a state pair (u, v).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalarFn2 {
    Const { value: f64 },
    /// a0 + au*u + av*v
    Affine { a0: f64, au: f64, av: f64 },
    /// a0 + au*clamp(u, lo, hi) + av*clamp(v, lo, hi)
    ClampedAffine { a0: f64, au: f64, av: f64, lo: f64, hi: f64 },
}

impl ScalarFn2 {
    pub fn constant(value: f64) -> Self {
        ScalarFn2::Const { value }
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            ScalarFn2::Const { value } => *value,
            ScalarFn2::Affine { a0, au, av } => a0 + au * u + av * v,
            ScalarFn2::ClampedAffine { a0, au, av, lo, hi } => {
                a0 + au * u.clamp(*lo, *hi) + av * v.clamp(*lo, *hi)
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarFn2::Const { .. })
    }
}

/// Polynomial in four state variables (u1, v1, u2, v2), total degree <= 2.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Poly4 {
    /// Terms as (coefficient, exponents for [u1, v1, u2, v2]).
    pub terms: Vec<(f64, [u8; 4])>,
}

impl Poly4 {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for (_, e) in &self.terms {
            let deg: u8 = e.iter().sum();
            if deg > 2 {
                return Err(Error::Parameter(format!(
                    "polynomial term degree {deg} exceeds 2 (exponents {e:?})"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, s: [f64; 4]) -> f64 {
        let mut acc = 0.0;
        for (coef, e) in &self.terms {
            let mut term = *coef;
            for (x, &p) in s.iter().zip(e.iter()) {
                for _ in 0..p {
                    term *= x;
                }
            }
            acc += term;
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|(c, _)| *c == 0.0)
    }

    /// Whether the polynomial involves the attractant variables v1, v2.
    pub fn depends_on_v(&self) -> bool {
        self.terms.iter().any(|(c, e)| *c != 0.0 && (e[1] > 0 || e[3] > 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_fn_eval() {
        let f = ScalarFn2::Affine { a0: 1.0, au: 2.0, av: -1.0 };
        assert_eq!(f.eval(0.5, 0.25), 1.0 + 1.0 - 0.25);
        let g = ScalarFn2::ClampedAffine { a0: 2.0, au: 1.0, av: 0.0, lo: 0.0, hi: 1.0 };
        assert_eq!(g.eval(3.0, 0.0), 3.0);
        assert_eq!(g.eval(-1.0, 0.0), 2.0);
    }

    #[test]
    fn poly_degree_guard() {
        let bad = Poly4 { terms: vec![(1.0, [2, 1, 0, 0])] };
        assert!(bad.validate().is_err());
        let ok = Poly4 { terms: vec![(0.5, [1, 0, 1, 0]), (-1.0, [0, 0, 0, 1])] };
        ok.validate().unwrap();
        assert_eq!(ok.eval([2.0, 9.0, 3.0, 4.0]), 0.5 * 6.0 - 4.0);
        assert!(ok.depends_on_v());
    }
}
