//! Power-law parameter schedules.
//!
//! `γ_k = γ₀ k^g`, `δ_k = δ₀ k^-d` and `s_k = s₀ k^-s` for `k >= 1`. With
//! `s = 1`, `g = 1/4` and `d >= 3/4` the incremental method converges in mean
//! square at rate `O(k^-1/2)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Growth exponent of the penalty weight.
    pub g: f64,
    /// Decay exponent of the smoothing width.
    pub d: f64,
    /// Decay exponent of the step size.
    pub s: f64,
    pub gamma0: f64,
    pub delta0: f64,
    pub step0: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::recommended()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

fn check_k(k: u64) -> Result<f64> {
    if k == 0 {
        Err(Error::Domain("schedules are indexed from k = 1".into()))
    } else {
        Ok(k as f64)
    }
}

impl Schedule {
    /// `s = 1`, `g = 1/4`, `d = 3/4`, unit scales.
    pub fn recommended() -> Self {
        Self {
            g: 0.25,
            d: 0.75,
            s: 1.0,
            gamma0: 1.0,
            delta0: 1.0,
            step0: 1.0,
        }
    }

    pub fn with_step0(mut self, step0: f64) -> Self {
        self.step0 = step0;
        self
    }

    pub fn gamma_at(&self, k: u64) -> Result<f64> {
        Ok(self.gamma0 * check_k(k)?.powf(self.g))
    }

    pub fn delta_at(&self, k: u64) -> Result<f64> {
        Ok(self.delta0 * check_k(k)?.powf(-self.d))
    }

    pub fn step_at(&self, k: u64) -> Result<f64> {
        Ok(self.step0 * check_k(k)?.powf(-self.s))
    }

    /// Upper bound on `γ_k δ_k` over all `k >= 1`, valid when `g <= d`.
    pub fn gd_bound(&self) -> f64 {
        self.gamma0 * self.delta0
    }

    /// `min{s - 2g, 2 - 2s + 2g, d - g}`: the exponent `r` in `E|x_k - x*|² = O(k^-r)`.
    pub fn predicted_rate_exponent(&self) -> f64 {
        (self.s - 2.0 * self.g)
            .min(2.0 - 2.0 * self.s + 2.0 * self.g)
            .min(self.d - self.g)
    }

    /// All findings about the schedule. Error-severity entries make it unusable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |message: String| {
            out.push(Diagnostic {
                severity: Severity::Error,
                message,
            })
        };
        let finite = [self.g, self.d, self.s, self.gamma0, self.delta0, self.step0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            err("schedule parameters must be finite".into());
            return out;
        }
        if self.g <= 0.0 {
            err(format!("g must be positive, got {}", self.g));
        }
        if self.d <= 0.0 {
            err(format!("d must be positive, got {}", self.d));
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            err(format!("s must lie in (0, 1], got {}", self.s));
        }
        if self.g > self.d {
            err(format!(
                "g = {} > d = {}: gamma_k * delta_k would be increasing",
                self.g, self.d
            ));
        }
        for (name, value) in [
            ("gamma0", self.gamma0),
            ("delta0", self.delta0),
            ("step0", self.step0),
        ] {
            if value <= 0.0 {
                err(format!("{name} must be positive, got {value}"));
            }
        }
        if !out.is_empty() {
            return out;
        }

        let iterate_exp = (self.s - 2.0 * self.g).min(2.0 - 2.0 * self.s + 2.0 * self.g);
        if iterate_exp <= 0.0 {
            out.push(Diagnostic {
                severity: Severity::Warning,
                message: format!(
                    "min(s - 2g, 2 - 2s + 2g) = {iterate_exp} <= 0: no convergence guarantee"
                ),
            });
        }
        if self.d - self.g <= 0.0 {
            out.push(Diagnostic {
                severity: Severity::Warning,
                message: format!(
                    "d - g = {} <= 0: penalized minimizers need not approach the optimum",
                    self.d - self.g
                ),
            });
        }
        out.push(Diagnostic {
            severity: Severity::Info,
            message: format!(
                "predicted rate E|x_k - x*|^2 = O(k^-{})",
                self.predicted_rate_exponent()
            ),
        });
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate()
            .iter()
            .all(|d| d.severity != Severity::Error)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let errors: Vec<String> = self
            .validate()
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.message)
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSchedule(errors.join("; ")))
        }
    }

    /// Certified bound on `|x_k* - x_{k+1}*|` for a `mu`-strongly convex objective:
    /// `[(γ_{k+1} - γ_k) + γ_k (δ_k - δ_{k+1}) / (2δ_k)] / μ`.
    pub fn drift_bound(&self, mu: f64, k: u64) -> Result<f64> {
        self.ensure_valid()?;
        if !(mu.is_finite() && mu > 0.0) {
            return Err(Error::Domain(format!("mu must be positive, got {mu}")));
        }
        let (g0, g1) = (self.gamma_at(k)?, self.gamma_at(k + 1)?);
        let (d0, d1) = (self.delta_at(k)?, self.delta_at(k + 1)?);
        Ok(((g1 - g0) + g0 * (d0 - d1) / (2.0 * d0)) / mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sch(g: f64, d: f64, s: f64) -> Schedule {
        Schedule {
            g,
            d,
            s,
            ..Schedule::recommended()
        }
    }

    #[test]
    fn gamma_values() {
        let s = Schedule::recommended();
        assert_eq!(s.gamma_at(1).unwrap(), 1.0);
        assert_eq!(s.gamma_at(16).unwrap(), 2.0);
        assert_relative_eq!(s.gamma_at(10_000).unwrap(), 10.0, max_relative = 1e-15);
        assert!(s.gamma_at(0).is_err());
    }

    #[test]
    fn delta_values() {
        let s = Schedule {
            delta0: 3.0,
            ..Schedule::recommended()
        };
        assert_eq!(s.delta_at(1).unwrap(), 3.0);
        assert_relative_eq!(s.delta_at(16).unwrap(), 3.0 / 8.0, max_relative = 1e-15);
        let s = Schedule { d: 1.0, ..s };
        assert_relative_eq!(s.delta_at(1000).unwrap(), 3.0 / 1000.0, max_relative = 1e-15);
        assert!(s.delta_at(0).is_err());
    }

    #[test]
    fn step_values() {
        let s = Schedule::recommended().with_step0(0.4);
        assert_eq!(s.step_at(1).unwrap(), 0.4);
        assert_relative_eq!(s.step_at(10).unwrap(), 0.04, max_relative = 1e-15);
        let s = Schedule { s: 0.5, ..s };
        assert_relative_eq!(s.step_at(4).unwrap(), 0.2, max_relative = 1e-15);
        assert!(s.step_at(0).is_err());
    }

    #[test]
    fn recommended_is_valid_with_half_rate() {
        let s = Schedule::recommended();
        let diags = s.validate();
        assert!(s.is_valid());
        assert!(diags.iter().all(|d| d.severity == Severity::Info));
        assert_eq!(s.predicted_rate_exponent(), 0.5);
    }

    #[test]
    fn fast_gamma_warns() {
        let s = sch(0.6, 0.75, 1.0);
        assert!(s.is_valid());
        let warn: Vec<_> = s
            .validate()
            .into_iter()
            .filter(|d| d.severity == Severity::Warning)
            .collect();
        assert_eq!(warn.len(), 1);
        assert!(warn[0].message.contains("no convergence guarantee"), "{}", warn[0].message);
    }

    #[test]
    fn increasing_product_is_invalid() {
        let s = sch(0.8, 0.5, 1.0);
        assert!(!s.is_valid());
        assert!(s.ensure_valid().is_err());
        assert!(!sch(0.25, 0.75, 1.5).is_valid());
        assert!(!sch(0.0, 0.75, 1.0).is_valid());
        assert!(!Schedule {
            step0: 0.0,
            ..Schedule::recommended()
        }
        .is_valid());
    }

    #[test]
    fn drift_bound_values() {
        let constant = sch(1e-300, 1e-300, 1.0);
        assert!(constant.drift_bound(1.0, 5).unwrap() < 1e-290);

        let s = Schedule::recommended();
        let expected = (2f64.powf(0.25) - 1.0) + (1.0 - 2f64.powf(-0.75)) / 2.0;
        assert_relative_eq!(s.drift_bound(1.0, 1).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(s.drift_bound(2.0, 1).unwrap(), expected / 2.0, max_relative = 1e-14);
        assert!(s.drift_bound(0.0, 1).is_err());
        assert!(sch(0.8, 0.5, 1.0).drift_bound(1.0, 1).is_err());
    }

    #[test]
    fn drift_bound_decays_like_k_to_g_minus_one() {
        let s = Schedule::recommended();
        assert!(s.drift_bound(1.0, 1_000_000).unwrap() < s.drift_bound(1.0, 100).unwrap());
        // log-log slope over a geometric k grid
        let pts: Vec<(f64, f64)> = (10..=20)
            .map(|j| {
                let k = 1u64 << j;
                ((k as f64).ln(), s.drift_bound(1.0, k).unwrap().ln())
            })
            .collect();
        let slope = (pts[pts.len() - 1].1 - pts[0].1) / (pts[pts.len() - 1].0 - pts[0].0);
        assert!((slope + 0.75).abs() < 1e-3, "slope {slope}");
    }

    #[test]
    fn monotone_over_log_grid() {
        let s = Schedule::recommended();
        let ks: Vec<u64> = (0..=60)
            .map(|j| 10f64.powf(j as f64 / 10.0).round() as u64)
            .collect();
        for w in ks.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(s.gamma_at(b).unwrap() >= s.gamma_at(a).unwrap());
            assert!(s.delta_at(b).unwrap() <= s.delta_at(a).unwrap());
            let pa = s.gamma_at(a).unwrap() * s.delta_at(a).unwrap();
            let pb = s.gamma_at(b).unwrap() * s.delta_at(b).unwrap();
            assert!(pb <= pa && pa <= s.gd_bound());
        }
    }
}
