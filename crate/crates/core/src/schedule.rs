//! Masking schedules α_t on forward time t ∈ [0, 1].
//!
//! Forward time runs from data (t = 0, α = 1) to the fully masked state
//! (t = 1, α = 0). Reverse (generation) time is τ = 1 − t.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// α_t = 1 − t
    Linear,
    /// α_t = cos(πt/2)
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSchedule {
    pub kind: ScheduleKind,
    /// Rates are only ever evaluated on [t_min, 1 − t_min]; both 1/α_t and
    /// the base hazard diverge at the endpoints.
    pub t_min: f64,
}

impl Default for MaskingSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl MaskingSchedule {
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn with_t_min(mut self, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 0.5) {
            return Err(Error::domain(format!("t_min must lie in (0, 0.5), got {t_min}")));
        }
        self.t_min = t_min;
        Ok(self)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    /// ∂α_t/∂t
    pub fn dalpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::Cosine => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    /// (1/α_t)(∂α_t/∂t); negative for every decreasing schedule.
    pub fn log_alpha_rate(&self, t: f64) -> f64 {
        self.dalpha(t) / self.alpha(t)
    }

    /// α_t / (1 − α_t), the factor converting a de-masking posterior into a
    /// probability ratio p_t(j)/p_t(mask).
    pub fn odds(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        a / (1.0 - a)
    }

    /// Clamp `t` into the interval on which rates are finite.
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, 1.0 - self.t_min)
    }

    /// ᾱ_{s,t} = α_s / α_t for t ≤ s: the probability that a token unmasked
    /// at time t is still unmasked at time s.
    pub fn alpha_ratio(&self, s: f64, t: f64) -> Result<f64> {
        check_unit("s", s)?;
        check_unit("t", t)?;
        if s < t {
            return Err(Error::domain(format!("alpha_ratio needs t <= s, got s={s}, t={t}")));
        }
        if s == t {
            return Ok(1.0);
        }
        let at = self.alpha(t);
        if at <= 0.0 {
            return Err(Error::domain("alpha_ratio undefined once alpha_t = 0"));
        }
        Ok((self.alpha(s) / at).clamp(0.0, 1.0))
    }
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain(format!("{name} = {x} outside [0, 1]")));
    }
    Ok(())
}
