//! Threshold and sign nonlinearities with rectangular surrogate gradients.
//!
//! Both functions pass the incoming gradient through unchanged inside a
//! window of half-width `window` around their switching point and block it
//! outside. In [`SpikeMode::Relaxed`] the forward pass is replaced by a
//! clamped ramp of slope 1 over the same window, so the surrogate is the
//! exact derivative and finite differences can check it.

use serde::{Deserialize, Serialize};

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpikeMode {
    #[default]
    Hard,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeFnConfig {
    /// Firing threshold.
    pub v_th: f64,
    /// Half-width of the rectangular surrogate window.
    pub window: f64,
    pub mode: SpikeMode,
    /// Multiplier on the pass-through gradient. Anything other than 1
    /// corrupts the backward rule; only used as a negative control for
    /// gradient checking.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub grad_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

impl Default for SpikeFnConfig {
    fn default() -> Self {
        Self {
            v_th: 0.5,
            window: 0.5,
            mode: SpikeMode::Hard,
            grad_scale: 1.0,
        }
    }
}

impl SpikeFnConfig {
    pub fn relaxed(self) -> Self {
        Self {
            mode: SpikeMode::Relaxed,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_th > 0.0) {
            return Err(format!("threshold must be positive, got {}", self.v_th));
        }
        if !(self.window > 0.0) {
            return Err(format!(
                "surrogate window must be positive, got {}",
                self.window
            ));
        }
        Ok(())
    }
}

pub(crate) fn spike_forward<T: Element>(v: T, cfg: &SpikeFnConfig) -> T {
    let th = T::from_f64(cfg.v_th);
    match cfg.mode {
        SpikeMode::Hard => {
            if v >= th {
                T::one()
            } else {
                T::zero()
            }
        }
        SpikeMode::Relaxed => {
            let w = T::from_f64(cfg.window);
            (v - th + w).max(T::zero()).min(w + w)
        }
    }
}

pub(crate) fn spike_pass<T: Element>(v: T, cfg: &SpikeFnConfig) -> bool {
    (v - T::from_f64(cfg.v_th)).abs() <= T::from_f64(cfg.window)
}

/// θ(0) = +1.
pub(crate) fn sign_forward<T: Element>(v: T, cfg: &SpikeFnConfig) -> T {
    match cfg.mode {
        SpikeMode::Hard => {
            if v >= T::zero() {
                T::one()
            } else {
                -T::one()
            }
        }
        SpikeMode::Relaxed => {
            let w = T::from_f64(cfg.window);
            v.max(-w).min(w)
        }
    }
}

pub(crate) fn sign_pass<T: Element>(v: T, cfg: &SpikeFnConfig) -> bool {
    v.abs() <= T::from_f64(cfg.window)
}

/// Which linear piece of the relaxed ramp `x` sits on: below, inside or
/// above the window `[center - window, center + window]`.
pub(crate) fn region<T: Element>(x: T, center: T, window: T) -> u8 {
    let d = x - center;
    if d < -window {
        0
    } else if d > window {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let cfg = SpikeFnConfig::default();
        assert_eq!(spike_forward(0.5f64, &cfg), 1.0);
        assert!(spike_pass(0.5f64, &cfg));
        assert_eq!(spike_forward(1.1f64, &cfg), 1.0);
        assert!(!spike_pass(1.1f64, &cfg));
        assert_eq!(spike_forward(0.49f64, &cfg), 0.0);
        assert_eq!(spike_forward(0.0f64, &cfg.relaxed()), 0.0);
        assert_eq!(spike_forward(0.75f64, &cfg.relaxed()), 0.75);
        assert_eq!(spike_forward(3.0f64, &cfg.relaxed()), 1.0);
    }

    #[test]
    fn sign_examples() {
        let cfg = SpikeFnConfig::default();
        assert_eq!(sign_forward(0.3f64, &cfg), 1.0);
        assert_eq!(sign_forward(-0.3f64, &cfg), -1.0);
        assert!(sign_pass(-0.3f64, &cfg));
        assert_eq!(sign_forward(0.0f64, &cfg), 1.0);
        assert_eq!(sign_forward(-0.3f64, &cfg.relaxed()), -0.3);
        assert_eq!(sign_forward(2.0f64, &cfg.relaxed()), 0.5);
    }

    #[test]
    fn validation() {
        assert!(SpikeFnConfig::default().validate().is_ok());
        assert!(SpikeFnConfig {
            v_th: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SpikeFnConfig {
            window: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
