//! Update rules consuming [`ParamSet`]s: plain gradient descent, classical
//! momentum and global-norm clipping.

use crate::error::{Error, Result};
use crate::network::ParamSet;

/// Scales `g` so its joint L2 norm does not exceed `threshold`.
pub fn clip_global_norm(g: &ParamSet, threshold: f64) -> Result<ParamSet> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "clip threshold must be positive and finite, got {threshold}"
        )));
    }
    let mut out = g.clone();
    let norm = g.l2_norm();
    if norm > threshold {
        out.scale(threshold / norm);
    }
    Ok(out)
}

/// θ ← θ − η·g.
pub fn batch_gd_step(params: &mut ParamSet, g: &ParamSet, learning_rate: f64) -> Result<()> {
    params.scaled_add(-learning_rate, g)
}

/// Learning rate, momentum, optional clipping and the velocity buffer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    learning_rate: f64,
    momentum: f64,
    clip_threshold: Option<f64>,
    velocity: ParamSet,
}

impl OptimizerState {
    /// Zero velocity shaped like `params`.
    pub fn new(
        params: &ParamSet,
        learning_rate: f64,
        momentum: f64,
        clip_threshold: Option<f64>,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if let Some(t) = clip_threshold {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "clip threshold must be positive, got {t}"
                )));
            }
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            clip_threshold,
            velocity: ParamSet::zeros_like(params),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn clip_threshold(&self) -> Option<f64> {
        self.clip_threshold
    }

    pub fn velocity(&self) -> &ParamSet {
        &self.velocity
    }
}

/// Classical momentum: v ← μ·v − η·clip(g); θ ← θ + v.
pub fn momentum_step(params: &mut ParamSet, g: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    params.check_congruent(g)?;
    params.check_congruent(&state.velocity)?;
    let clipped;
    let g = match state.clip_threshold {
        Some(t) => {
            clipped = clip_global_norm(g, t)?;
            &clipped
        }
        None => g,
    };
    if state.momentum == 0.0 {
        // v = −η·g exactly, independent of the old velocity.
        for (v, gi) in state.velocity.values_mut().zip(g.values()) {
            *v = -state.learning_rate * gi;
        }
    } else {
        state.velocity.scale(state.momentum);
        state.velocity.scaled_add(-state.learning_rate, g)?;
    }
    params.scaled_add(1.0, &state.velocity)
}
