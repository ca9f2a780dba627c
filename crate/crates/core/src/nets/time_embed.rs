//! Sinusoidal features for the flow time t ∈ [0, 1].

use crate::error::{Error, Result};

/// Number of sinusoidal features fed into the time MLP.
pub const TIME_FEATURES: usize = 16;

/// Returns `[sin(ω_k t), cos(ω_k t)]` pairs for geometrically spaced ω_k.
/// Errors outside `[0, 1]`: the schedule is undefined there.
pub fn sinusoidal_time_features(t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config {
            field: "t".to_string(),
            reason: format!("flow time {t} outside [0, 1]"),
        });
    }
    let pairs = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for k in 0..pairs {
        // ω from 1 to 1000, geometric
        let omega = 1000.0f64.powf(k as f64 / (pairs - 1) as f64);
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_time() {
        assert!(sinusoidal_time_features(-0.01).is_err());
        assert!(sinusoidal_time_features(1.01).is_err());
        assert!(sinusoidal_time_features(0.0).is_ok());
        assert!(sinusoidal_time_features(1.0).is_ok());
    }

    #[test]
    fn features_at_zero_are_alternating_sin_cos() {
        let f = sinusoidal_time_features(0.0).unwrap();
        assert_eq!(f.len(), TIME_FEATURES);
        for pair in f.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn distinct_times_give_distinct_features() {
        let a = sinusoidal_time_features(0.25).unwrap();
        let b = sinusoidal_time_features(0.75).unwrap();
        assert_ne!(a, b);
    }
}
