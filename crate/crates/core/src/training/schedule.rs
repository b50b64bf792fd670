use std::f64::consts::PI;

use crate::config::StageConfig;
use crate::error::{Error, Result};

/// Number of linear warmup steps, `ceil(ratio · total)`.
pub fn warmup_steps(cfg: &StageConfig) -> usize {
    (cfg.warmup_ratio * cfg.total_steps as f64).ceil() as usize
}

/// Linear warmup from 0 to the peak, then cosine decay to exactly 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Parameter(format!(
            "step {step} outside [0, {}]",
            cfg.total_steps
        )));
    }
    let w = warmup_steps(cfg);
    if step < w {
        return Ok(cfg.peak_lr * step as f64 / w as f64);
    }
    let span = (cfg.total_steps - w) as f64;
    if span == 0.0 {
        return Ok(cfg.peak_lr);
    }
    let progress = (step - w) as f64 / span;
    Ok(cfg.peak_lr * (1.0 + (PI * progress).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(peak: f64, ratio: f64, steps: usize) -> StageConfig {
        StageConfig {
            stage: 1,
            batch_size: 32,
            peak_lr: peak,
            warmup_ratio: ratio,
            total_steps: steps,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn reference_points() {
        let c = cfg(6e-4, 0.03, 1000);
        assert_eq!(warmup_steps(&c), 30);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(30, &c).unwrap(), 6e-4);
        assert!(lr_at(1000, &c).unwrap().abs() < 1e-20);
        let expect = 6e-4 * (1.0 + (PI * 485.0 / 970.0).cos()) / 2.0;
        assert!((lr_at(515, &c).unwrap() - expect).abs() < 1e-18);
        assert!(lr_at(1001, &c).is_err());
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let c = cfg(1e-3, 0.0, 10);
        assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
    }

    proptest! {
        #[test]
        fn bounded_and_continuous_at_junction(
            peak in 1e-6f64..1.0,
            ratio in 0.0f64..0.5,
            steps in 1usize..5000,
        ) {
            let c = cfg(peak, ratio, steps);
            let w = warmup_steps(&c);
            if w > 0 && w <= steps {
                // Both pieces evaluate to the peak at the junction.
                let warm = peak * w as f64 / w as f64;
                let cos = lr_at(w, &c).unwrap();
                prop_assert!((warm - cos).abs() < 1e-12);
            }
            for s in [0, steps / 3, steps / 2, steps] {
                let lr = lr_at(s, &c).unwrap();
                prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            }
        }

        #[test]
        fn decay_is_monotone(steps in 2usize..2000) {
            let c = cfg(1e-3, 0.03, steps);
            let w = warmup_steps(&c);
            let mut prev = f64::INFINITY;
            for s in w..=steps {
                let lr = lr_at(s, &c).unwrap();
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }
    }
}
