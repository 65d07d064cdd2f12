use core::f64::consts::PI;

/// Cosine-annealed learning rate, `base · (1 + cos(π e / T)) / 2`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + libm::cos(PI * t))
}

/// Teacher-forcing reset interval growing from `reset_min` to `reset_max`
/// along the same cosine curve.
pub fn teacher_forcing_interval(epoch: usize, total: usize, reset_min: usize, reset_max: usize) -> usize {
    let (lo, hi) = (reset_min as f64, reset_max as f64);
    if total == 0 {
        return reset_min;
    }
    let t = epoch.min(total) as f64 / total as f64;
    let v = hi - (hi - lo) * 0.5 * (1.0 + libm::cos(PI * t));
    libm::round(v) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn reset_interval_endpoints() {
        assert_eq!(teacher_forcing_interval(0, 100, 60, 200), 60);
        assert_eq!(teacher_forcing_interval(100, 100, 60, 200), 200);
        assert_eq!(teacher_forcing_interval(50, 100, 60, 200), 130);
    }

    #[test]
    fn reset_interval_monotone() {
        let mut last = 0;
        for e in 0..=37 {
            let i = teacher_forcing_interval(e, 37, 60, 200);
            assert!(i >= last);
            last = i;
        }
    }
}
