use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub min_lr_ratio: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup: 200,
            total: 2000,
            min_lr_ratio: 0.01,
        }
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to
/// `min_lr_ratio · lr` at `total`, constant afterwards.
pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    // Dividing by the inverse ratio keeps the floor exact for ratios like 0.01.
    let floor = s.lr / (1.0 / s.min_lr_ratio);
    if step < s.warmup {
        return s.lr * step as f64 / s.warmup as f64;
    }
    if step == s.warmup {
        return s.lr;
    }
    if step >= s.total {
        return floor;
    }
    let progress = (step - s.warmup) as f64 / (s.total - s.warmup) as f64;
    floor + (s.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule {
            warmup: 2000,
            total: 20_000,
            ..LrSchedule::default()
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(2000, &s), 4e-4);
        assert_eq!(lr_at(20_000, &s), 4e-6);
        assert_eq!(lr_at(50_000, &s), 4e-6);
        assert!((lr_at(1000, &s) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup() {
        let s = LrSchedule::default();
        let a = lr_at(s.warmup - 1, &s);
        let b = lr_at(s.warmup, &s);
        let c = lr_at(s.warmup + 1, &s);
        assert!((b - a) <= s.lr / s.warmup as f64 + 1e-15);
        assert!((b - c).abs() < 1e-9);
    }

    #[test]
    fn monotone_decay() {
        let s = LrSchedule::default();
        let mut prev = f64::INFINITY;
        for t in s.warmup..=s.total {
            let v = lr_at(t, &s);
            assert!(v <= prev);
            prev = v;
        }
    }
}
