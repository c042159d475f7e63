use serde::{Deserialize, Serialize};

/// Reduce-on-plateau learning-rate schedule.
///
/// The first observation sets the reference loss. After that, an epoch counts
/// as stale unless it beats the best loss so far by more than `threshold`;
/// `patience` consecutive stale epochs multiply the rate by `factor` and
/// restart the count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    best: Option<f64>,
    stale: usize,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self { lr, factor, patience, threshold, best: None, stale: 0, reductions: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Feeds one validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if !(loss < b - self.threshold) => self.stale += 1,
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.reductions += 1;
            self.stale = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_loss_reduces_after_patience_stale_epochs() {
        let mut s = PlateauScheduler::new(5e-4, 0.25, 5, 1e-4);
        let fired: Vec<bool> = (0..12).map(|_| s.observe(0.7)).collect();
        assert_eq!(fired.iter().position(|&f| f), Some(5));
        assert_eq!(fired.iter().filter(|&&f| f).count(), 2);
        assert_eq!(s.lr(), 5e-4 * 0.25 * 0.25);
    }

    #[test]
    fn sub_threshold_gains_are_stale() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2, 1e-4);
        s.observe(1.0);
        assert!(!s.observe(1.0 - 5e-5));
        assert!(s.observe(1.0 - 9e-5));
        assert!(!s.observe(0.5));
        assert_eq!(s.lr(), 0.5);
    }

    proptest! {
        #[test]
        fn lr_follows_reduction_count(losses in proptest::collection::vec(0.0f64..1.0, 1..60), patience in 1usize..6) {
            let mut s = PlateauScheduler::new(5e-4, 0.25, patience, 1e-4);
            let mut prev = s.lr();
            for l in losses {
                s.observe(l);
                prop_assert!(s.lr() <= prev);
                prop_assert_eq!(s.lr(), 5e-4 * 0.25f64.powi(s.reductions() as i32));
                prev = s.lr();
            }
        }
    }
}
