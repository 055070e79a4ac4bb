//! Plateau learning-rate decay driven by train PSNR.

use diffcore::Adam;

use super::config::TrainConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    pub best: f64,
    /// Observations since `best` last improved.
    pub stall: usize,
    pub events: usize,
    /// Product of the applied decay factors.
    pub scale: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            patience: cfg.patience,
            factor: cfg.lr_decay,
            floor: cfg.lr_floor,
            best: f64::NEG_INFINITY,
            stall: 0,
            events: 0,
            scale: 1.0,
        }
    }

    /// Records one PSNR value; true when the learning rates should decay.
    pub fn observe(&mut self, psnr: f64) -> bool {
        if psnr > self.best {
            self.best = psnr;
            self.stall = 0;
            return false;
        }
        self.stall += 1;
        if self.stall >= self.patience {
            self.stall = 0;
            self.events += 1;
            self.scale *= self.factor;
            return true;
        }
        false
    }

    pub fn decayed(&self, lr: f64) -> f64 {
        (lr * self.factor).max(self.floor)
    }

    pub fn apply(&self, optimizers: &mut [Adam]) -> Result<()> {
        for o in optimizers {
            let lr = self.decayed(o.lr());
            o.set_lr(lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> PlateauScheduler {
        PlateauScheduler::new(&TrainConfig::full())
    }

    #[test]
    fn improving_never_decays() {
        let mut s = sched();
        assert!((0..5000).all(|i| !s.observe(i as f64)));
    }

    #[test]
    fn flat_run_decays_once() {
        let mut s = sched();
        let events = (0..1001).filter(|_| s.observe(20.0)).count();
        assert_eq!(events, 1);
    }

    #[test]
    fn repeated_stalls_floor_the_rate() {
        let s = sched();
        let mut lr = 5e-4;
        let mut seq = Vec::new();
        for _ in 0..12 {
            lr = s.decayed(lr);
            seq.push(lr);
        }
        for (k, v) in seq.iter().enumerate() {
            let expect = (5e-4 * 0.5f64.powi(k as i32 + 1)).max(1e-6);
            assert_eq!(*v, expect);
        }
        assert_eq!(*seq.last().unwrap(), 1e-6);
    }
}
