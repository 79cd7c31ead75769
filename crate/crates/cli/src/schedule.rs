/// Reduce-on-plateau learning rate driven by epoch-mean losses.
///
/// An epoch improves when its mean is strictly below the best seen so far.
/// After `patience` consecutive non-improving epochs the rate is multiplied
/// by `factor`, clamped at `floor`, and the counter restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    floor: f64,
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, floor: f64, patience: usize) -> Self {
        Self { lr: lr.max(floor), factor, floor, patience: patience.max(1), best: None, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Consecutive epochs without improvement since the last reset.
    pub fn stale_epochs(&self) -> usize {
        self.stale
    }

    /// Feeds one completed epoch's mean loss and returns the rate for the next epoch.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        match self.best {
            Some(b) if !(epoch_loss < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.floor);
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(epoch_loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after each epoch of `losses`, starting from `lr`.
pub fn lr_trace(losses: &[f64], lr: f64, factor: f64, floor: f64, patience: usize) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr, factor, floor, patience);
    losses.iter().map(|&l| s.step(l)).collect()
}
