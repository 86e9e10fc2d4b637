//! Plateau learning-rate schedule and early stopping on a maximized metric.

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 4, factor: 0.5 }
    }
}

/// Halves (by `factor`) the rate once `patience` consecutive epochs fail to
/// strictly improve on the best value; the count restarts after each cut.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self { cfg, lr, best: f64::NEG_INFINITY, bad_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric; returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr *= self.cfg.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without strict
/// improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, bad_epochs: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn step(&mut self, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

/// Learning rate used in each epoch, and the epoch after which training
/// stops, for a scripted metric sequence.
pub fn simulate(lr: f64, plateau: PlateauConfig, stop_patience: usize, metrics: &[f64]) -> (Vec<f64>, Option<usize>) {
    let mut sched = ReduceOnPlateau::new(lr, plateau);
    let mut stop = EarlyStopping::new(stop_patience);
    let mut lrs = Vec::new();
    for (epoch, &m) in metrics.iter().enumerate() {
        lrs.push(sched.lr());
        sched.step(m);
        if stop.step(m).1 {
            return (lrs, Some(epoch));
        }
    }
    (lrs, None)
}
