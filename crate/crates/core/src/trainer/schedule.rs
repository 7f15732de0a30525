/// Number of instances left for the actor at the start of an episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Curriculum {
    remaining: usize,
    step: usize,
    cap: usize,
}

impl Curriculum {
    pub fn new(start: usize, step: usize, cap: usize) -> Self {
        assert!(start >= 1 && step >= 1 && cap >= 1);
        Curriculum {
            remaining: start.min(cap),
            step,
            cap,
        }
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn at_cap(&self) -> bool {
        self.remaining == self.cap
    }

    /// Grows by one step, capped. Returns false when already at the cap.
    pub fn extend(&mut self) -> bool {
        if self.at_cap() {
            return false;
        }
        self.remaining = (self.remaining + self.step).min(self.cap);
        true
    }
}

/// Detects `patience` consecutive observations without a new best.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    best: f64,
    since: usize,
    patience: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            best: f64::NEG_INFINITY,
            since: 0,
            patience,
        }
    }

    /// Records `value`; true once the plateau condition holds.
    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }

    pub fn reset_counter(&mut self) {
        self.since = 0;
    }
}
