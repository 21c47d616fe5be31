use std::time::Instant;

use sortsimul_core::streaming::Clock;

/// Wall-clock time since the stream started.
#[derive(Debug)]
pub struct MonotonicClock {
    start: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn start(&mut self) {
        self.start = Instant::now();
    }

    fn elapsed_ms(&mut self, _reads: usize) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_decreasing() {
        let mut c = MonotonicClock::new();
        c.start();
        let a = c.elapsed_ms(0);
        let b = c.elapsed_ms(0);
        assert!(a >= 0.0 && b >= a);
    }
}
