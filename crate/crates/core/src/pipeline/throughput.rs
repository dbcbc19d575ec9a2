use std::collections::VecDeque;

/// Trained-examples rate from `(seconds, cumulative examples)` samples.
#[derive(Debug, Clone)]
pub struct ThroughputMeter {
    window_secs: f64,
    first: Option<(f64, u64)>,
    recent: VecDeque<(f64, u64)>,
}

impl ThroughputMeter {
    pub fn new(window_secs: f64) -> Self {
        ThroughputMeter {
            window_secs,
            first: None,
            recent: VecDeque::new(),
        }
    }

    pub fn record(&mut self, t: f64, cumulative: u64) {
        self.first.get_or_insert((t, cumulative));
        self.recent.push_back((t, cumulative));
        // keep one sample at or before the window start so the window is covered
        while self.recent.len() > 2 && self.recent[1].0 <= t - self.window_secs {
            self.recent.pop_front();
        }
    }

    /// Rate over the trailing window; `None` until the window holds two
    /// samples spanning a positive time.
    pub fn windowed(&self) -> Option<f64> {
        let (&a, &b) = (self.recent.front()?, self.recent.back()?);
        rate(a, b)
    }

    /// Rate since the first sample.
    pub fn cumulative(&self) -> Option<f64> {
        rate(self.first?, *self.recent.back()?)
    }
}

fn rate((t0, n0): (f64, u64), (t1, n1): (f64, u64)) -> Option<f64> {
    let dt = t1 - t0;
    (dt > 0.0).then(|| n1.saturating_sub(n0) as f64 / dt)
}

/// Rate between the first and last sample of a stream.
pub fn throughput_meter(samples: &[(f64, u64)]) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    rate(samples[0], samples[samples.len() - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples_per_second() {
        assert_eq!(throughput_meter(&[(0.0, 0), (10.0, 1280)]), Some(128.0));
        assert_eq!(throughput_meter(&[(5.0, 10)]), None);
        assert_eq!(throughput_meter(&[]), None);
    }

    #[test]
    fn empty_window_emits_nothing() {
        let m = ThroughputMeter::new(5.0);
        assert_eq!(m.windowed(), None);
        assert_eq!(m.cumulative(), None);
        let mut m = ThroughputMeter::new(5.0);
        m.record(1.0, 100);
        assert_eq!(m.windowed(), None);
    }

    #[test]
    fn window_tracks_recent_rate() {
        let mut m = ThroughputMeter::new(10.0);
        for s in 0..=100 {
            // 10/s for the first 50 s, then 100/s
            let n = if s <= 50 { s * 10 } else { 500 + (s - 50) * 100 };
            m.record(s as f64, n);
        }
        assert!((m.windowed().unwrap() - 100.0).abs() < 1e-9);
        assert!((m.cumulative().unwrap() - 55.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn monotone_counter_gives_non_negative_rates(steps in prop::collection::vec((0.0f64..2.0, 0u64..1000), 2..50)) {
            let mut m = ThroughputMeter::new(3.0);
            let (mut t, mut n) = (0.0, 0);
            for (dt, dn) in steps {
                t += dt;
                n += dn;
                m.record(t, n);
                if let Some(r) = m.windowed() { prop_assert!(r >= 0.0 && r.is_finite()); }
                if let Some(r) = m.cumulative() { prop_assert!(r >= 0.0 && r.is_finite()); }
            }
        }
    }
}
