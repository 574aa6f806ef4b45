//! Trace-shaped reliable ordered channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vabr::BandwidthTrace;

pub const DEFAULT_PROPAGATION_S: f64 = 0.020;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub trace: BandwidthTrace,
    pub propagation_s: f64,
    /// Probability that one transmission attempt is lost.
    pub loss_rate: f64,
    pub seed: u64,
}

impl ChannelModel {
    pub fn new(trace: BandwidthTrace) -> Self {
        ChannelModel {
            trace,
            propagation_s: DEFAULT_PROPAGATION_S,
            loss_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_propagation(mut self, s: f64) -> Self {
        self.propagation_s = s;
        self
    }

    pub fn with_loss(mut self, rate: f64, seed: u64) -> Self {
        self.loss_rate = rate;
        self.seed = seed;
        self
    }
}

/// Timing of one delivered message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub send_s: f64,
    /// When the link started serving the first attempt.
    pub start_s: f64,
    /// When the last (successful) attempt left the link.
    pub finish_s: f64,
    pub arrival_s: f64,
    pub bits: u64,
    pub attempts: u32,
}

/// Stateful FIFO link. A lost attempt still occupies the link for its
/// service time and is resent after one round trip.
#[derive(Debug, Clone)]
pub struct Channel {
    pub model: ChannelModel,
    busy_until: f64,
    last_send: f64,
    rng: ChaCha8Rng,
    /// (start, finish, bits) of every attempt served.
    pub attempts: Vec<(f64, f64, u64)>,
    pub record_attempts: bool,
}

impl Channel {
    pub fn new(model: ChannelModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Channel {
            model,
            busy_until: f64::NEG_INFINITY,
            last_send: f64::NEG_INFINITY,
            rng,
            attempts: Vec::new(),
            record_attempts: false,
        }
    }

    /// Time the link next becomes idle.
    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    /// Queues `bits` at `send_s`. Send times must not decrease.
    pub fn send(&mut self, send_s: f64, bits: u64) -> Delivery {
        assert!(send_s >= self.last_send, "send times must not decrease");
        self.last_send = send_s;
        let mut start = send_s.max(self.busy_until);
        let first_start = start;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let finish = self.model.trace.finish_time(start, bits as f64);
            if self.record_attempts {
                self.attempts.push((start, finish, bits));
            }
            let lost = self.model.loss_rate > 0.0 && self.rng.random::<f64>() < self.model.loss_rate;
            if !lost || !finish.is_finite() {
                self.busy_until = finish;
                return Delivery {
                    send_s,
                    start_s: first_start,
                    finish_s: finish,
                    arrival_s: finish + self.model.propagation_s,
                    bits,
                    attempts,
                };
            }
            // loss is noticed one round trip after the attempt left the link
            start = finish + 2.0 * self.model.propagation_s;
            self.busy_until = finish;
        }
    }
}

/// Arrival times for messages `(send_s, bits)` sent in order.
pub fn simulate_delivery(messages: &[(f64, u64)], model: &ChannelModel) -> Vec<Delivery> {
    let mut ch = Channel::new(model.clone());
    messages.iter().map(|&(t, b)| ch.send(t, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_megabit_over_one_mbps() {
        let m = ChannelModel::new(BandwidthTrace::constant(1.0)).with_propagation(0.0);
        let d = simulate_delivery(&[(2.0, 1_000_000)], &m);
        assert!((d[0].arrival_s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn back_to_back_queue_fifo() {
        let m = ChannelModel::new(BandwidthTrace::constant(1.0));
        let d = simulate_delivery(&[(0.0, 500_000), (0.1, 500_000)], &m);
        assert!((d[1].start_s - d[0].finish_s).abs() < 1e-12);
        assert!((d[1].arrival_s - 1.02).abs() < 1e-9);
    }

    #[test]
    fn unlimited_has_only_propagation() {
        let m = ChannelModel::new(BandwidthTrace::Unlimited);
        let d = simulate_delivery(&[(1.0, u64::MAX / 2)], &m);
        assert_eq!(d[0].arrival_s, 1.0 + DEFAULT_PROPAGATION_S);
    }

    #[test]
    fn loss_only_delays() {
        let m = ChannelModel::new(BandwidthTrace::constant(10.0)).with_loss(0.3, 5);
        let msgs: Vec<(f64, u64)> = (0..200).map(|i| (i as f64 * 0.01, 10_000)).collect();
        let lossy = simulate_delivery(&msgs, &m);
        let clean = simulate_delivery(&msgs, &ChannelModel { loss_rate: 0.0, ..m.clone() });
        assert!(lossy.iter().any(|d| d.attempts > 1));
        for (a, b) in lossy.iter().zip(&clean) {
            assert!(a.arrival_s >= b.arrival_s - 1e-12);
        }
        assert!(lossy.windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
    }

    proptest! {
        #[test]
        fn per_second_delivery_never_exceeds_trace(
            rates in prop::collection::vec(0.5f64..20.0, 2..12),
            sizes in prop::collection::vec(1_000u64..400_000, 1..80),
        ) {
            let samples: Vec<(f64, f64)> = rates.iter().enumerate().map(|(i, r)| (i as f64, *r)).collect();
            let trace = BandwidthTrace::from_samples(samples).unwrap();
            let mut ch = Channel::new(ChannelModel::new(trace.clone()));
            ch.record_attempts = true;
            for (i, b) in sizes.iter().enumerate() {
                ch.send(i as f64 * 0.05, *b);
            }
            // bits served inside each second, with service spread at the trace rate
            let end = ch.busy_until().ceil() as usize + 1;
            for s in 0..end {
                let (a, b) = (s as f64, s as f64 + 1.0);
                let served: f64 = ch.attempts.iter().map(|&(st, fi, _)| trace.bits_between(st.max(a), fi.min(b))).sum();
                prop_assert!(served <= trace.bits_between(a, b) * (1.0 + 1e-9) + 1e-6);
            }
            prop_assert!(ch.attempts.windows(2).all(|w| w[1].0 >= w[0].1 - 1e-9));
            for &(st, fi, bits) in &ch.attempts {
                prop_assert!((trace.bits_between(st, fi) - bits as f64).abs() <= 1e-6 * bits as f64);
            }
        }
    }
}
