//! Piecewise-linear bandwidth traces.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VabrError;

/// Available bandwidth over time. Between samples the rate is linearly
/// interpolated; before the first and after the last sample it is held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BandwidthTrace {
    Unlimited,
    Piecewise { times_s: Vec<f64>, mbps: Vec<f64> },
}

impl BandwidthTrace {
    pub fn constant(mbps: f64) -> Self {
        BandwidthTrace::Piecewise {
            times_s: vec![0.0],
            mbps: vec![mbps],
        }
    }

    pub fn from_samples(samples: Vec<(f64, f64)>) -> Result<Self, VabrError> {
        if samples.is_empty() {
            return Err(VabrError::Trace {
                line: 0,
                message: "trace has no samples".into(),
            });
        }
        for (i, &(t, r)) in samples.iter().enumerate() {
            let bad = |message: &str| VabrError::Trace {
                line: i + 1,
                message: message.into(),
            };
            if !t.is_finite() || !r.is_finite() {
                return Err(bad("non-finite value"));
            }
            if r < 0.0 {
                return Err(bad("negative bandwidth"));
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(bad("times must strictly increase"));
            }
        }
        let (times_s, mbps) = samples.into_iter().unzip();
        Ok(BandwidthTrace::Piecewise { times_s, mbps })
    }

    /// Parses `time_s,mbps` lines. A header line, blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self, VabrError> {
        let mut samples = Vec::new();
        let mut seen_data = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| VabrError::Trace { line: n + 1, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !seen_data && fields.first().is_some_and(|f| f.starts_with(|c: char| c.is_ascii_alphabetic())) {
                seen_data = true;
                continue;
            }
            seen_data = true;
            if fields.len() != 2 {
                return Err(err(format!("expected 2 fields, found {}", fields.len())));
            }
            let t: f64 = fields[0].parse().map_err(|_| err(format!("bad time {:?}", fields[0])))?;
            let r: f64 = fields[1].parse().map_err(|_| err(format!("bad bandwidth {:?}", fields[1])))?;
            if !t.is_finite() || !r.is_finite() {
                return Err(err("non-finite value".into()));
            }
            if r < 0.0 {
                return Err(err("negative bandwidth".into()));
            }
            if let Some(&(prev, _)) = samples.last() {
                if t <= prev {
                    return Err(err("times must strictly increase".into()));
                }
            }
            samples.push((t, r));
        }
        if samples.is_empty() {
            return Err(VabrError::Trace {
                line: 0,
                message: "trace has no samples".into(),
            });
        }
        Self::from_samples(samples)
    }

    pub fn from_file(path: &Path) -> Result<Self, VabrError> {
        let text = std::fs::read_to_string(path).map_err(|source| VabrError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,mbps\n");
        if let BandwidthTrace::Piecewise { times_s, mbps } = self {
            for (t, r) in times_s.iter().zip(mbps) {
                let _ = writeln!(out, "{t:?},{r:?}");
            }
        }
        out
    }

    pub fn is_unlimited(&self) -> bool {
        matches!(self, BandwidthTrace::Unlimited)
    }

    /// Instantaneous rate in bits per second.
    pub fn rate_bps(&self, t: f64) -> f64 {
        match self {
            BandwidthTrace::Unlimited => f64::INFINITY,
            BandwidthTrace::Piecewise { times_s, mbps } => {
                let i = times_s.partition_point(|&x| x <= t);
                let v = if i == 0 {
                    mbps[0]
                } else if i == times_s.len() {
                    mbps[i - 1]
                } else {
                    let (t0, t1) = (times_s[i - 1], times_s[i]);
                    let (r0, r1) = (mbps[i - 1], mbps[i]);
                    r0 + (r1 - r0) * (t - t0) / (t1 - t0)
                };
                v * 1e6
            }
        }
    }

    /// Breakpoints strictly inside `(t0, t1)`.
    fn knots_between(&self, t0: f64, t1: f64) -> Vec<f64> {
        match self {
            BandwidthTrace::Unlimited => Vec::new(),
            BandwidthTrace::Piecewise { times_s, .. } => times_s.iter().copied().filter(|&t| t > t0 && t < t1).collect(),
        }
    }

    /// Bits the channel can carry over `[t0, t1]`.
    pub fn bits_between(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        if self.is_unlimited() {
            return f64::INFINITY;
        }
        let mut edges = vec![t0];
        edges.extend(self.knots_between(t0, t1));
        edges.push(t1);
        edges
            .windows(2)
            .map(|w| (self.rate_bps(w[0]) + self.rate_bps(w[1])) / 2.0 * (w[1] - w[0]))
            .sum()
    }

    /// Time at which `bits` sent from `t0` finish; infinite if the trace
    /// never supplies enough capacity.
    pub fn finish_time(&self, t0: f64, bits: f64) -> f64 {
        if bits <= 0.0 || self.is_unlimited() {
            return t0;
        }
        let BandwidthTrace::Piecewise { times_s, .. } = self else {
            unreachable!()
        };
        let mut t = t0;
        let mut left = bits;
        for &knot in times_s.iter().filter(|&&k| k > t0) {
            let cap = self.bits_between(t, knot);
            if cap >= left {
                return t + solve_linear_segment(self.rate_bps(t), self.rate_bps(knot), knot - t, left);
            }
            left -= cap;
            t = knot;
        }
        let r = self.rate_bps(t);
        if r <= 0.0 {
            return f64::INFINITY;
        }
        t + left / r
    }

    /// Mean rate in bits per second over each whole second of `[0, secs)`.
    /// Time of the last knot; zero for unlimited or constant traces.
    pub fn span_s(&self) -> f64 {
        match self {
            BandwidthTrace::Unlimited => 0.0,
            BandwidthTrace::Piecewise { times_s, .. } => times_s.last().copied().unwrap_or(0.0),
        }
    }

    pub fn per_second_bps(&self, secs: usize) -> Vec<f64> {
        (0..secs).map(|s| self.bits_between(s as f64, s as f64 + 1.0)).collect()
    }
}

/// Time to send `bits` across a segment whose rate moves linearly from
/// `a` to `b` over `len` seconds, given the segment can carry them.
fn solve_linear_segment(a: f64, b: f64, len: f64, bits: f64) -> f64 {
    let slope = (b - a) / len;
    let disc = (a * a + 2.0 * slope * bits).max(0.0);
    let denom = a + disc.sqrt();
    if denom <= 0.0 {
        return len;
    }
    (2.0 * bits / denom).min(len)
}
