//! Masking schedules and the forward corruption process.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::denoiser::MaskedSeq;
use crate::error::{Error, Result};

/// Monotone schedule alpha(t) with alpha(0) = 1 and alpha(1) = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Schedule {
    /// alpha(t) = 1 - t, alpha'(t) = -1 exactly.
    Linear,
    /// alpha(t) = cos(pi t / 2).
    CosineLike,
    /// Piecewise-linear interpolation of (t, alpha) pairs.
    Table(ScheduleTable),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleTable {
    points: Vec<(f64, f64)>,
}

impl ScheduleTable {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("schedule table", "need at least two points"));
        }
        if points.first() != Some(&(0.0, 1.0)) || points.last().map(|p| p.0) != Some(1.0) || points.last().map(|p| p.1) != Some(0.0) {
            return Err(Error::invalid("schedule table", "must start at (0, 1) and end at (1, 0)"));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 >= w[0].1 {
                return Err(Error::invalid("schedule table", "t must be increasing and alpha strictly decreasing"));
            }
        }
        Ok(ScheduleTable { points })
    }

    fn segment(&self, t: f64) -> (&(f64, f64), &(f64, f64)) {
        let idx = self
            .points
            .windows(2)
            .position(|w| t < w[1].0)
            .unwrap_or(self.points.len() - 2);
        (&self.points[idx], &self.points[idx + 1])
    }
}

impl Schedule {
    /// Parse a config key: `linear`, `cosine`, or `table:<path>`.
    pub fn from_key(key: &str) -> Result<Self> {
        match key {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::CosineLike),
            other => match other.strip_prefix("table:") {
                Some(path) => Schedule::from_table_file(Path::new(path)),
                None => Err(Error::invalid("schedule key", format!("unknown schedule `{other}`"))),
            },
        }
    }

    /// Read `(t, alpha)` pairs from a two-column text file.
    pub fn from_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let parse = |v: Option<&str>| -> Result<f64> {
                v.and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected two floats".into() })
            };
            points.push((parse(cols.next())?, parse(cols.next())?));
        }
        Ok(Schedule::Table(ScheduleTable::new(points)?))
    }

    pub fn alpha(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::CosineLike => (std::f64::consts::FRAC_PI_2 * t).cos(),
            Schedule::Table(table) => {
                let (a, b) = table.segment(t);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
        }
    }

    pub fn alpha_prime(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::CosineLike => -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin(),
            Schedule::Table(table) => {
                let (a, b) = table.segment(t);
                (b.1 - a.1) / (b.0 - a.0)
            }
        }
    }

    /// Conditional keep probability alpha(t) / alpha(s) for s < t.
    pub fn alpha_cond(&self, t: f64, s: f64) -> Result<f64> {
        debug_assert!(s < t);
        let alpha_s = self.alpha(s);
        if alpha_s == 0.0 {
            return Err(Error::DegenerateSchedule(s));
        }
        Ok(self.alpha(t) / alpha_s)
    }

    /// Weight multiplying the masked-token cross-entropy at time t:
    /// -alpha'(t) / (1 - alpha(t)). For the linear schedule this is 1/t.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        if t <= 0.0 {
            return Err(Error::DegenerateWeight);
        }
        Ok(-self.alpha_prime(t) / (1.0 - self.alpha(t)))
    }
}

/// Independently keep each token with probability alpha(t), else replace it
/// with MASK. One uniform draw per position, left to right.
pub fn forward_mask(seq: &[TokenId], vocab: &Vocab, schedule: &Schedule, t: f64, rng_seed: u64) -> MaskedSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    forward_mask_with(seq, vocab, schedule.alpha(t), t, &mut rng)
}

/// Forward corruption with an explicit keep probability and rng. Used by the
/// training loop so that all draws come from one seeded stream.
pub fn forward_mask_with(seq: &[TokenId], vocab: &Vocab, keep_prob: f64, t: f64, rng: &mut impl Rng) -> MaskedSeq {
    let mut tokens = Vec::with_capacity(seq.len());
    let mut masked = Vec::with_capacity(seq.len());
    for &tok in seq {
        debug_assert!(vocab.is_clean(tok));
        let keep = rng.gen::<f64>() < keep_prob;
        if keep {
            tokens.push(tok);
            masked.push(false);
        } else {
            tokens.push(vocab.mask_id());
            masked.push(true);
        }
    }
    MaskedSeq::from_parts(tokens, masked, t)
}

/// Continue corrupting an already-masked state from its time to a later t,
/// keeping each still-clean token with probability alpha(t)/alpha(s). Masked
/// positions stay masked (absorbing).
pub fn forward_mask_compose(state: &MaskedSeq, vocab: &Vocab, schedule: &Schedule, t: f64, rng: &mut impl Rng) -> Result<MaskedSeq> {
    let keep = schedule.alpha_cond(t, state.t())?;
    let mut tokens = state.tokens().to_vec();
    let mut masked = state.masked().to_vec();
    for j in 0..tokens.len() {
        if !masked[j] && rng.gen::<f64>() >= keep {
            tokens[j] = vocab.mask_id();
            masked[j] = true;
        }
    }
    Ok(MaskedSeq::from_parts(tokens, masked, t))
}
