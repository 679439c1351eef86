//! Log-distance pathloss with log-normal shadowing, and capture-effect
//! resolution of overlapping transmissions at one receiver.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{EncodedPayload, PAYLOAD_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioParams {
    /// Transmit power, dBm.
    pub p_t: f64,
    /// Pathloss at the reference distance, dB.
    pub l_d0: f64,
    /// Reference distance, m.
    pub d0: f64,
    /// Pathloss exponent.
    pub n: f64,
    /// Shadowing standard deviation, dB.
    pub sigma: f64,
    /// Signal-to-interference margin needed to capture, dB.
    pub capture_threshold: f64,
    /// Arrivals later than this after the first one cannot be captured, s.
    pub preamble_window: f64,
    /// Distances below this are evaluated at it, m.
    pub min_distance: f64,
    /// Weakest decodable signal, dBm.
    pub sensitivity: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            p_t: 0.0,
            l_d0: 40.0,
            d0: 1.0,
            n: 3.0,
            sigma: 7.0,
            capture_threshold: 6.0,
            preamble_window: 8e-6,
            min_distance: 1.0,
            sensitivity: -96.0,
        }
    }
}

impl RadioParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.n > 0.0) {
            errs.push("radio.n must be positive".to_string());
        }
        if !(self.sigma >= 0.0) {
            errs.push("radio.sigma must be non-negative".to_string());
        }
        if !(self.d0 > 0.0) {
            errs.push("radio.d0 must be positive".to_string());
        }
        if !(self.preamble_window > 0.0) {
            errs.push("radio.preamble_window must be positive".to_string());
        }
        if !(self.min_distance > 0.0) {
            errs.push("radio.min_distance must be positive".to_string());
        }
        for (name, v) in [("p_t", self.p_t), ("l_d0", self.l_d0), ("capture_threshold", self.capture_threshold), ("sensitivity", self.sensitivity)] {
            if !v.is_finite() {
                errs.push(format!("radio.{name} must be finite"));
            }
        }
        errs
    }

    pub fn with_tx_power(&self, p_t: f64) -> Self {
        Self { p_t, ..*self }
    }
}

/// Mean received power at `distance`.
pub fn mean_rss(distance: f64, params: &RadioParams) -> f64 {
    let d = distance.max(params.min_distance);
    params.p_t - params.l_d0 - 10.0 * params.n * (d / params.d0).log10()
}

pub fn sample_rss<R: Rng + ?Sized>(distance: f64, params: &RadioParams, rng: &mut R) -> f64 {
    let mean = mean_rss(distance, params);
    if params.sigma > 0.0 {
        mean + Normal::new(0.0, params.sigma).unwrap().sample(rng)
    } else {
        mean
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that a transmitter at `pos_i` is received stronger than one
/// at `pos_j` by a receiver at `pos_rx`, all on a line, with independent
/// shadowing on both links.
pub fn prob_stronger(pos_i: f64, pos_j: f64, pos_rx: f64, params: &RadioParams) -> f64 {
    let diff = mean_rss((pos_rx - pos_i).abs(), params) - mean_rss((pos_rx - pos_j).abs(), params);
    prob_stronger_by(diff, params.sigma)
}

/// `Pr[X >= 0]` for `X ~ N(mean_diff, 2 sigma^2)`.
pub fn prob_stronger_by(mean_diff: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        normal_cdf(mean_diff / (std::f64::consts::SQRT_2 * sigma))
    } else if mean_diff > 0.0 {
        1.0
    } else if mean_diff < 0.0 {
        0.0
    } else {
        0.5
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    pub sender: u32,
    pub payload: EncodedPayload,
    pub start_time: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReceptionKind {
    Clean,
    Captured,
    CollidedCorrupted,
    None,
}

impl ReceptionKind {
    pub fn name(self) -> &'static str {
        match self {
            ReceptionKind::Clean => "clean",
            ReceptionKind::Captured => "captured",
            ReceptionKind::CollidedCorrupted => "collided",
            ReceptionKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptionOutcome {
    pub kind: ReceptionKind,
    pub payload: Option<EncodedPayload>,
    pub winner: Option<u32>,
}

impl ReceptionOutcome {
    pub const NONE: Self = Self { kind: ReceptionKind::None, payload: None, winner: None };
}

/// Resolves what one receiver gets from overlapping transmissions.
///
/// Only transmissions starting within the preamble window of the earliest
/// one can be captured; later ones still add interference. The strongest
/// contender is captured when its margin over the summed linear power of
/// all others reaches the capture threshold. Otherwise the receiver gets a
/// superposition: bits on which every transmission agrees are kept, the
/// rest are drawn with probability proportional to the linear power behind
/// each value. Signals below sensitivity are ignored.
pub fn resolve_reception<R: Rng + ?Sized>(
    transmissions: &[Transmission],
    params: &RadioParams,
    rng: &mut R,
) -> ReceptionOutcome {
    let heard: Vec<&Transmission> = transmissions.iter().filter(|t| t.rss >= params.sensitivity).collect();
    let Some(first) = heard.iter().map(|t| t.start_time).min_by(f64::total_cmp) else {
        return ReceptionOutcome::NONE;
    };
    if heard.len() == 1 {
        let t = heard[0];
        return ReceptionOutcome { kind: ReceptionKind::Clean, payload: Some(t.payload), winner: Some(t.sender) };
    }
    let strongest = heard
        .iter()
        .filter(|t| t.start_time - first <= params.preamble_window)
        .enumerate()
        .max_by(|a, b| a.1.rss.total_cmp(&b.1.rss).then(b.0.cmp(&a.0)))
        .map(|(_, t)| *t)
        .expect("earliest arrival is inside its own window");
    let interference: f64 = heard
        .iter()
        .filter(|t| !std::ptr::eq(**t, strongest))
        .map(|t| dbm_to_mw(t.rss))
        .sum();
    if strongest.rss - mw_to_dbm(interference) >= params.capture_threshold {
        return ReceptionOutcome {
            kind: ReceptionKind::Captured,
            payload: Some(strongest.payload),
            winner: Some(strongest.sender),
        };
    }
    let weights: Vec<f64> = heard.iter().map(|t| dbm_to_mw(t.rss)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = EncodedPayload::zeroed();
    for i in 0..PAYLOAD_BITS {
        let ones: f64 = heard.iter().zip(&weights).filter(|(t, _)| t.payload.bit(i)).map(|(_, w)| w).sum();
        let bit = if ones == 0.0 {
            false
        } else if ones == total {
            true
        } else {
            rng.random::<f64>() * total < ones
        };
        out.set_bit(i, bit);
    }
    ReceptionOutcome { kind: ReceptionKind::CollidedCorrupted, payload: Some(out), winner: None }
}
