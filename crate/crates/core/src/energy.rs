//! Harvested-power curve, storage capacitor with output hysteresis, and the
//! per-operation consumption ledger of a batteryless node.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("distance {distance} m outside harvest model domain [{min}, {max}] m")]
    Domain { distance: f64, min: f64, max: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Distance-to-harvested-power curve through measured anchor points,
/// interpolated linearly in log(distance)/log(power).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestModel {
    /// (distance m, power W), strictly increasing distance and strictly
    /// decreasing power.
    anchors: Vec<(f64, f64)>,
}

impl HarvestModel {
    pub fn new(mut anchors: Vec<(f64, f64)>) -> Result<Self, EnergyError> {
        if anchors.len() < 2 {
            return Err(EnergyError::Parameter("harvest model needs at least two anchors".into()));
        }
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(d, p) in &anchors {
            if !(d > 0.0 && p > 0.0 && d.is_finite() && p.is_finite()) {
                return Err(EnergyError::Parameter(format!("anchor ({d}, {p}) must be positive")));
            }
        }
        for w in anchors.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 >= w[0].1 {
                return Err(EnergyError::Parameter(
                    "anchor powers must strictly decrease with distance".into(),
                ));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.anchors[0].0, self.anchors[self.anchors.len() - 1].0)
    }

    /// Local log-log slope on the segment `seg`.
    fn exponent(&self, seg: usize) -> f64 {
        let (d0, p0) = self.anchors[seg];
        let (d1, p1) = self.anchors[seg + 1];
        (p0 / p1).ln() / (d1 / d0).ln()
    }

    fn eval_segment(&self, seg: usize, distance: f64) -> f64 {
        let (d0, p0) = self.anchors[seg];
        p0 * (d0 / distance).powf(self.exponent(seg))
    }

    pub fn power(&self, distance: f64) -> Result<f64, EnergyError> {
        let (min, max) = self.domain();
        if !(distance >= min && distance <= max) {
            return Err(EnergyError::Domain { distance, min, max });
        }
        Ok(self.power_extrapolated(distance))
    }

    /// Power at `distance` clamped into the model domain.
    pub fn power_clamped(&self, distance: f64) -> f64 {
        let (min, max) = self.domain();
        self.power_extrapolated(distance.clamp(min, max))
    }

    /// Continues the first and last segments as power laws outside the
    /// domain.
    pub fn power_extrapolated(&self, distance: f64) -> f64 {
        if let Some(&(_, p)) = self.anchors.iter().find(|a| a.0 == distance) {
            return p;
        }
        let last = self.anchors.len() - 2;
        let seg = self
            .anchors
            .windows(2)
            .position(|w| distance < w[1].0)
            .unwrap_or(last);
        self.eval_segment(seg, distance)
    }
}

impl Default for HarvestModel {
    /// 3.2 mW at 1 m, 0.79 mW at 3 m, a 36x drop from 1 m to 3.5 m, and the
    /// adjoining power laws continued to 0.3 m and 5 m.
    fn default() -> Self {
        let near = (3.2e-3_f64 / 0.79e-3).ln() / 3.0_f64.ln();
        let p35 = 3.2e-3 / 36.0;
        let far = 36.0_f64.ln() / 3.5_f64.ln();
        let anchors = vec![
            (0.3, 3.2e-3 * (1.0_f64 / 0.3).powf(near)),
            (1.0, 3.2e-3),
            (3.0, 0.79e-3),
            (3.5, p35),
            (5.0, p35 * (3.5_f64 / 5.0).powf(far)),
        ];
        Self::new(anchors).expect("default anchors are monotone")
    }
}

pub fn harvested_power(distance: f64, model: &HarvestModel) -> Result<f64, EnergyError> {
    model.power(distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    Tx,
    Rx,
    Adc,
    Sleep,
}

impl OpClass {
    pub const ALL: [OpClass; 4] = [OpClass::Tx, OpClass::Rx, OpClass::Adc, OpClass::Sleep];

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Tx => "tx",
            OpClass::Rx => "rx",
            OpClass::Adc => "adc",
            OpClass::Sleep => "sleep",
        }
    }
}

/// Per-operation power draw of a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerProfile {
    pub p_tx: f64,
    pub t_tx: f64,
    pub p_rx: f64,
    pub p_adc: f64,
    pub t_adc: f64,
    pub p_sleep: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            p_tx: 35.88e-3,
            t_tx: 0.80e-3,
            p_rx: 20.17e-3,
            p_adc: 1.69e-3,
            t_adc: 0.65e-3,
            p_sleep: 0.14e-3,
        }
    }
}

impl PowerProfile {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let all = [self.p_tx, self.t_tx, self.p_rx, self.p_adc, self.t_adc, self.p_sleep];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(EnergyError::Parameter("power profile values must be positive".into()));
        }
        if !(self.p_sleep < self.p_adc && self.p_adc < self.p_rx && self.p_rx < self.p_tx) {
            return Err(EnergyError::Parameter(
                "power profile must satisfy p_sleep < p_adc < p_rx < p_tx".into(),
            ));
        }
        Ok(())
    }

    pub fn power(&self, op: OpClass) -> f64 {
        match op {
            OpClass::Tx => self.p_tx,
            OpClass::Rx => self.p_rx,
            OpClass::Adc => self.p_adc,
            OpClass::Sleep => self.p_sleep,
        }
    }

    /// Energy of one reply round: one receive slot, one transmission and one
    /// ADC sample at their nominal durations.
    pub fn reply_round_energy(&self, t_rx: f64) -> f64 {
        self.p_rx * t_rx + self.p_tx * self.t_tx + self.p_adc * self.t_adc
    }
}

/// Energy flows accumulated by one node, all in joules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub tx: f64,
    pub rx: f64,
    pub adc: f64,
    pub sleep: f64,
    pub harvested: f64,
    /// Energy supplied by mains for wired nodes.
    pub supplied: f64,
    /// Harvested energy discarded because the capacitor was full.
    pub clamp_loss: f64,
}

impl EnergyLedger {
    pub fn consumed(&self) -> f64 {
        self.tx + self.rx + self.adc + self.sleep
    }

    pub fn get(&self, op: OpClass) -> f64 {
        match op {
            OpClass::Tx => self.tx,
            OpClass::Rx => self.rx,
            OpClass::Adc => self.adc,
            OpClass::Sleep => self.sleep,
        }
    }

    fn add(&mut self, op: OpClass, joules: f64) {
        match op {
            OpClass::Tx => self.tx += joules,
            OpClass::Rx => self.rx += joules,
            OpClass::Adc => self.adc += joules,
            OpClass::Sleep => self.sleep += joules,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageParams {
    pub capacitance: f64,
    pub v_on: f64,
    pub v_off: f64,
    pub v_max: f64,
    pub v_initial: f64,
}

impl Default for StorageParams {
    fn default() -> Self {
        Self { capacitance: 50e-3, v_on: 1.25, v_off: 1.02, v_max: 1.5, v_initial: 1.5 }
    }
}

impl StorageParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let ok = self.capacitance > 0.0
            && self.v_off > 0.0
            && self.v_off < self.v_on
            && self.v_on <= self.v_max
            && (0.0..=self.v_max).contains(&self.v_initial);
        if ok {
            Ok(())
        } else {
            Err(EnergyError::Parameter(
                "storage needs capacitance > 0 and 0 < v_off < v_on <= v_max, 0 <= v_initial <= v_max".into(),
            ))
        }
    }
}

/// Storage capacitor state. `V_OUT` switches off when the voltage falls
/// below `v_off` and back on once it rises above `v_on`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState {
    params: StorageParams,
    energy: f64,
    enabled: bool,
    ledger: EnergyLedger,
}

/// Brown-out during an operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Depletion {
    /// Time into the operation at which the output switched off.
    pub after: f64,
}

impl EnergyState {
    pub fn new(params: StorageParams) -> Result<Self, EnergyError> {
        params.validate()?;
        let energy = 0.5 * params.capacitance * params.v_initial * params.v_initial;
        Ok(Self { params, energy, enabled: params.v_initial >= params.v_on, ledger: EnergyLedger::default() })
    }

    pub fn params(&self) -> &StorageParams {
        &self.params
    }

    pub fn voltage(&self) -> f64 {
        (2.0 * self.energy / self.params.capacitance).sqrt()
    }

    pub fn stored(&self) -> f64 {
        self.energy
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    fn level(&self, v: f64) -> f64 {
        0.5 * self.params.capacitance * v * v
    }

    /// Energy available above the switch-off level.
    pub fn headroom(&self) -> f64 {
        if self.enabled {
            (self.energy - self.level(self.params.v_off)).max(0.0)
        } else {
            0.0
        }
    }

    /// Integrates `dt` seconds of harvest `p_in` against the loads, which
    /// draw only while the output is enabled. Threshold crossings inside the
    /// step are located exactly. Returns the offset of the first on-to-off
    /// switch, if any.
    pub fn advance(&mut self, p_in: f64, loads: &[(OpClass, f64)], dt: f64) -> Option<f64> {
        let p_load: f64 = loads.iter().map(|l| l.1).sum();
        let e_off = self.level(self.params.v_off);
        let e_on = self.level(self.params.v_on);
        let e_max = self.level(self.params.v_max);
        let mut t = 0.0;
        let mut first_off = None;
        while t < dt {
            let rest = dt - t;
            let draw = if self.enabled { p_load } else { 0.0 };
            let net = p_in - draw;
            // Segment ends at the next switch or at the end of the step.
            let mut seg = rest;
            let mut switch = false;
            if self.enabled && net < 0.0 {
                let to_off = (self.energy - e_off).max(0.0) / -net;
                if to_off < seg {
                    seg = to_off;
                    switch = true;
                }
            } else if !self.enabled && net > 0.0 {
                let to_on = (e_on - self.energy).max(0.0) / net;
                if to_on < seg {
                    seg = to_on;
                    switch = true;
                }
            }
            self.ledger.harvested += p_in * seg;
            if draw > 0.0 {
                for &(op, p) in loads {
                    self.ledger.add(op, p * seg);
                }
            }
            let mut e = self.energy + net * seg;
            if e > e_max {
                self.ledger.clamp_loss += e - e_max;
                e = e_max;
            }
            if e < 0.0 {
                e = 0.0;
            }
            self.energy = e;
            t += seg;
            if switch {
                if self.enabled {
                    self.energy = e_off.min(self.energy);
                    self.enabled = false;
                    first_off.get_or_insert(t);
                } else {
                    self.energy = e_on.max(self.energy);
                    self.enabled = true;
                }
            }
        }
        first_off
    }

    /// Records energy supplied from mains for a wired node; storage stays
    /// untouched.
    pub fn supply(&mut self, loads: &[(OpClass, f64)], dt: f64) {
        for &(op, p) in loads {
            self.ledger.add(op, p * dt);
            self.ledger.supplied += p * dt;
        }
    }

    /// Consumes `power * duration` from storage for `op`. If the headroom
    /// above `v_off` runs out first the output switches off and the returned
    /// depletion carries the brown-out offset.
    pub fn consume_power(&mut self, op: OpClass, power: f64, duration: f64) -> Result<(), Depletion> {
        if duration <= 0.0 {
            return Ok(());
        }
        if !self.enabled {
            return Err(Depletion { after: 0.0 });
        }
        let need = power * duration;
        let head = self.headroom();
        if need <= head {
            self.energy -= need;
            self.ledger.add(op, need);
            Ok(())
        } else {
            self.energy -= head;
            self.ledger.add(op, head);
            self.enabled = false;
            Err(Depletion { after: head / power })
        }
    }

    /// Closed-form audit: initial + inflow - consumption - clamp losses.
    pub fn reconcile(&self, initial_stored: f64) -> f64 {
        let l = &self.ledger;
        initial_stored + l.harvested + l.supplied - l.consumed() - l.clamp_loss - self.energy
    }
}

/// Single-load convenience over [`EnergyState::advance`]; the load is booked
/// as sleep draw.
pub fn step_charge(state: &mut EnergyState, p_in: f64, p_load: f64, dt: f64) -> Result<(), EnergyError> {
    if !(dt > 0.0) {
        return Err(EnergyError::Parameter("dt must be positive".into()));
    }
    state.advance(p_in, &[(OpClass::Sleep, p_load)], dt);
    Ok(())
}

pub fn consume(
    state: &mut EnergyState,
    op: OpClass,
    duration: f64,
    profile: &PowerProfile,
) -> Result<(), Depletion> {
    state.consume_power(op, profile.power(op), duration)
}

pub fn charging_period(e_required: f64, p_harvest: f64) -> Result<f64, EnergyError> {
    if !(p_harvest > 0.0) {
        return Err(EnergyError::Parameter("harvest power must be positive".into()));
    }
    Ok(e_required / p_harvest)
}

/// Harvested-power indication read through the ADC, spending one sample's
/// worth of ADC energy. `noise` adds Gaussian sensor noise with the given
/// standard deviation in watts.
pub fn adc_sample<R: Rng + ?Sized>(
    state: &mut EnergyState,
    p_in: f64,
    profile: &PowerProfile,
    noise: Option<(f64, &mut R)>,
) -> Result<f64, Depletion> {
    consume(state, OpClass::Adc, profile.t_adc, profile)?;
    Ok(match noise {
        Some((sigma, rng)) if sigma > 0.0 => p_in + Normal::new(0.0, sigma).unwrap().sample(rng),
        _ => p_in,
    })
}
