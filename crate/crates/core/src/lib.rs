//! Localization with batteryless RF-harvesting anchors.
//!
//! - [`codec`]: Hadamard spreading and FEC for superposable ID replies.
//! - [`energy`]: harvest model, power profile and capacitor storage.
//! - [`radio`]: pathloss with shadowing and capture resolution.
//! - [`protocol`]: frames and the per-role state machines.
//! - [`analysis`]: closed-form accuracy and energy trade-offs.
//! - [`sim`]: discrete-event simulator, metrics and traces.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod codec;
pub mod energy;
pub mod protocol;
pub mod radio;
pub mod sim;

pub use codec::{Codebooks, EncodedPayload};
pub use energy::{EnergyLedger, EnergyState, HarvestModel, OpClass, PowerProfile, StorageParams};
pub use protocol::{Mode, Packet, PacketKind, Timing};
pub use radio::RadioParams;
pub use sim::{run_scenario, RunOptions, RunOutput, ScenarioConfig};
