//! Forward signal models.

pub mod dictionary;
pub mod epg;
pub mod mono_exp;

use serde::{Deserialize, Serialize};

use crate::error::{QfitError, Result};

pub use dictionary::{generate_dictionary, Dictionary, DictionaryGrid};
pub use epg::{default_schedule, epg_fisp, epg_fisp_with_cap, FispSchedule};
pub use mono_exp::{mono_exp, mono_exp_synth, mono_exp_synth_graph, EchoProtocol};

/// Relaxation times in ms, proton density, and proton-density phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueParams {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub m0: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

impl TissueParams {
    pub fn new(t1_ms: f64, t2_ms: f64, m0: f64) -> Self {
        Self {
            t1_ms,
            t2_ms,
            m0,
            phase_rad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1_ms > 0.0 && self.t2_ms > 0.0 && self.m0 >= 0.0) {
            return Err(QfitError::Config(format!(
                "tissue needs t1 > 0, t2 > 0, m0 >= 0, got {self:?}"
            )));
        }
        if self.t2_ms > self.t1_ms {
            return Err(QfitError::Config(format!(
                "tissue t2 {} exceeds t1 {}",
                self.t2_ms, self.t1_ms
            )));
        }
        Ok(())
    }
}
