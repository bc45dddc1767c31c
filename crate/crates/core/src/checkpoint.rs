//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceMethod;
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::network::ScoreNetwork;
use crate::optim::AdamState;
use crate::proposal::TimeProposal;
use crate::sde::PathConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub manifold: Manifold,
    pub path: PathConfig,
    pub divergence: DivergenceMethod,
    pub network: ScoreNetwork,
    pub optimizer: AdamState,
    pub proposal: TimeProposal,
    /// Completed training steps.
    pub step: u64,
    pub seed: u64,
    /// SHA-256 of the run configuration that produced this checkpoint.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})", self.format)));
        }
        self.manifold.validated()?;
        self.path.validate()?;
        self.network.config.validate()?;
        if self.network.config.ambient_dim != self.manifold.ambient_dim() {
            return Err(Error::Config("checkpoint network does not match its manifold".into()));
        }
        let lens = self.network.config.tensor_lengths();
        if lens.len() != self.network.params.len() || lens.iter().zip(&self.network.params).any(|(l, p)| *l != p.len()) {
            return Err(Error::Config("checkpoint parameter shapes do not match the network configuration".into()));
        }
        if (self.proposal.horizon - self.path.horizon).abs() > 1e-12 * self.path.horizon {
            return Err(Error::Config("checkpoint proposal horizon differs from the path horizon".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let c: Checkpoint = serde_json::from_reader(r)?;
        c.validate()?;
        Ok(c)
    }
}
