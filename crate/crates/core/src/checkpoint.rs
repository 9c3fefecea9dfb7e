//! Lossless JSON snapshots of all policy particles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::net::{NetSpec, ParamVector};
use crate::policy::GaussianPolicy;

pub const FORMAT: &str = "svpg-params";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Number of completed iterations.
    pub iteration: usize,
    pub spec: NetSpec,
    /// Entries after the network block in each particle (the log standard
    /// deviations).
    pub extra_len: usize,
    pub seeds: Vec<u64>,
    pub particles: Vec<ParamVector>,
}

impl Checkpoint {
    pub fn new(iteration: usize, policies: &[GaussianPolicy], seeds: &[u64]) -> Result<Self> {
        let first = policies.first().ok_or(Error::Empty("policies"))?;
        check_len("checkpoint seeds", policies.len(), seeds.len())?;
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            iteration,
            spec: first.spec().clone(),
            extra_len: first.action_dim(),
            seeds: seeds.to_vec(),
            particles: policies.iter().map(|p| p.params.clone()).collect(),
        })
    }

    pub fn policies(&self) -> Result<Vec<GaussianPolicy>> {
        self.particles
            .iter()
            .enumerate()
            .map(|(i, p)| GaussianPolicy::from_params(self.spec.clone(), p.clone()).map_err(|e| e.in_particle(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint format {:?} version {}",
                ck.format, ck.version
            )));
        }
        // Re-validate the architecture, which deserialization does not do.
        NetSpec::new(ck.spec.layer_sizes().to_vec(), ck.spec.activations().to_vec())
            .map_err(|e| bad(e.to_string()))?;
        if ck.extra_len != ck.spec.output_size() || ck.seeds.len() != ck.particles.len() {
            return Err(bad("inconsistent checkpoint header".into()));
        }
        ck.policies().map_err(|e| bad(e.to_string()))?;
        Ok(ck)
    }
}
