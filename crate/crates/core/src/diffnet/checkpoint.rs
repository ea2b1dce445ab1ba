//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! decimal form, so loading reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Head, LinearPolicy, MlpNet, ParamVector, Policy};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "neural-cert-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub layer_dims: Vec<usize>,
    pub head: Head,
    pub bias: bool,
    pub params: Vec<f64>,
}

impl NetRecord {
    pub fn from_net(net: &MlpNet) -> Self {
        NetRecord {
            layer_dims: net.layer_dims().to_vec(),
            head: net.head(),
            bias: net.has_bias(),
            params: net.params().0,
        }
    }

    pub fn to_net(&self) -> Result<MlpNet> {
        let mut net = MlpNet::zeros(&self.layer_dims, self.head, self.bias)?;
        net.set_params(&ParamVector(self.params.clone()))
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit layer_dims: {e}")))?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyRecord {
    Linear { gain: Vec<Vec<f64>> },
    Mlp { net: NetRecord },
}

impl PolicyRecord {
    pub fn from_policy(p: &Policy) -> Self {
        match p {
            Policy::Linear(l) => PolicyRecord::Linear { gain: l.rows() },
            Policy::Mlp(net) => PolicyRecord::Mlp {
                net: NetRecord::from_net(net),
            },
        }
    }

    pub fn to_policy(&self) -> Result<Policy> {
        Ok(match self {
            PolicyRecord::Linear { gain } => Policy::Linear(LinearPolicy::from_rows(gain)?),
            PolicyRecord::Mlp { net } => Policy::Mlp(net.to_net()?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub system: String,
    pub iteration: u64,
    pub barrier: NetRecord,
    pub lyapunov: NetRecord,
    pub policy: PolicyRecord,
}

impl Checkpoint {
    pub fn new(system: &str, iteration: u64, barrier: &MlpNet, lyapunov: &MlpNet, policy: &Policy) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            system: system.to_string(),
            iteration,
            barrier: NetRecord::from_net(barrier),
            lyapunov: NetRecord::from_net(lyapunov),
            policy: PolicyRecord::from_policy(policy),
        }
    }

    pub fn to_string_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string_pretty()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn networks(&self) -> Result<(MlpNet, MlpNet, Policy)> {
        let b = self.barrier.to_net()?;
        let v = self.lyapunov.to_net()?;
        let p = self.policy.to_policy()?;
        if b.head() != Head::Scalar || v.head() != Head::Quadratic {
            return Err(Error::Checkpoint(
                "barrier must be scalar-head, lyapunov quadratic".into(),
            ));
        }
        Ok((b, v, p))
    }
}
