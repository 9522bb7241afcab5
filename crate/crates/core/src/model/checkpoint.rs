//! JSON checkpoints of model parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Architecture, Layout, ModelParams, Partition};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dpdcan-ckpt-1";

/// Named row-major tensors plus the architecture that gives them shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    /// Every tensor, or only the protected (encoder) tensors.
    pub fn from_params(params: &ModelParams, encoder_only: bool) -> Self {
        let tensors = params
            .layout()
            .tensors()
            .iter()
            .filter(|t| !encoder_only || t.partition == Partition::Protected)
            .map(|t| (t.name.clone(), params.values()[t.range()].to_vec()))
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            architecture: params.architecture().clone(),
            tensors,
        }
    }

    pub fn is_encoder_only(&self) -> bool {
        self.tensors.keys().all(|k| k.starts_with("encoder."))
    }

    /// Rebuilds the parameters. Exposed tensors absent from an encoder-only
    /// checkpoint are zero; such a model can encode but not decode meaningfully.
    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("unknown checkpoint format {:?}", self.format)));
        }
        let layout = Arc::new(Layout::new(&self.architecture)?);
        let mut values = vec![0.0; layout.n_params()];
        for t in layout.tensors() {
            match self.tensors.get(&t.name) {
                Some(v) if v.len() == t.len() => values[t.range()].copy_from_slice(v),
                Some(v) => {
                    return Err(Error::data(format!(
                        "tensor {} has {} values, expected {}",
                        t.name,
                        v.len(),
                        t.len()
                    )))
                }
                None if t.partition == Partition::Protected => {
                    return Err(Error::data(format!("checkpoint lacks tensor {}", t.name)))
                }
                None => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| layout.tensor(k).is_none()) {
            return Err(Error::data(format!("unexpected tensor {extra} in checkpoint")));
        }
        ModelParams::from_values(layout, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}
