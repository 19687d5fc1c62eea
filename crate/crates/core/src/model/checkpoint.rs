use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::graph::Model;
use super::params::ParamSet;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "csim-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    version: u32,
    seed: u64,
    config: ModelConfig,
    params: Vec<StoredParam>,
}

/// Serialize the model to the JSON checkpoint text.
pub fn to_json(model: &Model) -> String {
    let stored = Stored {
        format: FORMAT.into(),
        version: VERSION,
        seed: model.seed(),
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| StoredParam {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&stored).expect("checkpoint serializes")
}

/// Parse checkpoint text; `origin` names the source in error messages.
pub fn from_json(text: &str, origin: &Path) -> Result<Model> {
    let bad = |d: String| Error::format(origin, d);
    let stored: Stored = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if stored.format != FORMAT {
        return Err(bad(format!("not a checkpoint (format tag {:?})", stored.format)));
    }
    if stored.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", stored.version)));
    }
    let mut params = ParamSet::new();
    for p in stored.params {
        let t = Tensor::new(p.shape, p.values).map_err(|e| bad(format!("parameter {}: {e}", p.name)))?;
        if params.insert(p.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate parameter {}", p.name)));
        }
    }
    Model::from_parts(stored.config, stored.seed, params).map_err(|e| bad(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}
