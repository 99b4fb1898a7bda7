//! Checkpoints: parameters in a PSTB container plus a JSON sidecar holding the
//! model configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{ModelConfig, ModelParams, Tacoformer};
use crate::preprocess::pstb;
use crate::tensor::Tensor;

const FORMAT: &str = "tacoformer-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    model: ModelConfig,
}

/// `model.pstb` -> `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams<Tensor>) -> Result<()> {
    let entries: Vec<(String, Tensor)> = params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    pstb::save(path, &entries)?;
    let sidecar = Sidecar {
        format: FORMAT.into(),
        version: 1,
        model: config.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(io_err(&side))
}

pub fn load_checkpoint(path: &Path) -> Result<(Tacoformer, ModelParams<Tensor>)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.format != FORMAT || sidecar.version != 1 {
        return Err(Error::Malformed {
            path: side,
            reason: format!("unsupported checkpoint {} v{}", sidecar.format, sidecar.version),
        });
    }
    let model = Tacoformer::new(sidecar.model)?;
    // Any seed yields the right inventory; values are replaced below.
    let template = model.init_params(0);
    let entries = pstb::load(path)?;
    let params = ModelParams::from_named(&template, &entries).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((model, params))
}
