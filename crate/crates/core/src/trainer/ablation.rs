//! Fusion-mode and position-encoding ablations over several seeds.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate, split, train, ArchConfig, TrainConfig};
use crate::encoding::PosEncMode;
use crate::error::{contract, Result};
use crate::fusion::FusionMode;
use crate::preprocess::instances::InstanceSet;

pub const POSENC_ROWS: [PosEncMode; 2] = [PosEncMode::TwoD, PosEncMode::OneD];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub table: &'static str,
    pub setting: String,
    /// Test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for a single seed).
    pub std: f64,
}

impl AblationCell {
    fn new(table: &'static str, setting: String, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            table,
            setting,
            accuracies,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResults {
    /// One row per fusion mode, at the base position encoding.
    pub fusion: Vec<AblationCell>,
    /// 2-D and 1-D encodings, at the base fusion mode.
    pub posenc: Vec<AblationCell>,
}

impl AblationResults {
    pub fn fusion_mean(&self, mode: FusionMode) -> Option<f64> {
        self.fusion.iter().find(|c| c.setting == mode.name()).map(|c| c.mean)
    }

    pub fn posenc_mean(&self, mode: PosEncMode) -> Option<f64> {
        self.posenc.iter().find(|c| c.setting == mode.to_string()).map(|c| c.mean)
    }

    pub fn cells(&self) -> impl Iterator<Item = &AblationCell> {
        self.fusion.iter().chain(&self.posenc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,setting,mean,std,seeds,accuracies\n");
        for c in self.cells() {
            let accs: Vec<String> = c.accuracies.iter().map(|a| format!("{a:?}")).collect();
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{},{}",
                c.table,
                c.setting,
                c.mean,
                c.std,
                c.accuracies.len(),
                accs.join(";")
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [("fusion module", &self.fusion), ("position encoding", &self.posenc)] {
            let _ = writeln!(out, "{title:<20} accuracy (mean ± std)");
            for c in rows {
                let _ = writeln!(out, "  {:<18} {:.4} ± {:.4}", c.setting, c.mean, c.std);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per (setting, seed). For each seed the split, the
/// initialisation seed and the batch order are shared by every setting.
pub fn run_ablation(
    data: &InstanceSet,
    base_arch: &ArchConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
    mut progress: Option<&mut dyn FnMut(&str)>,
) -> Result<AblationResults> {
    if seeds.is_empty() {
        return Err(contract("ablation needs at least one seed"));
    }
    let mut settings: Vec<(FusionMode, PosEncMode)> =
        FusionMode::ALL.iter().map(|&f| (f, base_arch.posenc)).collect();
    for p in POSENC_ROWS {
        if !settings.contains(&(base_arch.fusion, p)) {
            settings.push((base_arch.fusion, p));
        }
    }
    let mut acc: HashMap<(FusionMode, PosEncMode), Vec<f64>> = HashMap::new();
    for &seed in seeds {
        let (tr, te) = split(data, base_train.split_ratio, seed, base_train.split_mode)?;
        for &(fusion, posenc) in &settings {
            let arch = ArchConfig {
                fusion,
                posenc,
                ..base_arch.clone()
            };
            let cfg = TrainConfig {
                seed,
                ..base_train.clone()
            };
            let model = arch.model_for(&tr)?;
            let out = train(&model, &tr, None, &cfg, None)?;
            let m = evaluate(&model, &out.params, &te, cfg.execution, cfg.chunk_size)?;
            if let Some(p) = progress.as_deref_mut() {
                p(&format!("seed {seed} fusion {fusion} posenc {posenc}: test accuracy {:.4}", m.accuracy));
            }
            acc.entry((fusion, posenc)).or_default().push(m.accuracy);
        }
    }
    let fusion = FusionMode::ALL
        .iter()
        .map(|&f| AblationCell::new("fusion", f.name().to_string(), acc[&(f, base_arch.posenc)].clone()))
        .collect();
    let posenc = POSENC_ROWS
        .iter()
        .map(|&p| AblationCell::new("posenc", p.to_string(), acc[&(base_arch.fusion, p)].clone()))
        .collect();
    Ok(AblationResults { fusion, posenc })
}
