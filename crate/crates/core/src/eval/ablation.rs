//! Architecture and input-modality ablations trained on one shared split.

use serde::{Deserialize, Serialize};

use super::{pixel_metrics, MetricsReport};
use crate::error::Result;
use crate::model::{EncoderMode, Modality, ModelConfig, ModelParams};
use crate::raster::PatchDataset;
use crate::train::{predict_samples, train_model, with_target_scaling, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub encoder_mode: EncoderMode,
    pub esbc_enabled: bool,
    pub modalities: Vec<Modality>,
}

impl AblationVariant {
    fn new(name: &str, encoder_mode: EncoderMode, esbc_enabled: bool, modalities: &[Modality]) -> Self {
        Self {
            name: name.into(),
            encoder_mode,
            esbc_enabled,
            modalities: modalities.to_vec(),
        }
    }

    /// `base` with this variant's switches applied.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            encoder_mode: self.encoder_mode,
            esbc_enabled: self.esbc_enabled,
            modalities: self.modalities.clone(),
            input_bands: Vec::new(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub variants: Vec<AblationVariant>,
}

impl Default for AblationGrid {
    /// Four encoder/ESBC variants on all modalities, three modality subsets,
    /// and the full network.
    fn default() -> Self {
        use EncoderMode::*;
        use Modality::*;
        let all = Modality::ALL;
        Self {
            variants: vec![
                AblationVariant::new("shared_plain", Shared, false, &all),
                AblationVariant::new("separate_plain", Separate, false, &all),
                AblationVariant::new("shared_esbc", Shared, true, &all),
                AblationVariant::new("sar_shared_esbc", SarShared, true, &all),
                AblationVariant::new("s2_only", Separate, true, &[Sentinel2]),
                AblationVariant::new("s1_s2", Separate, true, &[Sentinel2, Sentinel1]),
                AblationVariant::new("s1_s2_palsar2", Separate, true, &[Sentinel2, Sentinel1, Palsar2]),
                AblationVariant::new("full", Separate, true, &all),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: Option<MetricsReport>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
    /// Digest of the train/val/test partition the row used.
    pub split_digest: String,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn run_one(v: &AblationVariant, ds: &PatchDataset, base: &ModelConfig, tc: &TrainConfig) -> Result<(MetricsReport, usize)> {
    let (train, val, test) = ds.standardized_splits()?;
    let params = ModelParams::init(&with_target_scaling(&v.apply(base), &train)?)?;
    let (params, history) = train_model(params, &train, &val, tc, |rec| {
        log::info!("ablation {} epoch {} train {:.4} val {:.4}", v.name, rec.epoch, rec.train_loss, rec.val_loss)
    })?;
    let preds = predict_samples(&params, &test)?;
    Ok((pixel_metrics(&test, &preds)?, history.best_epoch))
}

/// Trains every variant from a fresh seeded initialization on the dataset's
/// split and scores it on the test patches. Failures are recorded per row.
/// Rows are sorted by test r² (descending), failed rows last.
pub fn run_ablation(grid: &AblationGrid, ds: &PatchDataset, base: &ModelConfig, tc: &TrainConfig) -> Vec<AblationRow> {
    let digest = ds.split.digest();
    let mut rows: Vec<AblationRow> = grid
        .variants
        .iter()
        .map(|v| match run_one(v, ds, base, tc) {
            Ok((report, best)) => AblationRow {
                name: v.name.clone(),
                report: Some(report),
                best_epoch: Some(best),
                error: None,
                split_digest: digest.clone(),
            },
            Err(e) => {
                log::error!("ablation {} failed: {e}", v.name);
                AblationRow {
                    name: v.name.clone(),
                    report: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                    split_digest: digest.clone(),
                }
            }
        })
        .collect();
    let key = |r: &AblationRow| r.report.and_then(|m| m.r2).unwrap_or(f64::NEG_INFINITY);
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    rows
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    use crate::gedi::opt;
    let mut s = String::from("name,status,n,r2,r2_conventional,rmse,rrmse_pct,best_epoch,split_digest\n");
    for r in rows {
        match &r.report {
            Some(m) => s.push_str(&format!(
                "{},ok,{},{},{},{},{},{},{}\n",
                r.name,
                m.n,
                opt(m.r2),
                opt(m.r2_conventional),
                m.rmse,
                opt(m.rrmse_pct),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                r.split_digest
            )),
            None => s.push_str(&format!("{},failed,,,,,,,{}\n", r.name, r.split_digest)),
        }
    }
    s
}
