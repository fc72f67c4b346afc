use serde::{Deserialize, Serialize};

use super::cv::{cross_validate, CvReport, CvSummary};
use super::TrainConfig;
use crate::error::{invalid, Result};
use crate::masking::{MaskMode, Permutation};
use crate::par;
use crate::tsdata::Dataset;

/// The setting varied across arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum AblationAxis {
    Permutation(Vec<Permutation>),
    Factor(Vec<f64>),
    MaskMode(Vec<MaskMode>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Permutation(_) => "permutation",
            Self::Factor(_) => "factor",
            Self::MaskMode(_) => "mask-mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Permutation(v) => v.len(),
            Self::Factor(v) => v.len(),
            Self::MaskMode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Config and label of arm `i`.
    fn arm(&self, base: &TrainConfig, i: usize) -> (TrainConfig, String) {
        let mut cfg = base.clone();
        let label = match self {
            Self::Permutation(v) => {
                cfg.masking.permutation = v[i];
                v[i].to_string()
            }
            Self::Factor(v) => {
                cfg.masking.adjust_factor = v[i];
                v[i].to_string()
            }
            Self::MaskMode(v) => {
                cfg.masking.mode = v[i];
                v[i].to_string()
            }
        };
        (cfg, label)
    }

    /// Parse `--axis`/`--values` pairs such as `factor` / `0,5,10`.
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(invalid("ablation needs at least one value"));
        }
        match axis.to_ascii_lowercase().as_str() {
            "permutation" | "permutations" => Ok(Self::Permutation(
                items.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            )),
            "factor" | "factors" => Ok(Self::Factor(
                items
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| invalid(format!("bad factor {s:?}"))))
                    .collect::<Result<_>>()?,
            )),
            "mask-mode" | "mode" | "mask_mode" => Ok(Self::MaskMode(
                items.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            )),
            other => Err(invalid(format!("unknown ablation axis {other:?} (permutation | factor | mask-mode)"))),
        }
    }
}

/// Test metrics of one fold of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub mae: f64,
    pub mre: Option<f64>,
    pub auc: Option<f64>,
    pub best_epoch: usize,
    pub train_mask_rate: Option<f64>,
    pub test_mask_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub summary: CvSummary,
    pub folds: Vec<FoldRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub config: TrainConfig,
    pub rows: Vec<AblationRow>,
}

fn row(label: String, cv: CvReport) -> AblationRow {
    AblationRow {
        value: label,
        folds: cv
            .folds
            .iter()
            .map(|f| FoldRow {
                fold: f.fold,
                mae: f.result.test.mae,
                mre: f.result.test.mre,
                auc: f.result.test.auc,
                best_epoch: f.result.best_epoch,
                train_mask_rate: f.result.train_mask_rate,
                test_mask_rate: f.result.test_mask_rate,
            })
            .collect(),
        summary: cv.summary,
    }
}

/// One cross-validated run per axis value, all with the same seed.
pub fn ablate(config: &TrainConfig, axis: &AblationAxis, dataset: &Dataset) -> Result<AblationReport> {
    if axis.is_empty() {
        return Err(invalid("ablation axis has no values"));
    }
    let arms: Vec<(TrainConfig, String)> = (0..axis.len()).map(|i| axis.arm(config, i)).collect();
    for (cfg, _) in &arms {
        cfg.validate()?;
    }
    let results = par::map(arms, |(cfg, label)| cross_validate(&cfg, dataset).map(|cv| row(label, cv)));
    Ok(AblationReport {
        axis: axis.clone(),
        config: config.clone(),
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_axes() {
        assert_eq!(AblationAxis::parse("factor", "0, 5,10").unwrap(), AblationAxis::Factor(vec![0.0, 5.0, 10.0]));
        assert_eq!(
            AblationAxis::parse("permutation", "All,Train_only,None").unwrap(),
            AblationAxis::Permutation(vec![Permutation::All, Permutation::TrainOnly, Permutation::None])
        );
        assert_eq!(
            AblationAxis::parse("mask-mode", "legacy,corrected").unwrap(),
            AblationAxis::MaskMode(vec![MaskMode::Legacy, MaskMode::Corrected])
        );
        assert!(AblationAxis::parse("lr", "1").is_err());
        assert!(AblationAxis::parse("factor", "x").is_err());
        assert!(AblationAxis::parse("factor", "").is_err());
    }

    #[test]
    fn axis_json_shape() {
        let a = AblationAxis::Factor(vec![0.0, 5.0]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"axis":"factor","values":[0.0,5.0]}"#);
        assert_eq!(serde_json::from_str::<AblationAxis>(&s).unwrap(), a);
    }
}
