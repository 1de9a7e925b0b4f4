//! Component ablations: disable semantic masking or either distillation
//! term, pretrain each variant from the same seed, and compare
//! frozen-encoder probes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::load_encoder;

use super::pretrain::pretrain;
use super::probe::{featurize, linear_probe, FeatureSource, ProbeConfig};
use super::{PreparedScene, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub semantic_masking: bool,
    pub scene_distill: bool,
    pub object_distill: bool,
}

impl AblationToggles {
    pub fn full() -> Self {
        AblationToggles {
            semantic_masking: true,
            scene_distill: true,
            object_distill: true,
        }
    }

    /// Plain masked autoencoding: uniform masking, no dropping, no
    /// distillation.
    pub fn plain() -> Self {
        AblationToggles {
            semantic_masking: false,
            scene_distill: false,
            object_distill: false,
        }
    }
}

/// The standard grid: the full method, each component removed alone, and
/// the plain baseline.
pub fn standard_rows() -> Vec<(String, AblationToggles)> {
    let full = AblationToggles::full();
    vec![
        ("full".into(), full),
        (
            "no_semantic_masking".into(),
            AblationToggles {
                semantic_masking: false,
                ..full
            },
        ),
        (
            "no_scene_distill".into(),
            AblationToggles {
                scene_distill: false,
                ..full
            },
        ),
        (
            "no_object_distill".into(),
            AblationToggles {
                object_distill: false,
                ..full
            },
        ),
        ("plain".into(), AblationToggles::plain()),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: AblationToggles,
    pub final_l_total: f64,
    pub final_l_mae: f64,
    pub probe_train_accuracy: f64,
    pub probe_eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Pretrains and probes one variant per row, writing per-row run outputs
/// under `out_dir/<row name>` and the collected table to
/// `out_dir/ablation.json`. Rows with identical toggles produce identical
/// numbers because every random choice derives from the shared config
/// seed.
pub fn run_ablation(
    scenes: &[PreparedScene],
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    rows: &[(String, AblationToggles)],
    out_dir: &Path,
) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::Config("ablation needs at least one row".into()));
    }
    if rows.iter().any(|(name, _)| name.is_empty()) {
        return Err(Error::Config("ablation row names must be nonempty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut table = AblationTable {
        rows: Vec::with_capacity(rows.len()),
    };
    for (name, toggles) in rows {
        let mut cfg = train_cfg.clone();
        cfg.semantic_masking = toggles.semantic_masking;
        cfg.scene_distill = toggles.scene_distill;
        cfg.object_distill = toggles.object_distill;
        let row_dir = out_dir.join(name);
        let outcome = pretrain(scenes, &cfg, &row_dir, None)?;
        let (_, encoder) = load_encoder(&outcome.final_checkpoint)?;
        let data = featurize(scenes, FeatureSource::Encoder(&encoder), cfg.exec)?;
        let report = linear_probe(&data, probe_cfg)?;
        let last = outcome.last_record.as_ref();
        table.rows.push(AblationRow {
            name: name.clone(),
            toggles: *toggles,
            final_l_total: last.map_or(f64::NAN, |r| r.l_total),
            final_l_mae: last.map_or(f64::NAN, |r| r.l_mae),
            probe_train_accuracy: report.train_accuracy,
            probe_eval_accuracy: report.eval_accuracy,
        });
    }
    fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{tiny_scenes, tiny_train_config};
    use super::*;
    use tempfile::tempdir;

    fn quick_probe() -> ProbeConfig {
        let mut cfg = ProbeConfig::base();
        cfg.epochs = 5;
        cfg
    }

    #[test]
    fn standard_rows_cover_the_grid() {
        let rows = standard_rows();
        assert_eq!(rows.len(), 5);
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "full",
                "no_semantic_masking",
                "no_scene_distill",
                "no_object_distill",
                "plain"
            ]
        );
        assert_eq!(rows[0].1, AblationToggles::full());
        assert_eq!(rows[4].1, AblationToggles::plain());
        assert!(!rows[1].1.semantic_masking && rows[1].1.scene_distill);
    }

    #[test]
    fn repeated_row_reproduces_identical_numbers() {
        let scenes = tiny_scenes(3);
        let mut train = tiny_train_config();
        train.epochs = 1;
        let rows = vec![
            ("first".to_string(), AblationToggles::full()),
            ("second".to_string(), AblationToggles::full()),
        ];
        let dir = tempdir().unwrap();
        let table = run_ablation(&scenes, &train, &quick_probe(), &rows, dir.path()).unwrap();
        assert_eq!(table.rows.len(), 2);
        let (a, b) = (&table.rows[0], &table.rows[1]);
        assert_eq!(a.final_l_total.to_bits(), b.final_l_total.to_bits());
        assert_eq!(a.final_l_mae.to_bits(), b.final_l_mae.to_bits());
        assert_eq!(
            a.probe_eval_accuracy.to_bits(),
            b.probe_eval_accuracy.to_bits()
        );

        let text = fs::read_to_string(dir.path().join("ablation.json")).unwrap();
        let parsed: AblationTable = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, table);
    }

    #[test]
    fn plain_row_trains_on_reconstruction_alone() {
        let scenes = tiny_scenes(3);
        let mut train = tiny_train_config();
        train.epochs = 1;
        let rows = vec![
            ("full".to_string(), AblationToggles::full()),
            ("plain".to_string(), AblationToggles::plain()),
        ];
        let dir = tempdir().unwrap();
        let table = run_ablation(&scenes, &train, &quick_probe(), &rows, dir.path()).unwrap();
        let full = &table.rows[0];
        let plain = &table.rows[1];
        assert_eq!(plain.final_l_total.to_bits(), plain.final_l_mae.to_bits());
        assert!(full.final_l_total > full.final_l_mae);
    }
}
