//! Volume comparison metrics, the one-image-per-structure evaluation
//! protocol and latent-space scoring.

mod latent;
#[cfg(test)]
mod tests;
mod volume;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypenet::HypeNet;
use crate::phantom::VoxelVolume;
use crate::rng;
use crate::simulate::{backproject_dataset, ParticleDataset, DEFAULT_WIENER_FLOOR};
use crate::tensor::Real;
use crate::train::{centered_hartley, reconstruct_volume};

pub use latent::{knn_classify, pca_reduce, Classification, Pca};
pub use volume::{chamfer, fsc, fsc_auc, fsc_resolution, to_pointcloud, viou, FscCurve, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Density threshold for ground-truth volumes.
    pub gt_threshold: f64,
    /// Density threshold for predicted volumes.
    pub pred_threshold: f64,
    /// Mask both volumes to a ball of radius D/2 before comparing.
    pub mask: bool,
    /// Seed of the image-selection permutation and the classification split.
    pub seed: u64,
    /// PCA target dimension for latent scoring.
    pub pca_dim: usize,
    /// Neighbours for latent classification.
    pub knn: usize,
    /// Also write per-structure FSC curves.
    pub write_curves: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            gt_threshold: 5e-5,
            pred_threshold: 0.1,
            mask: true,
            seed: 0,
            pca_dim: 16,
            knn: 1,
            write_curves: true,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !self.gt_threshold.is_finite() {
            bad.push("metrics.gt_threshold must be finite".to_string());
        }
        if !self.pred_threshold.is_finite() {
            bad.push("metrics.pred_threshold must be finite".to_string());
        }
        if self.pca_dim == 0 {
            bad.push("metrics.pca_dim must be positive".to_string());
        }
        if self.knn == 0 {
            bad.push("metrics.knn must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Produces the reconstruction associated with one dataset image.
pub trait VolumeSource {
    fn volume(&self, ds: &ParticleDataset, image: usize) -> Result<VoxelVolume>;
}

impl<T: Real> VolumeSource for HypeNet<T> {
    fn volume(&self, ds: &ParticleDataset, image: usize) -> Result<VoxelVolume> {
        reconstruct_volume(self, &centered_hartley(ds, image)?, ds.size)
    }
}

/// Returns the ground-truth volume of the image's structure.
pub struct OracleSource<'a>(pub &'a [VoxelVolume]);

impl VolumeSource for OracleSource<'_> {
    fn volume(&self, ds: &ParticleDataset, image: usize) -> Result<VoxelVolume> {
        self.0
            .get(ds.structure_ids[image])
            .cloned()
            .ok_or_else(|| Error::Argument(format!("no volume for structure {}", ds.structure_ids[image])))
    }
}

/// Backprojects every image of the selected image's structure.
pub struct BackprojectSource {
    pub wiener_floor: f64,
}

impl Default for BackprojectSource {
    fn default() -> Self {
        BackprojectSource {
            wiener_floor: DEFAULT_WIENER_FLOOR,
        }
    }
}

impl VolumeSource for BackprojectSource {
    fn volume(&self, ds: &ParticleDataset, image: usize) -> Result<VoxelVolume> {
        backproject_dataset(ds, &ds.indices_of(ds.structure_ids[image]), self.wiener_floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub structure_id: usize,
    pub image_index: usize,
    pub fsc_auc: f64,
    pub res_0143: f64,
    pub res_05: f64,
    /// Absent when either thresholded cloud is empty.
    pub chamfer_a: Option<f64>,
    pub viou: f64,
    pub curve: FscCurve,
}

fn masked(v: &VoxelVolume, on: bool) -> VoxelVolume {
    let mut v = v.clone();
    if on {
        v.apply_spherical_mask((v.size / 2) as f64);
    }
    v
}

/// Every metric of one predicted volume against its ground truth.
pub fn compare_volumes(
    pred: &VoxelVolume,
    gt: &VoxelVolume,
    cfg: &MetricsConfig,
    structure_id: usize,
    image_index: usize,
) -> Result<StructureMetrics> {
    let p = masked(pred, cfg.mask);
    let g = masked(gt, cfg.mask);
    let curve = fsc(&p, &g)?;
    let pc = to_pointcloud(&p, cfg.pred_threshold)?;
    let gc = to_pointcloud(&g, cfg.gt_threshold)?;
    let chamfer_a = match chamfer(&pc, &gc) {
        Ok(c) => Some(c),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(StructureMetrics {
        structure_id,
        image_index,
        fsc_auc: fsc_auc(&curve),
        res_0143: fsc_resolution(&curve, 0.143)?,
        res_05: fsc_resolution(&curve, 0.5)?,
        chamfer_a,
        viou: viou(&p, &g, cfg.pred_threshold, cfg.gt_threshold)?,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Aggregate {
            mean,
            median,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<StructureMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub warnings: Vec<String>,
    pub classification: Option<Classification>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<StructureMetrics>, warnings: Vec<String>) -> MetricsReport {
        let mut aggregates = BTreeMap::new();
        let col = |f: &dyn Fn(&StructureMetrics) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(f).collect() };
        aggregates.insert("fsc_auc".into(), Aggregate::of(&col(&|r| Some(r.fsc_auc))));
        aggregates.insert("res_0143".into(), Aggregate::of(&col(&|r| Some(r.res_0143))));
        aggregates.insert("res_05".into(), Aggregate::of(&col(&|r| Some(r.res_05))));
        aggregates.insert("chamfer_A".into(), Aggregate::of(&col(&|r| r.chamfer_a)));
        aggregates.insert("viou".into(), Aggregate::of(&col(&|r| Some(r.viou))));
        MetricsReport {
            rows,
            aggregates,
            warnings,
            classification: None,
        }
    }

    pub fn mean(&self, key: &str) -> f64 {
        self.aggregates.get(key).map_or(f64::NAN, |a| a.mean)
    }
}

/// For each structure id, the first of its images under a seeded permutation.
pub fn select_images(ds: &ParticleDataset, seed: u64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, 0x7365_6c));
    let mut pick = vec![None; ds.structure_count()];
    for i in order {
        let s = ds.structure_ids[i];
        if s < pick.len() && pick[s].is_none() {
            pick[s] = Some(i);
        }
    }
    pick
}

/// Reconstructs one selected image per structure and scores it against
/// the matching ground-truth volume.
pub fn per_image_protocol(
    ds: &ParticleDataset,
    source: &(dyn VolumeSource + Sync),
    gt: &[VoxelVolume],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if gt.len() < ds.structure_count() {
        return Err(Error::Argument(format!(
            "{} ground-truth volumes for {} structures",
            gt.len(),
            ds.structure_count()
        )));
    }
    let picks = select_images(ds, cfg.seed);
    let warnings = picks
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(s, _)| format!("structure {s} has no images; skipped"))
        .collect();
    let rows = picks
        .into_par_iter()
        .enumerate()
        .filter_map(|(s, p)| p.map(|i| (s, i)))
        .map(|(s, i)| compare_volumes(&source.volume(ds, i)?, &gt[s], cfg, s, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows, warnings))
}

#[derive(Serialize)]
struct ReportRow {
    structure_id: usize,
    fsc_auc: f64,
    res_0143: f64,
    res_05: f64,
    #[serde(rename = "chamfer_A")]
    chamfer_a: Option<f64>,
    viou: f64,
}

pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CURVES_CSV: &str = "fsc_curves.csv";

/// Writes `report.csv`, `summary.json` (with `config` echoed) and, when
/// enabled, `fsc_curves.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path, cfg: &MetricsConfig, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &report.rows {
        w.serialize(ReportRow {
            structure_id: r.structure_id,
            fsc_auc: r.fsc_auc,
            res_0143: r.res_0143,
            res_05: r.res_05,
            chamfer_a: r.chamfer_a,
            viou: r.viou,
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let summary = serde_json::json!({
        "structures": report.rows.len(),
        "aggregates": report.aggregates,
        "warnings": report.warnings,
        "classification": report.classification,
        "images": report.rows.iter().map(|r| (r.structure_id, r.image_index)).collect::<Vec<_>>(),
        "config": config,
    });
    let sp = dir.join(SUMMARY_JSON);
    fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&sp, e))?;

    if cfg.write_curves {
        let cp = dir.join(CURVES_CSV);
        let mut w = csv::Writer::from_path(&cp)?;
        w.write_record(["structure_id", "shell", "fsc"])?;
        for r in &report.rows {
            for (k, v) in r.curve.values.iter().enumerate() {
                w.write_record([r.structure_id.to_string(), (k + 1).to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&cp, e))?;
    }
    Ok(())
}
