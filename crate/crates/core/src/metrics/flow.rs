use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, flatten, schema_error, unflatten};
use crate::error::{check_len, Error, Result};
use crate::geometry::Vec3;
use crate::numeric::exact_sum;

pub const STRICT_THRESHOLD: f64 = 0.05;
pub const RELAXED_THRESHOLD: f64 = 0.10;
pub const OUTLIER_THRESHOLD: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    /// Mean end-point error in meters.
    pub epe: f64,
    /// Percent of points with error or relative error below 0.05.
    pub acc_s: f64,
    /// Percent of points with error or relative error below 0.10.
    pub acc_r: f64,
    /// Percent of points with error and relative error above 0.30.
    pub r_outliers: f64,
    pub n_points: usize,
}

/// Per-point errors behind [`FlowMetrics`]; relative error is infinite when
/// the reference flow is zero.
pub fn flow_errors(pred: &Vec3, gt: &Vec3) -> (f64, f64) {
    let err = (pred - gt).norm();
    let norm = gt.norm();
    let rel = if norm > 0.0 { err / norm } else { f64::INFINITY };
    (err, rel)
}

/// Scene-flow metrics over the points selected by `mask`.
pub fn scene_flow_metrics(pred: &[Vec3], gt: &[Vec3], mask: &[bool]) -> Result<FlowMetrics> {
    check_len("gt flows", pred.len(), gt.len())?;
    check_len("mask", pred.len(), mask.len())?;
    let errs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| flow_errors(&pred[i], &gt[i]))
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyInput("no points selected for flow evaluation"));
    }
    let n = errs.len();
    let percent = |pred: &dyn Fn(&(f64, f64)) -> bool| 100.0 * errs.iter().filter(|e| pred(e)).count() as f64 / n as f64;
    Ok(FlowMetrics {
        epe: exact_sum(errs.iter().map(|e| e.0)) / n as f64,
        acc_s: percent(&|&(e, r)| e < STRICT_THRESHOLD || r < STRICT_THRESHOLD),
        acc_r: percent(&|&(e, r)| e < RELAXED_THRESHOLD || r < RELAXED_THRESHOLD),
        r_outliers: percent(&|&(e, r)| e > OUTLIER_THRESHOLD && r > OUTLIER_THRESHOLD),
        n_points: n,
    })
}

/// Pools several evaluations into one, weighting by point count.
pub fn pool_flow_metrics(parts: &[FlowMetrics]) -> Result<FlowMetrics> {
    let n: usize = parts.iter().map(|m| m.n_points).sum();
    if n == 0 {
        return Err(Error::EmptyInput("no points selected for flow evaluation"));
    }
    let w = |f: fn(&FlowMetrics) -> f64| exact_sum(parts.iter().map(|m| f(m) * m.n_points as f64)) / n as f64;
    Ok(FlowMetrics {
        epe: w(|m| m.epe),
        acc_s: w(|m| m.acc_s),
        acc_r: w(|m| m.acc_r),
        r_outliers: w(|m| m.r_outliers),
        n_points: n,
    })
}

pub const FLOW_FORMAT: &str = "flowbev-flow";
pub const FLOW_VERSION: u64 = 1;

/// Predicted and reference flows of one sequence with the evaluation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub name: String,
    pub pred: Vec<Vec3>,
    pub gt: Vec<Vec3>,
    pub mask: Vec<bool>,
    /// Free-form provenance: run configuration and toolkit version.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct FlowFile {
    format: String,
    version: u64,
    name: String,
    config: serde_json::Value,
    n: usize,
    pred: Vec<f64>,
    gt: Vec<f64>,
    mask: Vec<bool>,
}

pub fn write_flow_record(record: &FlowRecord, path: impl AsRef<Path>) -> Result<()> {
    check_len("gt flows", record.pred.len(), record.gt.len())?;
    check_len("mask", record.pred.len(), record.mask.len())?;
    container::write(
        path.as_ref(),
        &FlowFile {
            format: FLOW_FORMAT.into(),
            version: FLOW_VERSION,
            name: record.name.clone(),
            config: record.config.clone(),
            n: record.pred.len(),
            pred: flatten(&record.pred),
            gt: flatten(&record.gt),
            mask: record.mask.clone(),
        },
    )
}

pub fn read_flow_record(path: impl AsRef<Path>) -> Result<FlowRecord> {
    let (f, _): (FlowFile, _) = container::read(path.as_ref(), FLOW_FORMAT, FLOW_VERSION)?;
    if f.mask.len() != f.n {
        return Err(schema_error("mask", format!("expected {} entries, found {}", f.n, f.mask.len())));
    }
    Ok(FlowRecord {
        name: f.name,
        pred: unflatten("pred", &f.pred, f.n)?,
        gt: unflatten("gt", &f.gt, f.n)?,
        mask: f.mask,
        config: f.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn with_errors(errors: &[f64]) -> (Vec<Vec3>, Vec<Vec3>) {
        let gt = vec![Vec3::new(0.0, 1.0, 0.0); errors.len()];
        let pred = errors.iter().map(|&e| Vec3::new(e, 1.0, 0.0)).collect();
        (pred, gt)
    }

    #[test]
    fn perfect_prediction() {
        let (pred, gt) = with_errors(&[0.0; 4]);
        let m = scene_flow_metrics(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!((m.epe, m.acc_s, m.acc_r, m.r_outliers, m.n_points), (0.0, 100.0, 100.0, 0.0, 4));
    }

    #[test]
    fn arithmetic_mean_epe() {
        let (pred, gt) = with_errors(&[0.3, 0.5]);
        assert_eq!(scene_flow_metrics(&pred, &gt, &[true; 2]).unwrap().epe, 0.4);
    }

    #[test]
    fn both_threshold_branches() {
        let (pred, gt) = with_errors(&[0.04, 0.20]);
        let m = scene_flow_metrics(&pred, &gt, &[true; 2]).unwrap();
        assert_eq!((m.acc_s, m.acc_r), (50.0, 50.0));
        // A large flow passes through the relative branch only.
        let m = scene_flow_metrics(&[Vec3::new(10.4, 0.0, 0.0)], &[Vec3::new(10.0, 0.0, 0.0)], &[true]).unwrap();
        assert_eq!((m.acc_s, m.acc_r, m.r_outliers), (100.0, 100.0, 0.0));
        // Zero reference flow: only the absolute branch applies.
        let m = scene_flow_metrics(&[Vec3::new(0.4, 0.0, 0.0)], &[Vec3::zeros()], &[true]).unwrap();
        assert_eq!((m.acc_s, m.r_outliers), (0.0, 100.0));
    }

    #[test]
    fn mask_selects_points_and_empty_mask_errors() {
        let (pred, gt) = with_errors(&[0.0, 5.0]);
        assert_eq!(scene_flow_metrics(&pred, &gt, &[true, false]).unwrap().epe, 0.0);
        assert!(matches!(scene_flow_metrics(&pred, &gt, &[false; 2]), Err(Error::EmptyInput(_))));
        assert!(scene_flow_metrics(&pred, &gt[..1], &[true; 2]).is_err());
    }

    #[test]
    fn pooling_weights_by_count() {
        let (p1, g1) = with_errors(&[0.3]);
        let (p2, g2) = with_errors(&[0.5, 0.5, 0.5]);
        let a = scene_flow_metrics(&p1, &g1, &[true]).unwrap();
        let b = scene_flow_metrics(&p2, &g2, &[true; 3]).unwrap();
        let pooled = pool_flow_metrics(&[a, b]).unwrap();
        assert!((pooled.epe - 0.45).abs() < 1e-15);
        assert_eq!(pooled.n_points, 4);
    }

    #[test]
    fn record_round_trip() {
        let (pred, gt) = with_errors(&[0.1, 1.0 / 3.0]);
        let rec = FlowRecord {
            name: "seq".into(),
            pred,
            gt,
            mask: vec![true, false],
            config: serde_json::json!({"seed": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        write_flow_record(&rec, &path).unwrap();
        assert_eq!(read_flow_record(&path).unwrap(), rec);
    }

    proptest! {
        #[test]
        fn invariant_under_global_rotation(
            flows in prop::collection::vec((prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(-0.5f64..0.5)), 1..30),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.1f64..3.1,
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 0.1);
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let gt: Vec<Vec3> = flows.iter().map(|f| Vec3::from(f.0)).collect();
            let pred: Vec<Vec3> = flows.iter().map(|f| Vec3::from(f.0) + Vec3::from(f.1)).collect();
            let mask = vec![true; gt.len()];
            let a = scene_flow_metrics(&pred, &gt, &mask).unwrap();
            let rg: Vec<Vec3> = gt.iter().map(|v| r * v).collect();
            let rp: Vec<Vec3> = pred.iter().map(|v| r * v).collect();
            let b = scene_flow_metrics(&rp, &rg, &mask).unwrap();
            prop_assert!((a.epe - b.epe).abs() < 1e-12);
            // Percentages may only differ when an error sits within rounding
            // of a threshold.
            let near = |v: f64| [0.05, 0.1, 0.3].iter().any(|t| (v - t).abs() < 1e-9);
            let borderline = gt.iter().zip(&pred).any(|(g, p)| {
                let (e, rel) = flow_errors(p, g);
                near(e) || near(rel)
            });
            if !borderline {
                prop_assert_eq!((a.acc_s, a.acc_r, a.r_outliers), (b.acc_s, b.acc_r, b.r_outliers));
            }
        }

        #[test]
        fn epe_is_homogeneous_under_scaling(
            flows in prop::collection::vec((prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(-0.5f64..0.5)), 1..30),
            s in 0.5f64..2.0,
        ) {
            let gt: Vec<Vec3> = flows.iter().map(|f| Vec3::from(f.0)).collect();
            let pred: Vec<Vec3> = flows.iter().map(|f| Vec3::from(f.0) + Vec3::from(f.1)).collect();
            let mask = vec![true; gt.len()];
            let a = scene_flow_metrics(&pred, &gt, &mask).unwrap();
            let sg: Vec<Vec3> = gt.iter().map(|v| v * s).collect();
            let sp: Vec<Vec3> = pred.iter().map(|v| v * s).collect();
            let b = scene_flow_metrics(&sp, &sg, &mask).unwrap();
            prop_assert!((b.epe - s * a.epe).abs() < 1e-12);
        }
    }
}
