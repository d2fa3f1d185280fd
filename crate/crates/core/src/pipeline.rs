//! End-to-end alignment of one sequence: merge, label, group, fit,
//! rectify, and the BEV images before and after rectification.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::alignment::{emc_merge, ClassLabel, GroupKey, MergedCloud, DYNAMIC_THRESHOLD};
use crate::bev::{
    featurize, fuse_bev, occupancy_weight, sample_points, scatter_to_bev, BevImage, GridSpec, Reduce,
};
use crate::error::Result;
use crate::geometry::{RigidTransform, Vec3};
use crate::motion::{
    global_groups, predict_group_rectifications, segment_dynamic, FitMode, GlobalGroup, GroupRectification,
    DBSCAN_EPS, DBSCAN_MIN_PTS,
};
use crate::sim::SequenceSample;

/// Source of instance ids for dynamic points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segmentation {
    /// Annotated object ids.
    #[default]
    Gt,
    /// Density clustering in the ground plane.
    Dbscan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub grid: GridSpec,
    pub fit_mode: FitMode,
    pub segmentation: Segmentation,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub dynamic_threshold: f64,
    pub reduce: Reduce,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            fit_mode: FitMode::default(),
            segmentation: Segmentation::default(),
            dbscan_eps: DBSCAN_EPS,
            dbscan_min_pts: DBSCAN_MIN_PTS,
            dynamic_threshold: DYNAMIC_THRESHOLD,
            reduce: Reduce::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.dynamic_threshold.is_finite() && self.dynamic_threshold >= 0.0) {
            return Err(crate::Error::invalid("dynamic_threshold must be non-negative"));
        }
        Ok(())
    }
}

pub const STAGES: [&str; 10] = [
    "merge",
    "label",
    "segment",
    "fit",
    "rectify",
    "featurize",
    "scatter_i0",
    "interpolate",
    "scatter_i1",
    "fuse",
];

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignReport {
    pub n_points: usize,
    pub n_dynamic: usize,
    pub n_groups: usize,
    pub n_local_groups: usize,
    /// Local groups rectified by centroid shift instead of a rigid fit.
    pub n_fallback: usize,
    /// Instances left in place because they have no keyframe points.
    pub skipped_instances: Vec<u32>,
    /// Dynamic points without a group (clustering noise or skipped groups).
    pub unrectified_points: usize,
}

#[derive(Clone, Debug)]
pub struct AlignOutput {
    /// Merged cloud with labels and ground-truth flows.
    pub merged: MergedCloud,
    pub instances: Vec<Option<u32>>,
    pub rectifications: Vec<GroupRectification>,
    pub rectified: Vec<Vec3>,
    /// `rectified - original`; zero for points left in place.
    pub pred_flows: Vec<Vec3>,
    pub i0: BevImage,
    pub i1: BevImage,
    pub fused: BevImage,
    pub report: AlignReport,
    pub timings: Vec<(&'static str, Duration)>,
}

struct Clock {
    last: Instant,
    laps: Vec<(&'static str, Duration)>,
}

impl Clock {
    fn start() -> Self {
        Self {
            last: Instant::now(),
            laps: Vec::with_capacity(STAGES.len()),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        self.laps.push((stage, now - self.last));
        self.last = now;
    }
}

pub fn align_sequence(sample: &SequenceSample, config: &AlignConfig) -> Result<AlignOutput> {
    config.validate()?;
    let mut clock = Clock::start();

    let mut merged = emc_merge(sample)?;
    clock.lap("merge");

    merged.annotate(&sample.trajectories, config.dynamic_threshold)?;
    clock.lap("label");

    let labels = merged.labels()?.to_vec();
    let instances = match config.segmentation {
        Segmentation::Gt => merged
            .instance
            .iter()
            .zip(&labels)
            .map(|(id, &l)| if l == ClassLabel::DynamicFg { *id } else { None })
            .collect(),
        Segmentation::Dbscan => segment_dynamic(&merged, config.dbscan_eps, config.dbscan_min_pts)?,
    };
    let (groups, skipped) = split_fittable(global_groups(&instances), &merged.k);
    clock.lap("segment");

    let rectifications = predict_group_rectifications(&merged, &groups, config.fit_mode, &sample.trajectories)?;
    clock.lap("fit");

    let transforms: HashMap<GroupKey, RigidTransform> = rectifications.iter().map(|g| (g.key, g.transform)).collect();
    let mut unrectified = 0;
    let rectified: Vec<Vec3> = (0..merged.len())
        .map(|i| {
            let p = merged.points[i];
            if labels[i] != ClassLabel::DynamicFg {
                return p;
            }
            let t = instances[i].and_then(|instance| transforms.get(&GroupKey { instance, k: merged.k[i] }));
            match t {
                Some(t) => t.apply(&p),
                None => {
                    unrectified += 1;
                    p
                }
            }
        })
        .collect();
    let pred_flows: Vec<Vec3> = rectified.iter().zip(&merged.points).map(|(r, p)| r - p).collect();
    clock.lap("rectify");

    let features = featurize(&merged, &config.grid)?;
    clock.lap("featurize");

    let i0 = scatter_to_bev(&merged.points, &features, &config.grid, config.reduce)?;
    clock.lap("scatter_i0");

    let sampled = sample_points(&i0, &merged.points);
    clock.lap("interpolate");

    let i1 = scatter_to_bev(&rectified, &sampled, &config.grid, config.reduce)?;
    clock.lap("scatter_i1");

    let fused = fuse_bev(&i0, &i1, occupancy_weight)?;
    clock.lap("fuse");

    if !skipped.is_empty() {
        log::warn!("{} instances have no keyframe points and were left in place", skipped.len());
    }
    let report = AlignReport {
        n_points: merged.len(),
        n_dynamic: labels.iter().filter(|&&l| l == ClassLabel::DynamicFg).count(),
        n_groups: groups.len(),
        n_local_groups: rectifications.len(),
        n_fallback: rectifications.iter().filter(|g| g.fallback).count(),
        skipped_instances: skipped,
        unrectified_points: unrectified,
    };
    Ok(AlignOutput {
        merged,
        instances,
        rectifications,
        rectified,
        pred_flows,
        i0,
        i1,
        fused,
        report,
        timings: clock.laps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub median_s: f64,
    pub p95_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_points: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub stages: Vec<StageStats>,
    /// Whole pipeline per repetition.
    pub total: StageStats,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn stats(stage: &str, mut secs: Vec<f64>) -> StageStats {
    secs.sort_by(f64::total_cmp);
    let n = secs.len();
    let median = if n % 2 == 1 {
        secs[n / 2]
    } else {
        0.5 * (secs[n / 2 - 1] + secs[n / 2])
    };
    StageStats {
        stage: stage.to_string(),
        median_s: median,
        p95_s: percentile(&secs, 0.95),
    }
}

/// Times [`align_sequence`] over `repetitions` runs after `warmup` discarded
/// runs.
pub fn bench_align(
    sample: &SequenceSample,
    config: &AlignConfig,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(crate::Error::invalid("repetitions must be at least 1"));
    }
    for _ in 0..warmup {
        align_sequence(sample, config)?;
    }
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); STAGES.len()];
    let mut totals = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = align_sequence(sample, config)?;
        totals.push(start.elapsed().as_secs_f64());
        for (i, (_, d)) in out.timings.iter().enumerate() {
            per_stage[i].push(d.as_secs_f64());
        }
    }
    Ok(BenchReport {
        n_points: sample.num_points(),
        repetitions,
        warmup,
        stages: STAGES.iter().zip(per_stage).map(|(s, v)| stats(s, v)).collect(),
        total: stats("total", totals),
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,median_s,p95_s\n");
        for st in self.stages.iter().chain(std::iter::once(&self.total)) {
            s.push_str(&format!("{},{},{}\n", st.stage, st.median_s, st.p95_s));
        }
        s
    }
}

/// Separates groups that reach the keyframe from those that do not.
fn split_fittable(groups: Vec<GlobalGroup>, k: &[u32]) -> (Vec<GlobalGroup>, Vec<u32>) {
    let with_keyframe: BTreeSet<u32> = groups
        .iter()
        .filter(|g| g.members.iter().any(|&i| k[i] == 0))
        .map(|g| g.instance)
        .collect();
    let (ok, skipped): (Vec<_>, Vec<_>) = groups.into_iter().partition(|g| with_keyframe.contains(&g.instance));
    (ok, skipped.into_iter().map(|g| g.instance).collect())
}
