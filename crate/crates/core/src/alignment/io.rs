//! Merged-cloud file format, version 1: a JSON object with `format`
//! ("flowbev-merged"), `version`, `metric_scale`, `n`, then the per-point
//! columns `points` (3N floats), `k`, `sweep_index`, `instance` (-1 when
//! unattributed), `labels` (or null) and `flows` (3N floats, or null).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassLabel, MergedCloud};
use crate::container::{self, flatten, schema_error, unflatten};
use crate::error::Result;

pub const MERGED_FORMAT: &str = "flowbev-merged";
pub const MERGED_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct MergedFile {
    format: String,
    version: u64,
    metric_scale: f64,
    n: usize,
    points: Vec<f64>,
    k: Vec<u32>,
    sweep_index: Vec<usize>,
    instance: Vec<i64>,
    labels: Option<Vec<ClassLabel>>,
    flows: Option<Vec<f64>>,
}

pub fn write_merged(cloud: &MergedCloud, path: impl AsRef<Path>) -> Result<()> {
    let file = MergedFile {
        format: MERGED_FORMAT.into(),
        version: MERGED_VERSION,
        metric_scale: cloud.metric_scale,
        n: cloud.len(),
        points: flatten(&cloud.points),
        k: cloud.k.clone(),
        sweep_index: cloud.sweep_index.clone(),
        instance: cloud.instance.iter().map(|i| i.map_or(-1, i64::from)).collect(),
        labels: cloud.labels.clone(),
        flows: cloud.flows.as_deref().map(flatten),
    };
    container::write(path.as_ref(), &file)
}

pub fn read_merged(path: impl AsRef<Path>) -> Result<MergedCloud> {
    read_merged_with_warnings(path).map(|(m, _)| m)
}

pub fn read_merged_with_warnings(path: impl AsRef<Path>) -> Result<(MergedCloud, Vec<String>)> {
    let (f, warnings): (MergedFile, _) = container::read(path.as_ref(), MERGED_FORMAT, MERGED_VERSION)?;
    let instance = f
        .instance
        .iter()
        .map(|&id| match id {
            -1 => Ok(None),
            id => u32::try_from(id)
                .map(Some)
                .map_err(|_| schema_error("instance", format!("invalid id {id}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let cloud = MergedCloud {
        points: unflatten("points", &f.points, f.n)?,
        k: f.k,
        sweep_index: f.sweep_index,
        instance,
        labels: f.labels,
        flows: f.flows.map(|fl| unflatten("flows", &fl, f.n)).transpose()?,
        metric_scale: f.metric_scale,
    };
    cloud.validate().map_err(|e| schema_error("columns", e))?;
    Ok((cloud, warnings))
}
