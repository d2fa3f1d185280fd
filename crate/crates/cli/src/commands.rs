use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use flowbev::alignment::{footprint_extent, window_translation, write_merged, ClassLabel, MergedCloud};
use flowbev::bev::write_bev_grid;
use flowbev::geometry::ObjectClass;
use flowbev::metrics::{
    evaluate_detections, pair_frames, pool_flow_metrics, read_detections, read_flow_record, scene_flow_metrics,
    write_detections, write_flow_record, EvalMode, FlowMetrics, FlowRecord, IouKind, NamedBoxes,
};
use flowbev::motion::FitMode;
use flowbev::pipeline::{align_sequence, bench_align, Segmentation};
use flowbev::sim::{generate_sequence, read_sequence, write_sequence, ObjectSpec, ScenarioConfig, SequenceSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::FileConfig;
use crate::output::{emit, Echo, Report, TOOL_VERSION};
use crate::{
    AlignArgs, BenchArgs, CmdResult, DemoShadowArgs, DetModeArg, EvalDetArgs, EvalFlowArgs, Failure, IouKindArg,
    ModeArg, SegmentationArg, SimulateArgs, UsageContext,
};

pub const MANIFEST_FORMAT: &str = "flowbev-manifest";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u64,
    tool_version: String,
    config: serde_json::Value,
    sequences: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    seed: u64,
    /// Relative to the manifest's directory.
    path: String,
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .data()
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).context("serializing output").data()?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .data()
}

pub fn simulate(a: SimulateArgs, file: FileConfig) -> CmdResult {
    let mut cfg = file.scenario;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.num_objects {
        cfg.num_objects = v;
    }
    if let Some(v) = a.num_sweeps {
        cfg.num_sweeps = v;
    }
    if let Some(v) = a.points_per_object {
        cfg.points_per_object_per_sweep = v;
    }
    if let Some(v) = a.background_points {
        cfg.background_points_per_sweep = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.ego_speed {
        cfg.ego_speed = v;
    }
    if let Some(v) = a.object_speed {
        cfg.object_speed = v;
    }
    if let Some(v) = a.xy_range {
        cfg.xy_range = v;
    }
    cfg.validate().usage()?;
    create_dir(&a.out)?;
    let echo = Echo::new("simulate", &json!({ "n": a.n, "scenario": cfg }));

    let generated: Vec<Result<(ManifestEntry, NamedBoxes), Failure>> = (0..a.n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i;
            let sample = generate_sequence(&cfg.clone().with_seed(seed)).usage()?;
            let name = format!("seq_{seed:06}");
            let file_name = format!("{name}.json");
            write_sequence(&sample, a.out.join(&file_name)).data()?;
            Ok((
                ManifestEntry {
                    name: name.clone(),
                    seed,
                    path: file_name,
                },
                NamedBoxes {
                    name,
                    boxes: sample.boxes,
                },
            ))
        })
        .collect();
    let mut entries = Vec::with_capacity(a.n);
    let mut truth = Vec::with_capacity(a.n);
    for g in generated {
        let (e, t) = g?;
        entries.push(e);
        truth.push(t);
    }
    write_detections(&truth, echo.to_json(), a.out.join("gt_detections.json")).data()?;
    write_json(
        &a.out.join("manifest.json"),
        &Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            tool_version: TOOL_VERSION.into(),
            config: echo.to_json(),
            sequences: entries,
        },
    )?;
    println!("wrote {} sequences to {}", a.n, a.out.display());
    Ok(())
}

fn manifest_inputs(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.format != MANIFEST_FORMAT {
        bail!("{} is not a {MANIFEST_FORMAT} file", path.display());
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(m.sequences.iter().map(|e| dir.join(&e.path)).collect())
}

fn sequence_name(path: &Path) -> String {
    let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or("sequence");
    stem.strip_suffix(".json").unwrap_or(stem).to_string()
}

pub fn align(a: AlignArgs, file: FileConfig) -> CmdResult {
    let mut cfg = file.align;
    if let Some(m) = a.mode {
        cfg.fit_mode = match m {
            ModeArg::OracleFit => FitMode::OracleFit,
            ModeArg::Gt => FitMode::Gt,
        };
    }
    if let Some(s) = a.segmentation {
        cfg.segmentation = match s {
            SegmentationArg::Gt => Segmentation::Gt,
            SegmentationArg::Dbscan => Segmentation::Dbscan,
        };
    }
    if let Some(s) = a.stride {
        cfg.grid.stride = s;
    }
    cfg.validate().usage()?;
    let mut inputs = a.inputs.clone();
    if let Some(m) = &a.manifest {
        inputs.extend(manifest_inputs(m).data()?);
    }
    if inputs.is_empty() {
        return Err(Failure::Usage(anyhow!("no input sequences given")));
    }
    create_dir(&a.out)?;
    let echo = Echo::new("align", &cfg);

    let results: Vec<(PathBuf, anyhow::Result<String>)> = inputs
        .par_iter()
        .map(|path| {
            let r = (|| {
                let sample = read_sequence(path).with_context(|| format!("reading {}", path.display()))?;
                let name = sequence_name(path);
                let out = align_sequence(&sample, &cfg).with_context(|| format!("aligning {}", path.display()))?;
                let base = a.out.join(&name);
                let with_ext = |ext: &str| base.with_file_name(format!("{name}.{ext}"));
                let labels = out.merged.labels()?.to_vec();
                let rectified = MergedCloud {
                    points: out.rectified.clone(),
                    flows: None,
                    ..out.merged.clone()
                };
                write_merged(&rectified, with_ext("rectified.json"))?;
                write_flow_record(
                    &FlowRecord {
                        name: name.clone(),
                        pred: out.pred_flows.clone(),
                        gt: out.merged.flows.clone().unwrap_or_default(),
                        mask: labels.iter().map(|&l| l == ClassLabel::DynamicFg).collect(),
                        config: echo.to_json(),
                    },
                    with_ext("flow.json"),
                )?;
                write_bev_grid(&out.i0, with_ext("i0.bev"))?;
                write_bev_grid(&out.i1, with_ext("i1.bev"))?;
                write_bev_grid(&out.fused, with_ext("fused.bev"))?;
                let mut report = echo.to_json();
                report["report"] = serde_json::to_value(&out.report)?;
                fs::write(with_ext("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
                let r = &out.report;
                Ok(format!(
                    "{name}: {} points, {} dynamic, {} groups, {} local groups, {} fallback, {} skipped instances",
                    r.n_points,
                    r.n_dynamic,
                    r.n_groups,
                    r.n_local_groups,
                    r.n_fallback,
                    r.skipped_instances.len()
                ))
            })();
            (path.clone(), r)
        })
        .collect();
    let mut failed = 0;
    for (path, r) in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Data(anyhow!("{failed} of {} sequences failed", inputs.len())));
    }
    Ok(())
}

fn flow_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_str().is_some_and(|s| s.ends_with(".flow.json")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no flow files found");
    }
    Ok(out)
}

pub const FLOW_CSV_HEADER: &str = "name,epe,acc_s,acc_r,r_outliers,n_points";

pub fn eval_flow(a: EvalFlowArgs) -> CmdResult {
    let files = flow_inputs(&a.inputs).data()?;
    let mut rows: Vec<(String, FlowMetrics)> = Vec::new();
    for path in &files {
        let rec = read_flow_record(path)
            .with_context(|| format!("reading {}", path.display()))
            .data()?;
        if !rec.mask.contains(&true) {
            log::warn!("{}: no dynamic points, skipped", rec.name);
            continue;
        }
        let m = scene_flow_metrics(&rec.pred, &rec.gt, &rec.mask)
            .with_context(|| format!("evaluating {}", path.display()))
            .data()?;
        rows.push((rec.name, m));
    }
    let parts: Vec<FlowMetrics> = rows.iter().map(|r| r.1).collect();
    let pooled = pool_flow_metrics(&parts).context("no dynamic points in any input").data()?;
    rows.push(("all".into(), pooled));

    let mut csv = format!("{FLOW_CSV_HEADER}\n");
    let mut text = String::from("scene flow\n");
    for (name, m) in &rows {
        csv.push_str(&format!("{name},{},{},{},{},{}\n", m.epe, m.acc_s, m.acc_r, m.r_outliers, m.n_points));
        text.push_str(&format!(
            "  {name:<16} EPE {:.4} m  AccS {:6.2}%  AccR {:6.2}%  ROutliers {:6.2}%  ({} points)\n",
            m.epe, m.acc_s, m.acc_r, m.r_outliers, m.n_points
        ));
    }
    let report = Report {
        csv,
        text,
        json: json!(rows.iter().map(|(n, m)| json!({ "name": n, "metrics": m })).collect::<Vec<_>>()),
    };
    let echo = Echo::new("eval-flow", &json!({ "inputs": files }));
    emit(a.output.out.as_deref(), &report.render(a.output.format, &echo))
}

pub fn eval_det(a: EvalDetArgs, file: FileConfig) -> CmdResult {
    let mut cfg = file.detection;
    if let Some(k) = a.iou_kind {
        cfg.iou_kind = match k {
            IouKindArg::Bev => IouKind::Bev,
            IouKindArg::ThreeD => IouKind::ThreeD,
        };
    }
    if let Some(t) = a.threshold {
        if !(t.is_finite() && t > 0.0) {
            return Err(Failure::Usage(anyhow!("threshold must be positive")));
        }
        cfg.distance_thresholds = vec![t];
    }
    cfg.ap.trim |= a.trim;
    let mode = match a.mode {
        DetModeArg::BevDistance => EvalMode::BevDistance,
        DetModeArg::Iou => EvalMode::Iou,
    };
    let preds = read_detections(&a.pred)
        .with_context(|| format!("reading {}", a.pred.display()))
        .data()?;
    let gts = read_detections(&a.gt)
        .with_context(|| format!("reading {}", a.gt.display()))
        .data()?;
    let frames = pair_frames(&preds, &gts).data()?;
    let report = evaluate_detections(&frames, mode, &cfg).data()?;
    let out = Report {
        csv: report.to_csv(),
        text: report.to_text(),
        json: serde_json::to_value(&report).context("serializing report").data()?,
    };
    let echo = Echo::new(
        "eval-det",
        &json!({ "pred": a.pred, "gt": a.gt, "mode": mode, "detection": cfg }),
    );
    emit(a.output.out.as_deref(), &out.render(a.output.format, &echo))
}

fn shadow_scene(speeds: &[f64], seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        num_objects: 0,
        background_points_per_sweep: 500,
        scripted_objects: speeds
            .iter()
            .enumerate()
            .map(|(i, &v)| ObjectSpec {
                class: ObjectClass::Car,
                size: None,
                center: [-5.0, -18.0 + 8.0 * i as f64],
                yaw: 0.0,
                speed: v,
                yaw_rate: 0.0,
            })
            .collect(),
        seed,
        ..ScenarioConfig::default()
    }
}

pub const SHADOW_CSV_HEADER: &str = "object_id,class,speed,displacement,true_extent,emc_extent,rectified_extent";

pub fn demo_shadow(a: DemoShadowArgs, file: FileConfig) -> CmdResult {
    let (sample, source): (SequenceSample, serde_json::Value) = match &a.input {
        Some(path) => (
            read_sequence(path)
                .with_context(|| format!("reading {}", path.display()))
                .data()?,
            json!(path),
        ),
        None => {
            if a.speeds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Failure::Usage(anyhow!("speeds must be non-negative")));
            }
            let cfg = shadow_scene(&a.speeds, a.seed);
            cfg.validate().usage()?;
            (generate_sequence(&cfg).usage()?, json!({ "speeds": a.speeds, "seed": a.seed }))
        }
    };
    let out = align_sequence(&sample, &file.align).data()?;
    let window = sample.config.as_ref().map(ScenarioConfig::window);
    let max_k = out.merged.max_k() as usize;

    let mut csv = format!("{SHADOW_CSV_HEADER}\n");
    let mut text = String::from("footprint extent along heading (m)\n");
    let mut rows = Vec::new();
    for traj in &sample.trajectories {
        let idx: Vec<usize> = (0..out.merged.len())
            .filter(|&i| out.merged.instance[i] == Some(traj.object_id))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let heading = traj.keyframe_pose().yaw();
        let emc: Vec<_> = idx.iter().map(|&i| out.merged.points[i]).collect();
        let rect: Vec<_> = idx.iter().map(|&i| out.rectified[i]).collect();
        let displacement = window_translation(traj, max_k);
        let covered = max_k.min(traj.max_k()) as f64;
        let speed = window
            .filter(|_| covered > 0.0)
            .map(|w| displacement / (w * covered / max_k.max(1) as f64));
        let (e, r) = (footprint_extent(&emc, heading), footprint_extent(&rect, heading));
        let speed_field = speed.map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{speed_field},{displacement},{},{e},{r}\n",
            traj.object_id, traj.class, traj.size[0]
        ));
        text.push_str(&format!(
            "  object {:>3} {:<10} true {:6.2}  EMC {:6.2}  rectified {:6.2}\n",
            traj.object_id,
            traj.class.name(),
            traj.size[0],
            e,
            r
        ));
        rows.push(json!({
            "object_id": traj.object_id, "class": traj.class, "speed": speed, "displacement": displacement,
            "true_extent": traj.size[0], "emc_extent": e, "rectified_extent": r,
        }));
    }
    let report = Report {
        csv,
        text,
        json: json!(rows),
    };
    let echo = Echo::new("demo-shadow", &json!({ "source": source, "align": file.align }));
    emit(a.output.out.as_deref(), &report.render(a.output.format, &echo))
}

pub fn bench(a: BenchArgs, file: FileConfig) -> CmdResult {
    let mut b = file.bench;
    if let Some(v) = a.points {
        b.points = v;
    }
    if let Some(v) = a.sweeps {
        b.sweeps = v;
    }
    if let Some(v) = a.repetitions {
        b.repetitions = v;
    }
    if let Some(v) = a.warmup {
        b.warmup = v;
    }
    if let Some(v) = a.seed {
        b.seed = v;
    }
    if b.repetitions == 0 || b.sweeps == 0 {
        return Err(Failure::Usage(anyhow!("repetitions and sweeps must be at least 1")));
    }
    let mut scenario = file.scenario;
    scenario.num_sweeps = b.sweeps;
    scenario.seed = b.seed;
    let per_sweep = b.points.div_ceil(b.sweeps);
    let object_points = scenario.num_objects * scenario.points_per_object_per_sweep;
    scenario.background_points_per_sweep = per_sweep.saturating_sub(object_points);
    scenario.validate().usage()?;
    let sample = generate_sequence(&scenario).usage()?;
    let report = bench_align(&sample, &file.align, b.repetitions, b.warmup).data()?;

    let mut text = format!(
        "align pipeline, {} points, {} repetitions after {} warm-up\n",
        report.n_points, report.repetitions, report.warmup
    );
    for s in report.stages.iter().chain(std::iter::once(&report.total)) {
        text.push_str(&format!(
            "  {:<12} median {:9.3} ms  p95 {:9.3} ms\n",
            s.stage,
            s.median_s * 1e3,
            s.p95_s * 1e3
        ));
    }
    let out = Report {
        csv: report.to_csv(),
        text,
        json: serde_json::to_value(&report).context("serializing report").data()?,
    };
    let echo = Echo::new(
        "bench",
        &json!({ "bench": b, "scenario": scenario, "align": file.align, "n_points": report.n_points }),
    );
    emit(a.output.out.as_deref(), &out.render(a.output.format, &echo))
}
