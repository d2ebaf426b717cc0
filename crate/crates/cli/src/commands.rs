//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use shape_targets::anchors::{
    assign_adaptive_shape, assign_baseline_iou, assign_center_only, generate_anchor_grid, AnchorLabel, AssignmentSet,
    UnassignedGt,
};
use shape_targets::augment::{build_database, frame_rng, sample_and_paste, BuildIssue, GtDatabase};
use shape_targets::eval::{count_points, evaluate as run_eval, EvalFrame, MatchMode};
use shape_targets::fusion::{annotate_frame, CameraModel, Detection2D};
use shape_targets::heatmap::{render_frame, HeatmapMode, RenderIssue};
use shape_targets::temporal::{compensate_and_merge, encode_and_stack, pillarize, MaxEncoder, MeanEncoder};
use shape_targets::ObjectClass;

use crate::config::{AnchorMode, EncoderKind, PipelineConfig};
use crate::error::{CliError, Result};
use crate::formats::*;
use crate::scene::generate_scene;

pub fn gen_scene(output: &Path, config: &PipelineConfig, seed: Option<u64>) -> Result<Value> {
    let mut spec = config.scene.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate_scene(&spec).map_err(CliError::Config)?;
    let points: usize = scene.frames.iter().map(|f| f.frame.cloud.len()).sum();
    let objects = scene.frames.last().map_or(0, |f| f.labels.len());
    Dataset::from_frames(scene.frames, None).save(output)?;
    write_jsonl(&output.join(DETECTIONS_FILE), &scene.detections)?;
    if !scene.cameras.is_empty() {
        write_json(&output.join(CAMERAS_FILE), &scene.cameras)?;
        write_jsonl(&output.join(CAMERA_DETECTIONS_FILE), &scene.camera_detections)?;
    }
    Ok(json!({ "frames": spec.frames, "points": points, "objects": objects }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameIssue<T> {
    frame_id: u64,
    #[serde(flatten)]
    issue: T,
}

pub fn build_gtdb(input: &Path, output: &Path, config: &PipelineConfig) -> Result<Value> {
    let ds = Dataset::load(input)?;
    // one database per window ending at each frame
    let parts: Vec<(GtDatabase, Vec<BuildIssue>)> = (0..ds.frames.len())
        .into_par_iter()
        .map(|k| build_database(&ds.frames[..=k], &[], &config.gtdb).map_err(CliError::pipeline))
        .collect::<Result<_>>()?;
    let mut db = GtDatabase::default();
    let mut issues = Vec::new();
    for (k, (part, part_issues)) in parts.into_iter().enumerate() {
        db.extend(part);
        let frame_id = ds.frames[k].frame.frame_id;
        issues.extend(part_issues.into_iter().map(|issue| FrameIssue { frame_id, issue }));
    }
    write_gt_database(output, &db)?;
    write_jsonl(&output.join("issues.jsonl"), &issues)?;
    let pairs = db.entries.iter().filter(|e| e.pair.is_some()).count();
    Ok(json!({ "entries": db.entries.len(), "paired_entries": pairs, "issues": issues.len() }))
}

fn copy_if_present(input: &Path, output: &Path, name: &str) -> Result<()> {
    let src = input.join(name);
    if src.exists() {
        write_bytes(&output.join(name), &read_bytes(&src)?)?;
    }
    Ok(())
}

pub fn augment(input: &Path, gtdb: &Path, output: &Path, config: &PipelineConfig, seed: Option<u64>) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let db = read_gt_database(gtdb)?;
    let mut aug = config.augment.clone();
    if let Some(s) = seed {
        aug.seed = s;
    }
    let newest = ds.frames.last().ok_or_else(|| CliError::Pipeline("dataset has no frames".into()))?.frame.frame_id;
    let mut frames = ds.frames.clone();
    let outcome =
        sample_and_paste(&mut frames, &db, &aug, &mut frame_rng(aug.seed, newest)).map_err(CliError::pipeline)?;
    Dataset::from_frames(frames, Some(&ds.records)).save(output)?;
    copy_if_present(input, output, CAMERAS_FILE)?;
    copy_if_present(input, output, CAMERA_DETECTIONS_FILE)?;
    write_json(&output.join("augment_report.json"), &json!({ "added": outcome.added, "skips": outcome.skips }))?;
    Ok(json!({ "added": outcome.added.len(), "skipped": outcome.skips.len() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTargetRecord {
    pub anchor: usize,
    pub i: usize,
    pub j: usize,
    pub yaw_slot: usize,
    pub class: ObjectClass,
    pub object_id: u64,
    /// (dx, dy, dz, log l, log w, log h, sin yaw, cos yaw).
    pub target: [f64; 8],
}

#[derive(Debug, Clone, Serialize)]
struct AnchorFrameSummary {
    frame_id: u64,
    foreground: usize,
    ignore: usize,
    unassigned: Vec<UnassignedGt>,
    fallback: Vec<usize>,
}

pub fn targets_anchor(input: &Path, output: &Path, config: &PipelineConfig, mode: Option<AnchorMode>) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let stage = &config.anchors;
    let mode = mode.unwrap_or(stage.mode);
    let grid = generate_anchor_grid(&stage.grid).map_err(CliError::pipeline)?;
    let (nx, ny) = (grid.spec.cells_x(), grid.spec.cells_y());
    let dims = vec![grid.spec.classes.len(), ny, nx, grid.spec.yaws.len()];
    let summaries: Vec<AnchorFrameSummary> = ds
        .frames
        .par_iter()
        .map(|f| {
            let set: AssignmentSet = match mode {
                AnchorMode::Adaptive => assign_adaptive_shape(&grid, &f.labels, &stage.adaptive),
                AnchorMode::Baseline => assign_baseline_iou(&grid, &f.labels, &stage.baseline),
                AnchorMode::CenterOnly => Ok(assign_center_only(&grid, &f.labels)),
            }
            .map_err(CliError::pipeline)?;
            let id = f.frame.frame_id;
            let raster = TensorFile {
                dims: dims.clone(),
                cell_size: grid.spec.cell_size,
                origin: [grid.spec.x_range[0], grid.spec.y_range[0]],
                frames: 0,
                data: TensorData::U8(set.label_raster()),
            };
            raster.write(&output.join(format!("{id:06}_labels.bin")))?;
            let rows: Vec<AnchorTargetRecord> = set
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, a)| a.label == AnchorLabel::Foreground)
                .map(|(k, a)| AnchorTargetRecord {
                    anchor: k,
                    i: a.index.i,
                    j: a.index.j,
                    yaw_slot: a.index.yaw_slot,
                    class: grid.anchors[k].class,
                    object_id: f.labels[a.matched.expect("foreground is matched")].object_id,
                    target: a.target.expect("foreground has a target").to_array(),
                })
                .collect();
            write_jsonl(&output.join(format!("{id:06}_targets.jsonl")), &rows)?;
            Ok(AnchorFrameSummary {
                frame_id: id,
                foreground: set.foreground_count(),
                ignore: set.count(AnchorLabel::Ignore),
                unassigned: set.unassigned.clone(),
                fallback: set.fallback.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_json(&output.join("summary.json"), &summaries)?;
    let foreground: usize = summaries.iter().map(|s| s.foreground).sum();
    let unassigned: usize = summaries.iter().map(|s| s.unassigned.len()).sum();
    Ok(json!({ "mode": mode, "frames": summaries.len(), "foreground": foreground, "unassigned": unassigned }))
}

pub fn targets_heatmap(
    input: &Path,
    output: &Path,
    config: &PipelineConfig,
    mode: Option<HeatmapMode>,
) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let mut spec = config.heatmap.clone();
    if let Some(m) = mode {
        spec.mode = m;
    }
    let results: Vec<(usize, Vec<FrameIssue<RenderIssue>>)> = ds
        .frames
        .par_iter()
        .map(|f| {
            let (hm, issues) = render_frame(&f.labels, &spec).map_err(CliError::pipeline)?;
            let id = f.frame.frame_id;
            let data = hm.channels.iter().flat_map(|r| r.data.iter().map(|v| *v as f32)).collect();
            TensorFile {
                dims: vec![spec.classes.len(), spec.height, spec.width],
                cell_size: spec.cell_size,
                origin: spec.origin,
                frames: 0,
                data: TensorData::F32(data),
            }
            .write(&output.join(format!("{id:06}_heatmap.bin")))?;
            write_jsonl(&output.join(format!("{id:06}_peaks.jsonl")), &hm.peaks)?;
            Ok((hm.peaks.len(), issues.into_iter().map(|issue| FrameIssue { frame_id: id, issue }).collect()))
        })
        .collect::<Result<_>>()?;
    let peaks: usize = results.iter().map(|r| r.0).sum();
    let issues: Vec<FrameIssue<RenderIssue>> = results.into_iter().flat_map(|r| r.1).collect();
    write_jsonl(&output.join("issues.jsonl"), &issues)?;
    Ok(json!({ "mode": spec.mode, "frames": ds.frames.len(), "peaks": peaks, "issues": issues.len() }))
}

pub fn fuse_camera(input: &Path, output: &Path, config: &PipelineConfig) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let cameras: Vec<CameraModel> = read_json(&input.join(CAMERAS_FILE))?;
    let records: Vec<CameraDetectionRecord> = read_jsonl(&input.join(CAMERA_DETECTIONS_FILE))?;
    let mut by_frame: BTreeMap<(u64, usize), Vec<Detection2D>> = BTreeMap::new();
    for r in records {
        if r.camera >= cameras.len() {
            return Err(CliError::Pipeline(format!("frame {}: unknown camera {}", r.frame_id, r.camera)));
        }
        by_frame.entry((r.frame_id, r.camera)).or_default().extend(r.detections);
    }
    let fused: Vec<(shape_targets::augment::LabeledFrame, usize)> = ds
        .frames
        .par_iter()
        .map(|f| {
            let id = f.frame.frame_id;
            // shutter times in the camera file are relative to the frame timestamp
            let cams: Vec<CameraModel> = cameras
                .iter()
                .map(|c| CameraModel { shutter_time: f.frame.timestamp + c.shutter_time, ..c.clone() })
                .collect();
            let dets: Vec<Vec<Detection2D>> =
                (0..cams.len()).map(|c| by_frame.get(&(id, c)).cloned().unwrap_or_default()).collect();
            let cols = annotate_frame(&f.frame, &cams, &dets, &config.fusion).map_err(CliError::pipeline)?;
            let mut out = f.clone();
            cols.write_into(&mut out.frame);
            Ok((out, cols.visible.iter().filter(|v| **v).count()))
        })
        .collect::<Result<_>>()?;
    let visible: usize = fused.iter().map(|f| f.1).sum();
    let total: usize = fused.iter().map(|f| f.0.frame.cloud.len()).sum();
    let frames = fused.into_iter().map(|f| f.0).collect();
    Dataset::from_frames(frames, Some(&ds.records)).save(output)?;
    copy_if_present(input, output, CAMERAS_FILE)?;
    copy_if_present(input, output, CAMERA_DETECTIONS_FILE)?;
    copy_if_present(input, output, DETECTIONS_FILE)?;
    Ok(json!({ "frames": ds.frames.len(), "points": total, "visible_points": visible }))
}

pub fn stack_temporal(input: &Path, output: &Path, config: &PipelineConfig) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let stage = &config.temporal;
    let start = ds.frames.len().saturating_sub(stage.frames);
    let frames: Vec<_> = ds.frames[start..].iter().map(|f| f.frame.clone()).collect();
    let seq = compensate_and_merge(&frames).map_err(CliError::pipeline)?;
    let tensor = pillarize(&seq.frames, &stage.grid, stage.max_points_per_pillar).map_err(CliError::pipeline)?;
    let out = match stage.encoder {
        EncoderKind::Mean => encode_and_stack(&tensor, &MeanEncoder),
        EncoderKind::Max => encode_and_stack(&tensor, &MaxEncoder),
    }
    .map_err(CliError::pipeline)?;
    TensorFile::from_bev_grid(&out.grid).write(output)?;
    Ok(json!({
        "shape": out.grid.shape(),
        "frames": out.grid.frames,
        "pillars": out.encoder_invocations,
        "truncated_points": tensor.truncated,
        "out_of_extent_pillars": out.out_of_extent.len(),
    }))
}

pub fn evaluate(
    input: &Path,
    detections: Option<&Path>,
    output: &Path,
    csv: Option<&Path>,
    config: &PipelineConfig,
    mode: Option<MatchMode>,
) -> Result<Value> {
    let ds = Dataset::load(input)?;
    let det_path: PathBuf = detections.map_or_else(|| input.join(DETECTIONS_FILE), Path::to_path_buf);
    let dets: Vec<DetectionRecord> = read_jsonl(&det_path)?;
    let mut per_frame: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for d in dets {
        per_frame.entry(d.frame_id).or_default().push(d.detection);
    }
    let frames: Vec<EvalFrame> = ds
        .frames
        .par_iter()
        .zip(&ds.records)
        .map(|(f, r)| EvalFrame {
            frame_id: f.frame.frame_id,
            gt: f.labels.clone(),
            gt_points: Some(count_points(&f.frame.cloud, &f.labels)),
            detections: per_frame.get(&f.frame.frame_id).cloned().unwrap_or_default(),
            zones: r.nlz.clone(),
        })
        .collect();
    let mut eval_config = config.eval.clone();
    if let Some(m) = mode {
        eval_config.mode = m;
    }
    let report = run_eval(&frames, &eval_config).map_err(CliError::pipeline)?;
    write_json(output, &report)?;
    if let Some(csv) = csv {
        write_bytes(csv, report.pr_curves_csv().as_bytes())?;
    }
    let aps: BTreeMap<String, Option<f64>> = report.classes.iter().map(|c| (c.class.to_string(), c.ap)).collect();
    Ok(json!({ "map": report.map, "ap": aps, "absent": report.absent }))
}

/// Writes one plane of a tensor file as an 8-bit PNG, largest y at the top.
pub fn render(input: &Path, output: &Path, plane: usize, depth_index: usize) -> Result<Value> {
    let t = TensorFile::read(input)?;
    let (rows, cols, values) = t.plane(plane, depth_index).ok_or_else(|| {
        CliError::Pipeline(format!("plane {plane}/{depth_index} not in tensor of shape {:?}", t.dims))
    })?;
    let scale = match t.data {
        // anchor label codes 0, 1, 2
        TensorData::U8(_) => 127.0,
        TensorData::F32(_) => 255.0,
    };
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        for c in 0..cols {
            pixels.push((values[r * cols + c] * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    image::save_buffer(output, &pixels, cols as u32, rows as u32, image::ExtendedColorType::L8)
        .map_err(|e| CliError::Pipeline(format!("{}: {e}", output.display())))?;
    let lit = pixels.iter().filter(|p| **p > 0).count();
    Ok(json!({ "width": cols, "height": rows, "nonzero_pixels": lit }))
}
