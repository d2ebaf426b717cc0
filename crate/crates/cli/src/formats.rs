//! Versioned on-disk formats.
//!
//! Binary files start with a 64-byte little-endian header and a 4-byte
//! magic. Everything else is JSON or line-delimited JSON with unit suffixes
//! in field names.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use shape_targets::augment::{GtDatabase, GtDatabaseEntry, HistoryStep, LabeledFrame, PairLink};
use shape_targets::eval::NoLabelZone;
use shape_targets::temporal::BevGrid;
use shape_targets::{Box7, Column, Label, ObjectClass, PointCloud, PointCloudFrame, Pose2};

use crate::error::{CliError, Result};

pub const HEADER_LEN: usize = 64;
pub const POINTS_MAGIC: &[u8; 4] = b"STPC";
pub const TENSOR_MAGIC: &[u8; 4] = b"STTN";
pub const VERSION: u16 = 1;
const MAX_COLUMNS: usize = HEADER_LEN - 20;
const MAX_RANK: usize = 6;

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const CAMERA_DETECTIONS_FILE: &str = "camera_detections.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GTDB_INDEX: &str = "index.json";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

fn f64_at(b: &[u8], o: usize) -> f64 {
    f64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

fn check_header(path: &Path, b: &[u8], magic: &[u8; 4]) -> Result<()> {
    if b.len() < HEADER_LEN {
        return Err(CliError::format(path, b.len() as u64, format!("file shorter than the {HEADER_LEN}-byte header")));
    }
    if &b[..4] != magic {
        return Err(CliError::format(path, 0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = u16_at(b, 4);
    if version != VERSION {
        return Err(CliError::format(path, 4, format!("unsupported version {version}")));
    }
    Ok(())
}

fn check_zero(path: &Path, b: &[u8], range: std::ops::Range<usize>) -> Result<()> {
    match b[range.clone()].iter().position(|x| *x != 0) {
        Some(k) => Err(CliError::format(path, (range.start + k) as u64, "reserved byte is not zero")),
        None => Ok(()),
    }
}

fn check_payload(path: &Path, b: &[u8], expected: usize) -> Result<()> {
    let total = HEADER_LEN.saturating_add(expected);
    if b.len() < total {
        return Err(CliError::format(path, b.len() as u64, format!("truncated payload, expected {total} bytes")));
    }
    if b.len() > total {
        return Err(CliError::format(path, total as u64, "trailing bytes after payload"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// point blobs

/// Header: magic, version u16, reserved u16, point count u64, column count
/// u32, then one byte per column (tag + 1, zero padded). Rows are f32.
pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    assert!(cloud.stride() <= MAX_COLUMNS, "too many columns for the point header");
    let mut out = Vec::with_capacity(HEADER_LEN + cloud.values().len() * 4);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cloud.stride() as u32).to_le_bytes());
    for c in cloud.columns() {
        out.push(c.tag() + 1);
    }
    out.resize(HEADER_LEN, 0);
    for v in cloud.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_points(path: &Path, b: &[u8]) -> Result<PointCloud> {
    check_header(path, b, POINTS_MAGIC)?;
    check_zero(path, b, 6..8)?;
    let n = u64_at(b, 8);
    let stride = u32_at(b, 16) as usize;
    if !(3..=MAX_COLUMNS).contains(&stride) {
        return Err(CliError::format(path, 16, format!("column count {stride} outside 3..={MAX_COLUMNS}")));
    }
    let mut columns = Vec::with_capacity(stride);
    for k in 0..stride {
        let tag = b[20 + k];
        let col = tag
            .checked_sub(1)
            .and_then(Column::from_tag)
            .ok_or_else(|| CliError::format(path, (20 + k) as u64, format!("unknown column tag {tag}")))?;
        columns.push(col);
    }
    if columns[..3] != [Column::X, Column::Y, Column::Z] {
        return Err(CliError::format(path, 20, "columns must start with x, y, z"));
    }
    check_zero(path, b, 20 + stride..HEADER_LEN)?;
    let len = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(stride * 4))
        .ok_or_else(|| CliError::format(path, 8, format!("point count {n} too large")))?;
    check_payload(path, b, len)?;
    let values = b[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(PointCloud::from_values(columns, values).expect("length checked"))
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_points(cloud))
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    decode_points(path, &read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// dense tensors

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::U8(_) => 1,
            TensorData::F32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, k: usize) -> f64 {
        match self {
            TensorData::U8(v) => v[k] as f64,
            TensorData::F32(v) => v[k] as f64,
        }
    }
}

/// A dense row-major tensor with optional BEV placement.
///
/// Header: magic, version u16, dtype u8 (1 = u8, 2 = f32), rank u8, six u32
/// dims, cell size f64, origin x/y f64, frame count u32, reserved u32.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub frames: u32,
    pub data: TensorData,
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        assert!(!self.dims.is_empty() && self.dims.len() <= MAX_RANK);
        assert_eq!(self.dims.iter().product::<usize>(), self.data.len());
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for k in 0..MAX_RANK {
            out.extend_from_slice(&(self.dims.get(k).copied().unwrap_or(0) as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.cell_size.to_le_bytes());
        out.extend_from_slice(&self.origin[0].to_le_bytes());
        out.extend_from_slice(&self.origin[1].to_le_bytes());
        out.extend_from_slice(&self.frames.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(path: &Path, b: &[u8]) -> Result<Self> {
        check_header(path, b, TENSOR_MAGIC)?;
        let dtype = b[6];
        let width = match dtype {
            1 => 1,
            2 => 4,
            _ => return Err(CliError::format(path, 6, format!("unknown dtype {dtype}"))),
        };
        let rank = b[7] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CliError::format(path, 7, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let dims: Vec<usize> = (0..rank).map(|k| u32_at(b, 8 + 4 * k) as usize).collect();
        check_zero(path, b, 8 + 4 * rank..32)?;
        check_zero(path, b, 60..64)?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| CliError::format(path, 8, "tensor too large"))?;
        check_payload(path, b, count)?;
        let payload = &b[HEADER_LEN..];
        let data = match dtype {
            1 => TensorData::U8(payload.to_vec()),
            _ => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, cell_size: f64_at(b, 32), origin: [f64_at(b, 40), f64_at(b, 48)], frames: u32_at(b, 56), data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(path, &read_bytes(path)?)
    }

    pub fn from_bev_grid(grid: &BevGrid) -> Self {
        Self {
            dims: vec![grid.batch, grid.size_x, grid.size_y, grid.channels],
            cell_size: grid.cell_size,
            origin: grid.origin,
            frames: grid.frames as u32,
            data: TensorData::F32(grid.data.iter().map(|v| *v as f32).collect()),
        }
    }

    pub fn to_bev_grid(&self) -> Option<BevGrid> {
        let [batch, size_x, size_y, channels] = self.dims[..] else { return None };
        let TensorData::F32(v) = &self.data else { return None };
        Some(BevGrid {
            batch,
            size_x,
            size_y,
            channels,
            frames: self.frames as usize,
            cell_size: self.cell_size,
            origin: self.origin,
            data: v.iter().map(|x| *x as f64).collect(),
        })
    }

    /// One 2D plane of a tensor whose last two axes are (rows, columns),
    /// or, for four-dimensional tensors, (rows, columns, depth) flattened by `depth_index`.
    pub fn plane(&self, plane: usize, depth_index: usize) -> Option<(usize, usize, Vec<f64>)> {
        let (rows, cols, depth) = match self.dims.len() {
            2 => (self.dims[0], self.dims[1], 1),
            3 => (self.dims[1], self.dims[2], 1),
            4 => (self.dims[1], self.dims[2], self.dims[3]),
            _ => return None,
        };
        let planes = if self.dims.len() == 2 { 1 } else { self.dims[0] };
        if plane >= planes || depth_index >= depth {
            return None;
        }
        let base = plane * rows * cols * depth;
        let values = (0..rows * cols).map(|k| self.data.get(base + k * depth + depth_index)).collect();
        Some((rows, cols, values))
    }
}

// ---------------------------------------------------------------------------
// JSON and JSON lines

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| CliError::format(path, e.utf8_error().valid_up_to() as u64, "invalid UTF-8"))
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| CliError::format(path, byte_offset(text, e.line(), e.column()), e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read_text(path)?)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_pretty(value).as_bytes())
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() {
            let v = serde_json::from_str(body)
                .map_err(|e| CliError::format(path, (offset + e.column().saturating_sub(1)) as u64, e.to_string()))?;
            out.push(v);
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_text(path)?)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_bytes(path, to_jsonl(items).as_bytes())
}

// ---------------------------------------------------------------------------
// datasets

/// Ego pose; `z`, roll and pitch are carried but unused by the planar pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPoseRecord {
    pub tx_m: f64,
    pub ty_m: f64,
    pub theta_rad: f64,
    #[serde(default)]
    pub z_m: f64,
    #[serde(default)]
    pub roll_rad: f64,
    #[serde(default)]
    pub pitch_rad: f64,
}

impl From<Pose2> for EgoPoseRecord {
    fn from(p: Pose2) -> Self {
        Self { tx_m: p.tx, ty_m: p.ty, theta_rad: p.theta, z_m: 0.0, roll_rad: 0.0, pitch_rad: 0.0 }
    }
}

impl EgoPoseRecord {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.tx_m, self.ty_m, self.theta_rad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_pose: Option<EgoPoseRecord>,
    /// Point blob, relative to the dataset directory.
    pub points: String,
    #[serde(default)]
    pub labels: Vec<Label>,
    #[serde(default)]
    pub nlz: Vec<NoLabelZone>,
}

impl FrameRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut ids: Vec<u64> = self.labels.iter().map(|l| l.object_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(format!("frame {}: duplicate object id", self.frame_id));
        }
        for l in &self.labels {
            if let Some(p) = l.pair_id {
                if ids.binary_search(&p).is_err() {
                    return Err(format!("frame {}: object {} pairs with missing id {p}", self.frame_id, l.object_id));
                }
            }
        }
        Ok(())
    }
}

/// One camera's 2D detections for a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDetectionRecord {
    pub frame_id: u64,
    pub camera: usize,
    pub detections: Vec<shape_targets::fusion::Detection2D>,
}

/// A 3D detection for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: u64,
    #[serde(flatten)]
    pub detection: shape_targets::eval::Detection,
}

pub fn points_file_name(frame_id: u64) -> String {
    format!("points/{frame_id:06}.pts")
}

/// A dataset directory: `frames.jsonl` plus point blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FrameRecord>,
    pub frames: Vec<LabeledFrame>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let frames_path = dir.join(FRAMES_FILE);
        let records: Vec<FrameRecord> = read_jsonl(&frames_path)?;
        let mut frames = Vec::with_capacity(records.len());
        for r in &records {
            r.validate().map_err(|m| CliError::format(&frames_path, 0, m))?;
            let cloud = read_points(&dir.join(&r.points))?;
            frames.push(LabeledFrame {
                frame: PointCloudFrame {
                    frame_id: r.frame_id,
                    timestamp: r.timestamp_s,
                    ego_pose: r.ego_pose.map(|p| p.pose()),
                    cloud,
                },
                labels: r.labels.clone(),
            });
        }
        Ok(Self { records, frames })
    }

    /// Builds records for frames, keeping any NLZs and extra pose fields from `template`.
    pub fn from_frames(frames: Vec<LabeledFrame>, template: Option<&[FrameRecord]>) -> Self {
        let records = frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let old = template.and_then(|t| t.get(k));
                FrameRecord {
                    frame_id: f.frame.frame_id,
                    timestamp_s: f.frame.timestamp,
                    ego_pose: f.frame.ego_pose.map(|p| {
                        let mut rec = old.and_then(|o| o.ego_pose).unwrap_or_else(|| p.into());
                        (rec.tx_m, rec.ty_m, rec.theta_rad) = (p.tx, p.ty, p.theta);
                        rec
                    }),
                    points: old.map_or_else(|| points_file_name(f.frame.frame_id), |o| o.points.clone()),
                    labels: f.labels.clone(),
                    nlz: old.map(|o| o.nlz.clone()).unwrap_or_default(),
                }
            })
            .collect();
        Self { records, frames }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (r, f) in self.records.iter().zip(&self.frames) {
            write_points(&dir.join(&r.points), &f.frame.cloud)?;
        }
        write_jsonl(&dir.join(FRAMES_FILE), &self.records)
    }
}

// ---------------------------------------------------------------------------
// ground-truth database

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub age: usize,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub interpolated: bool,
    pub points: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub entry_id: usize,
    pub object_id: u64,
    pub source_frame: u64,
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub source_pose: Pose2,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairLink>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtDatabaseIndex {
    pub version: u16,
    pub entries: Vec<EntryRecord>,
}

fn step_blob_name(entry: usize, age: usize) -> String {
    format!("entries/{entry:06}_{age}.pts")
}

pub fn write_gt_database(dir: &Path, db: &GtDatabase) -> Result<()> {
    let mut entries = Vec::with_capacity(db.entries.len());
    for e in &db.entries {
        let mut steps = Vec::with_capacity(e.steps.len());
        for s in &e.steps {
            let name = step_blob_name(e.entry_id, s.age);
            write_points(&dir.join(&name), &s.points)?;
            steps.push(StepRecord { age: s.age, bbox: s.bbox, interpolated: s.interpolated, points: name });
        }
        entries.push(EntryRecord {
            entry_id: e.entry_id,
            object_id: e.object_id,
            source_frame: e.source_frame,
            class: e.class,
            bbox: e.bbox,
            source_pose: e.source_pose,
            pair: e.pair,
            steps,
        });
    }
    write_json(&dir.join(GTDB_INDEX), &GtDatabaseIndex { version: VERSION, entries })
}

pub fn read_gt_database(dir: &Path) -> Result<GtDatabase> {
    let index_path = dir.join(GTDB_INDEX);
    let index: GtDatabaseIndex = read_json(&index_path)?;
    if index.version != VERSION {
        return Err(CliError::format(&index_path, 0, format!("unsupported database version {}", index.version)));
    }
    let n = index.entries.len();
    let mut entries = Vec::with_capacity(n);
    for (k, e) in index.entries.into_iter().enumerate() {
        if e.entry_id != k || e.pair.is_some_and(|p| p.partner_entry >= n) {
            return Err(CliError::format(&index_path, 0, format!("entry {k} has inconsistent ids")));
        }
        let steps = e
            .steps
            .into_iter()
            .map(|s| {
                Ok(HistoryStep {
                    age: s.age,
                    bbox: s.bbox,
                    points: read_points(&dir.join(&s.points))?,
                    interpolated: s.interpolated,
                })
            })
            .collect::<Result<_>>()?;
        entries.push(GtDatabaseEntry {
            entry_id: e.entry_id,
            object_id: e.object_id,
            source_frame: e.source_frame,
            class: e.class,
            bbox: e.bbox,
            source_pose: e.source_pose,
            steps,
            pair: e.pair,
        });
    }
    Ok(GtDatabase { entries })
}

/// Files below `dir`, sorted, relative to it.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| CliError::io(&d, e))? {
            let path = entry.map_err(|e| CliError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        let mut c = PointCloud::default();
        c.push(&[1.0, 2.0, 3.0, 0.5, 0.0, 4.0, 4.0]);
        c.push(&[-1.25, 0.1, 0.2, 0.25, -0.05, 1.0, 4.0]);
        c
    }

    #[test]
    fn points_round_trip() {
        let p = Path::new("x.pts");
        let bytes = encode_points(&cloud());
        assert_eq!(bytes.len(), 64 + 2 * 7 * 4);
        let back = decode_points(p, &bytes).unwrap();
        assert_eq!(back.columns(), cloud().columns());
        assert_eq!(encode_points(&back), bytes);
    }

    #[test]
    fn points_errors_name_offsets() {
        let p = Path::new("x.pts");
        let good = encode_points(&cloud());
        let offset = |b: &[u8]| match decode_points(p, b) {
            Err(CliError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(&good[..10]), 10);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(offset(&bad), 4);
        let mut bad = good.clone();
        bad[22] = 200;
        assert_eq!(offset(&bad), 22);
        assert_eq!(offset(&good[..good.len() - 3]), (good.len() - 3) as u64);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset(&long), good.len() as u64);
    }

    #[test]
    fn tensor_round_trip() {
        let t = TensorFile {
            dims: vec![2, 3, 4],
            cell_size: 0.2,
            origin: [-1.0, 5.5],
            frames: 0,
            data: TensorData::F32((0..24).map(|k| k as f32 * 0.5).collect()),
        };
        let b = t.encode();
        let back = TensorFile::decode(Path::new("t"), &b).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode(), b);
        let (rows, cols, v) = t.plane(1, 0).unwrap();
        assert_eq!((rows, cols, v[0]), (3, 4, 6.0));
    }

    #[test]
    fn jsonl_error_offset() {
        let text = "{\"a\":1}\n{\"a\":}\n";
        #[derive(Deserialize, Debug)]
        #[allow(dead_code)]
        struct A {
            a: u32,
        }
        match parse_jsonl::<A>(Path::new("f"), text) {
            Err(CliError::Format { offset, .. }) => assert_eq!(offset, 8 + 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frame_record_validation() {
        let b = Box7::new([0.0, 0.0, 1.0], [2.0, 4.0, 2.0], 0.0).unwrap();
        let rec = FrameRecord {
            frame_id: 1,
            timestamp_s: 0.0,
            ego_pose: None,
            points: points_file_name(1),
            labels: vec![Label { object_id: 1, class: ObjectClass::Truck, bbox: b, pair_id: Some(2) }],
            nlz: vec![],
        };
        assert!(rec.validate().is_err());
        let line = serde_json::to_string(&rec).unwrap();
        let back: FrameRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), line);
    }
}
