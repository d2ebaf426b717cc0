//! Multi-frame pillar layout.
//!
//! N ego-compensated sweeps are pillarized into a `[B, N, P, M, F0]` tensor,
//! folded to `[B·N, P, M, F0]` for a per-pillar encoder, scattered to
//! `[B·N, X, Y, F1]` and unfolded to `[B, X, Y, N·F1]`. Channel blocks are
//! frame-major with the oldest frame first.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{transform_points, Column, PointCloud, PointCloudFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemporalError {
    #[error("frame {0} has no ego pose")]
    MissingPose(u64),
    #[error("frames are not time-ordered at frame {0}")]
    NotTimeOrdered(u64),
    #[error("no frames given")]
    Empty,
    #[error("{channels} channels cannot be split into {frames} frames")]
    IndivisibleChannels { channels: usize, frames: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Frames expressed in the newest frame's ego coordinates, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedSequence {
    pub frames: Vec<PointCloud>,
}

impl CompensatedSequence {
    /// All points in one cloud with a trailing `FrameIndex` column.
    pub fn merged(&self) -> PointCloud {
        let Some(first) = self.frames.first() else {
            return PointCloud::from_xyz([]);
        };
        let mut columns = first.columns().to_vec();
        columns.push(Column::FrameIndex);
        let mut out = PointCloud::new(columns.clone());
        for (t, cloud) in self.frames.iter().enumerate() {
            for r in cloud.rows() {
                let mut row = Vec::with_capacity(columns.len());
                for c in &columns[..columns.len() - 1] {
                    row.push(cloud.column_index(*c).map_or(0.0, |k| r[k]));
                }
                row.push(t as f64);
                out.push(&row);
            }
        }
        out
    }
}

/// Moves every frame into the newest frame's ego coordinates.
pub fn compensate_and_merge(frames: &[PointCloudFrame]) -> Result<CompensatedSequence, TemporalError> {
    let newest = frames.last().ok_or(TemporalError::Empty)?;
    for w in frames.windows(2) {
        if w[1].timestamp < w[0].timestamp {
            return Err(TemporalError::NotTimeOrdered(w[1].frame_id));
        }
    }
    let reference = newest.ego_pose.ok_or(TemporalError::MissingPose(newest.frame_id))?.inverse();
    let frames = frames
        .iter()
        .map(|f| {
            let pose = f.ego_pose.ok_or(TemporalError::MissingPose(f.frame_id))?;
            Ok(transform_points(&f.cloud, &reference.compose(&pose)))
        })
        .collect::<Result<_, TemporalError>>()?;
    Ok(CompensatedSequence { frames })
}

/// Grid geometry for pillarization and scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    #[serde(rename = "origin_m")]
    pub origin: [f64; 2],
    #[serde(rename = "cell_size_m")]
    pub cell_size: f64,
    pub size_x: usize,
    pub size_y: usize,
}

impl BevGridSpec {
    /// Integer cell of a planar point (unbounded).
    pub fn cell_index(&self, x: f64, y: f64) -> (i64, i64) {
        (((x - self.origin[0]) / self.cell_size).floor() as i64, ((y - self.origin[1]) / self.cell_size).floor() as i64)
    }

    pub fn cell_center(&self, i: i64, j: i64) -> (f64, f64) {
        (self.origin[0] + (i as f64 + 0.5) * self.cell_size, self.origin[1] + (j as f64 + 0.5) * self.cell_size)
    }

    pub fn in_extent(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.size_x && (j as usize) < self.size_y
    }
}

/// Dense, zero-padded `[B, N, P, M, F0]` pillar tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub batch: usize,
    pub frames: usize,
    pub max_pillars: usize,
    pub max_points: usize,
    pub features: usize,
    /// Source columns; the last two features are the x/y offsets from the pillar center.
    pub columns: Vec<Column>,
    pub grid: BevGridSpec,
    pub data: Vec<f64>,
    /// `[B, N, P]` cell of each pillar slot, `None` for padding.
    pub coords: Vec<Option<(i64, i64)>>,
    /// `[B, N, P]` number of valid points per slot.
    pub counts: Vec<usize>,
    /// Points dropped because their pillar was full.
    pub truncated: usize,
}

impl PillarTensor {
    pub fn shape(&self) -> [usize; 5] {
        [self.batch, self.frames, self.max_pillars, self.max_points, self.features]
    }

    /// Shape after folding frames into the batch axis; the buffer is unchanged.
    pub fn folded_shape(&self) -> [usize; 4] {
        [self.batch * self.frames, self.max_pillars, self.max_points, self.features]
    }

    /// Valid point rows of pillar `p` in folded sample `bn`.
    pub fn pillar_points(&self, bn: usize, p: usize) -> &[f64] {
        let slot = bn * self.max_pillars + p;
        let start = slot * self.max_points * self.features;
        &self.data[start..start + self.counts[slot] * self.features]
    }

    pub fn pillar_coord(&self, bn: usize, p: usize) -> Option<(i64, i64)> {
        self.coords[bn * self.max_pillars + p]
    }
}

/// Buckets each frame's points by BEV cell, keeping the first
/// `max_points_per_pillar` points of a pillar in acquisition order.
pub fn pillarize(
    frames: &[PointCloud],
    grid: &BevGridSpec,
    max_points_per_pillar: usize,
) -> Result<PillarTensor, TemporalError> {
    pillarize_batch(&[frames.to_vec()], grid, max_points_per_pillar)
}

pub fn pillarize_batch(
    samples: &[Vec<PointCloud>],
    grid: &BevGridSpec,
    max_points_per_pillar: usize,
) -> Result<PillarTensor, TemporalError> {
    if !(grid.cell_size > 0.0) {
        return Err(TemporalError::InvalidParameter(format!("cell size {}", grid.cell_size)));
    }
    if max_points_per_pillar == 0 {
        return Err(TemporalError::InvalidParameter("max points per pillar is 0".into()));
    }
    let first = samples.first().and_then(|s| s.first()).ok_or(TemporalError::Empty)?;
    let columns = first.columns().to_vec();
    let frames = samples[0].len();
    for s in samples {
        if s.len() != frames {
            return Err(TemporalError::ShapeMismatch("samples differ in frame count".into()));
        }
        if s.iter().any(|c| c.columns() != columns.as_slice()) {
            return Err(TemporalError::ShapeMismatch("clouds differ in columns".into()));
        }
    }

    let mut buckets: Vec<BTreeMap<(i64, i64), Vec<usize>>> = Vec::new();
    let mut truncated = 0;
    for s in samples {
        for cloud in s {
            let mut map: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
            for (k, p) in cloud.xyz_iter().enumerate() {
                let members = map.entry(grid.cell_index(p[0], p[1])).or_default();
                if members.len() < max_points_per_pillar {
                    members.push(k);
                } else {
                    truncated += 1;
                }
            }
            buckets.push(map);
        }
    }

    let max_pillars = buckets.iter().map(|m| m.len()).max().unwrap_or(0);
    let features = columns.len() + 2;
    let slots = samples.len() * frames * max_pillars;
    let mut data = vec![0.0; slots * max_points_per_pillar * features];
    let mut coords = vec![None; slots];
    let mut counts = vec![0; slots];
    for (bn, map) in buckets.iter().enumerate() {
        let cloud = &samples[bn / frames][bn % frames];
        for (p, (&(i, j), members)) in map.iter().enumerate() {
            let slot = bn * max_pillars + p;
            coords[slot] = Some((i, j));
            counts[slot] = members.len();
            let (px, py) = grid.cell_center(i, j);
            for (m, &k) in members.iter().enumerate() {
                let start = (slot * max_points_per_pillar + m) * features;
                let row = cloud.row(k);
                data[start..start + row.len()].copy_from_slice(row);
                data[start + row.len()] = row[0] - px;
                data[start + row.len() + 1] = row[1] - py;
            }
        }
    }

    Ok(PillarTensor {
        batch: samples.len(),
        frames,
        max_pillars,
        max_points: max_points_per_pillar,
        features,
        columns,
        grid: *grid,
        data,
        coords,
        counts,
        truncated,
    })
}

/// A pure per-pillar reduction standing in for a learned point encoder.
pub trait PillarEncoder {
    fn output_features(&self, input_features: usize) -> usize;

    /// `points` holds `count` rows of `features` values.
    fn encode(&self, points: &[f64], count: usize, features: usize, out: &mut [f64]);
}

/// Per-feature mean, followed by the point count.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanEncoder;

/// Per-feature maximum, followed by the point count.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxEncoder;

impl PillarEncoder for MeanEncoder {
    fn output_features(&self, input_features: usize) -> usize {
        input_features + 1
    }

    fn encode(&self, points: &[f64], count: usize, features: usize, out: &mut [f64]) {
        for f in 0..features {
            // index order keeps the sum deterministic
            let mut sum = 0.0;
            for m in 0..count {
                sum += points[m * features + f];
            }
            out[f] = sum / count as f64;
        }
        out[features] = count as f64;
    }
}

impl PillarEncoder for MaxEncoder {
    fn output_features(&self, input_features: usize) -> usize {
        input_features + 1
    }

    fn encode(&self, points: &[f64], count: usize, features: usize, out: &mut [f64]) {
        for f in 0..features {
            out[f] = (0..count).map(|m| points[m * features + f]).fold(f64::NEG_INFINITY, f64::max);
        }
        out[features] = count as f64;
    }
}

/// Dense `[B, X, Y, C]` BEV feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub batch: usize,
    pub size_x: usize,
    pub size_y: usize,
    pub channels: usize,
    /// Number of stacked frames the channel axis carries.
    pub frames: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(batch: usize, spec: &BevGridSpec, channels: usize, frames: usize) -> Self {
        Self {
            batch,
            size_x: spec.size_x,
            size_y: spec.size_y,
            channels,
            frames,
            cell_size: spec.cell_size,
            origin: spec.origin,
            data: vec![0.0; batch * spec.size_x * spec.size_y * channels],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.size_x, self.size_y, self.channels]
    }

    pub fn index(&self, b: usize, x: usize, y: usize, c: usize) -> usize {
        ((b * self.size_x + x) * self.size_y + y) * self.channels + c
    }

    pub fn get(&self, b: usize, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(b, x, y, c)]
    }

    /// Cells where any channel of frame block `t` is non-zero.
    pub fn occupied_cells(&self, b: usize, t: usize) -> Vec<(usize, usize)> {
        let per = self.channels / self.frames.max(1);
        let mut out = Vec::new();
        for x in 0..self.size_x {
            for y in 0..self.size_y {
                if (0..per).any(|f| self.get(b, x, y, t * per + f) != 0.0) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Concatenates per-frame grids along the channel axis, oldest first.
pub fn stack(grids: &[BevGrid]) -> Result<BevGrid, TemporalError> {
    let first = grids.first().ok_or(TemporalError::Empty)?;
    if grids.iter().any(|g| g.shape() != first.shape()) {
        return Err(TemporalError::ShapeMismatch("per-frame grids differ in shape".into()));
    }
    let per = first.channels;
    let n = grids.len();
    let mut out =
        BevGrid { channels: per * n, frames: n * first.frames, data: vec![0.0; first.data.len() * n], ..first.clone() };
    let cells = first.batch * first.size_x * first.size_y;
    for cell in 0..cells {
        for (t, g) in grids.iter().enumerate() {
            let dst = cell * per * n + t * per;
            out.data[dst..dst + per].copy_from_slice(&g.data[cell * per..(cell + 1) * per]);
        }
    }
    Ok(out)
}

/// Splits the channel axis back into `n` per-frame grids.
pub fn unstack(grid: &BevGrid, n: usize) -> Result<Vec<BevGrid>, TemporalError> {
    if n == 0 || !grid.channels.is_multiple_of(n) {
        return Err(TemporalError::IndivisibleChannels { channels: grid.channels, frames: n });
    }
    let per = grid.channels / n;
    let cells = grid.batch * grid.size_x * grid.size_y;
    let mut out: Vec<BevGrid> = (0..n)
        .map(|_| BevGrid {
            channels: per,
            frames: grid.frames / n,
            data: Vec::with_capacity(cells * per),
            ..grid.clone()
        })
        .collect();
    for cell in 0..cells {
        for (t, g) in out.iter_mut().enumerate() {
            let src = cell * grid.channels + t * per;
            g.data.extend_from_slice(&grid.data[src..src + per]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutOfExtent {
    pub batch: usize,
    pub frame: usize,
    pub i: i64,
    pub j: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOutput {
    pub grid: BevGrid,
    pub out_of_extent: Vec<OutOfExtent>,
    pub encoder_invocations: usize,
}

/// Encodes every pillar of the folded `[B·N, …]` tensor, scatters per frame
/// and stacks the frame grids along channels.
pub fn encode_and_stack<E: PillarEncoder>(tensor: &PillarTensor, encoder: &E) -> Result<StackOutput, TemporalError> {
    let spec = &tensor.grid;
    let f1 = encoder.output_features(tensor.features);
    let mut frame_grids: Vec<BevGrid> = (0..tensor.frames).map(|_| BevGrid::zeros(tensor.batch, spec, f1, 1)).collect();
    let mut out_of_extent = Vec::new();
    let mut invocations = 0;
    let mut encoded = vec![0.0; f1];
    for bn in 0..tensor.batch * tensor.frames {
        let (b, t) = (bn / tensor.frames, bn % tensor.frames);
        for p in 0..tensor.max_pillars {
            let Some((i, j)) = tensor.pillar_coord(bn, p) else { continue };
            let count = tensor.counts[bn * tensor.max_pillars + p];
            if count == 0 {
                continue;
            }
            encoder.encode(tensor.pillar_points(bn, p), count, tensor.features, &mut encoded);
            invocations += 1;
            if !spec.in_extent(i, j) {
                out_of_extent.push(OutOfExtent { batch: b, frame: t, i, j });
                continue;
            }
            let g = &mut frame_grids[t];
            let start = g.index(b, i as usize, j as usize, 0);
            g.data[start..start + f1].copy_from_slice(&encoded);
        }
    }
    Ok(StackOutput { grid: stack(&frame_grids)?, out_of_extent, encoder_invocations: invocations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;

    fn spec() -> BevGridSpec {
        BevGridSpec { origin: [-10.0, -10.0], cell_size: 0.2, size_x: 100, size_y: 100 }
    }

    fn frame(id: u64, t: f64, pose: Option<Pose2>, pts: &[[f64; 3]]) -> PointCloudFrame {
        PointCloudFrame { frame_id: id, timestamp: t, ego_pose: pose, cloud: PointCloud::from_xyz(pts.iter().copied()) }
    }

    #[test]
    fn stationary_ego_leaves_points() {
        let pts = [[1.0, 2.0, 0.5], [-3.0, 0.25, 1.0]];
        let frames = [
            frame(0, 0.0, Some(Pose2::new(5.0, 1.0, 0.3)), &pts),
            frame(1, 0.5, Some(Pose2::new(5.0, 1.0, 0.3)), &pts),
        ];
        let seq = compensate_and_merge(&frames).unwrap();
        for f in &seq.frames {
            for (a, b) in f.xyz_iter().zip(pts) {
                assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-12));
            }
        }
        let merged = seq.merged();
        assert_eq!(merged.len(), 4);
        assert_eq!(merged.column_values(Column::FrameIndex).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn ego_advance_shifts_older_points_back() {
        let frames = [
            frame(0, 0.0, Some(Pose2::new(0.0, 0.0, 0.0)), &[[5.0, 0.0, 0.0]]),
            frame(1, 0.5, Some(Pose2::new(1.0, 0.0, 0.0)), &[[4.0, 0.0, 0.0]]),
        ];
        let seq = compensate_and_merge(&frames).unwrap();
        assert_eq!(seq.frames[0].xyz(0), [4.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_pose_and_order_errors() {
        let f = [frame(0, 0.0, Some(Pose2::identity()), &[]), frame(7, 0.5, None, &[])];
        assert_eq!(compensate_and_merge(&f), Err(TemporalError::MissingPose(7)));
        let f = [frame(0, 1.0, Some(Pose2::identity()), &[]), frame(1, 0.5, Some(Pose2::identity()), &[])];
        assert_eq!(compensate_and_merge(&f), Err(TemporalError::NotTimeOrdered(1)));
        assert_eq!(compensate_and_merge(&[]), Err(TemporalError::Empty));
    }

    #[test]
    fn single_point_single_pillar() {
        let t = pillarize(&[PointCloud::from_xyz([[0.33, -0.71, 1.0]])], &spec(), 8).unwrap();
        assert_eq!(t.shape(), [1, 1, 1, 8, 5]);
        assert_eq!(t.pillar_coord(0, 0), Some((51, 46)));
        let pts = t.pillar_points(0, 0);
        assert_eq!(pts.len(), 5);
        assert!((pts[3] - (0.33 - 0.3)).abs() < 1e-12 && (pts[4] - (-0.71 - -0.7)).abs() < 1e-12);
    }

    #[test]
    fn nearby_points_share_pillar() {
        let t = pillarize(&[PointCloud::from_xyz([[0.02, 0.02, 0.0], [0.07, 0.02, 0.0]])], &spec(), 8).unwrap();
        assert_eq!(t.max_pillars, 1);
        assert_eq!(t.counts[0], 2);
    }

    #[test]
    fn overflow_truncates_in_acquisition_order() {
        let pts: Vec<[f64; 3]> = (0..5).map(|k| [0.01 * k as f64, 0.0, k as f64]).collect();
        let t = pillarize(&[PointCloud::from_xyz(pts)], &spec(), 3).unwrap();
        assert_eq!(t.truncated, 2);
        let zs: Vec<f64> = t.pillar_points(0, 0).chunks(5).map(|r| r[2]).collect();
        assert_eq!(zs, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn invalid_pillar_params() {
        let c = [PointCloud::from_xyz([[0.0; 3]])];
        assert!(pillarize(&c, &BevGridSpec { cell_size: 0.0, ..spec() }, 4).is_err());
        assert!(pillarize(&c, &spec(), 0).is_err());
    }

    #[test]
    fn mean_and_max_encoders() {
        let points = [1.0, 10.0, 3.0, 20.0];
        let mut out = [0.0; 3];
        MeanEncoder.encode(&points, 2, 2, &mut out);
        assert_eq!(out, [2.0, 15.0, 2.0]);
        MaxEncoder.encode(&points, 2, 2, &mut out);
        assert_eq!(out, [3.0, 20.0, 2.0]);
    }

    #[test]
    fn unstack_rejects_indivisible() {
        let g = BevGrid::zeros(1, &spec(), 5, 1);
        assert_eq!(unstack(&g, 3), Err(TemporalError::IndivisibleChannels { channels: 5, frames: 3 }));
        assert_eq!(unstack(&g, 1).unwrap(), vec![g]);
    }

    #[test]
    fn out_of_extent_pillars_reported() {
        let frames = [PointCloud::from_xyz([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]])];
        let t = pillarize(&frames, &spec(), 4).unwrap();
        let out = encode_and_stack(&t, &MeanEncoder).unwrap();
        assert_eq!(out.out_of_extent.len(), 1);
        assert_eq!(out.out_of_extent[0].i, 300);
        assert_eq!(out.grid.occupied_cells(0, 0), vec![(50, 50)]);
    }

    #[test]
    fn channel_blocks_are_frame_major() {
        let frames = [
            PointCloud::from_xyz([[0.1, 0.1, 1.0]]),
            PointCloud::from_xyz([[0.1, 0.1, 2.0]]),
            PointCloud::from_xyz([[0.1, 0.1, 3.0]]),
        ];
        let t = pillarize(&frames, &spec(), 4).unwrap();
        let out = encode_and_stack(&t, &MeanEncoder).unwrap();
        assert_eq!(out.grid.channels, 18);
        // z is feature 2 of each 6-channel block
        let zs: Vec<f64> = (0..3).map(|k| out.grid.get(0, 50, 50, k * 6 + 2)).collect();
        assert_eq!(zs, vec![1.0, 2.0, 3.0]);
        assert_eq!(out.encoder_invocations, 3);
    }
}
