//! Anchor grids and foreground/ignore/background target assignment.
//!
//! Three assigners share one output type:
//! * [`assign_baseline_iou`]: two IoU thresholds plus a center fallback anchor,
//! * [`assign_center_only`]: exactly one anchor per object at its center cell,
//! * [`assign_adaptive_shape`]: anchors inside a rotated ellipse scaled by the
//!   object's length and width.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Label, ObjectClass};
use crate::geometry::{angle_diff, axis_aligned_iou_bev, rotated_iou_bev, Box7};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("invalid anchor grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("regression target is not finite")]
    NonFiniteTarget,
    #[error("yaw vector (sin, cos) is zero")]
    DegenerateYaw,
}

/// Mean anchor size for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorClassSpec {
    pub class: ObjectClass,
    #[serde(rename = "width_m")]
    pub width: f64,
    #[serde(rename = "length_m")]
    pub length: f64,
    #[serde(rename = "height_m")]
    pub height: f64,
    /// Height of the anchor center.
    #[serde(rename = "z_center_m")]
    pub z_center: f64,
}

impl AnchorClassSpec {
    pub fn new(class: ObjectClass, width: f64, length: f64, height: f64) -> Self {
        Self { class, width, length, height, z_center: height / 2.0 }
    }

    /// Typical mean sizes for the generator's classes.
    pub fn default_for(class: ObjectClass) -> Self {
        match class {
            ObjectClass::Car => Self::new(class, 1.9, 4.5, 1.6),
            ObjectClass::Truck => Self::new(class, 2.5, 6.5, 3.2),
            ObjectClass::Trailer => Self::new(class, 2.5, 13.6, 3.8),
            ObjectClass::Pedestrian => Self::new(class, 0.6, 0.6, 1.75),
            ObjectClass::Cyclist => Self::new(class, 0.7, 1.8, 1.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGridSpec {
    #[serde(rename = "x_range_m")]
    pub x_range: [f64; 2],
    #[serde(rename = "y_range_m")]
    pub y_range: [f64; 2],
    #[serde(rename = "cell_size_m")]
    pub cell_size: f64,
    pub classes: Vec<AnchorClassSpec>,
    #[serde(rename = "yaws_rad")]
    pub yaws: Vec<f64>,
}

impl AnchorGridSpec {
    pub const DEFAULT_CELL_SIZE: f64 = 0.2;

    /// 0° and 90° anchors per cell.
    pub fn baseline_yaws() -> Vec<f64> {
        vec![0.0, PI / 2.0]
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        if !(self.cell_size > 0.0) {
            return Err(AnchorError::InvalidGrid(format!("cell size {}", self.cell_size)));
        }
        if self.yaws.is_empty() {
            return Err(AnchorError::InvalidGrid("no yaw slots".into()));
        }
        for c in &self.classes {
            if !(c.width > 0.0 && c.length > 0.0 && c.height > 0.0) {
                return Err(AnchorError::InvalidGrid(format!("non-positive dims for {}", c.class)));
            }
        }
        Ok(())
    }

    fn cells(range: [f64; 2], cell: f64) -> usize {
        let span = range[1] - range[0];
        if span <= 0.0 {
            0
        } else {
            (span / cell - 1e-9).ceil() as usize
        }
    }

    pub fn cells_x(&self) -> usize {
        Self::cells(self.x_range, self.cell_size)
    }

    pub fn cells_y(&self) -> usize {
        Self::cells(self.y_range, self.cell_size)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.x_range[0] + (i as f64 + 0.5) * self.cell_size, self.y_range[0] + (j as f64 + 0.5) * self.cell_size)
    }

    /// Cell containing the planar point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.x_range[0]) / self.cell_size).floor();
        let fj = ((y - self.y_range[0]) / self.cell_size).floor();
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.cells_x() && j < self.cells_y()).then_some((i, j))
    }

    pub fn class_slot(&self, class: ObjectClass) -> Option<usize> {
        self.classes.iter().position(|c| c.class == class)
    }

    /// Yaw slot closest to `yaw` modulo π (anchors are symmetric under a half turn).
    pub fn nearest_yaw_slot(&self, yaw: f64) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, &a) in self.yaws.iter().enumerate() {
            let d = half_turn_distance(yaw, a);
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }
}

fn half_turn_distance(a: f64, b: f64) -> f64 {
    let d = angle_diff(a, b).abs();
    d.min(PI - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub i: usize,
    pub j: usize,
    pub yaw_slot: usize,
    pub class_slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub index: AnchorIndex,
    pub class: ObjectClass,
    pub bbox: Box7,
}

/// All anchors of a grid, ordered by (class, j, i, yaw slot).
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub spec: AnchorGridSpec,
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn flat_index(&self, idx: &AnchorIndex) -> usize {
        let nx = self.spec.cells_x();
        let ny = self.spec.cells_y();
        let ns = self.spec.yaws.len();
        ((idx.class_slot * ny + idx.j) * nx + idx.i) * ns + idx.yaw_slot
    }

    /// Range of flat indices belonging to one class.
    fn class_range(&self, class_slot: usize) -> std::ops::Range<usize> {
        let per_class = self.spec.cells_x() * self.spec.cells_y() * self.spec.yaws.len();
        class_slot * per_class..(class_slot + 1) * per_class
    }
}

pub fn generate_anchor_grid(spec: &AnchorGridSpec) -> Result<AnchorGrid, AnchorError> {
    spec.validate()?;
    let (nx, ny) = (spec.cells_x(), spec.cells_y());
    let mut anchors = Vec::with_capacity(spec.classes.len() * nx * ny * spec.yaws.len());
    for (class_slot, cls) in spec.classes.iter().enumerate() {
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = spec.cell_center(i, j);
                for (yaw_slot, &yaw) in spec.yaws.iter().enumerate() {
                    let bbox = Box7::new([x, y, cls.z_center], [cls.width, cls.length, cls.height], yaw)
                        .map_err(|e| AnchorError::InvalidGrid(e.to_string()))?;
                    anchors.push(Anchor { index: AnchorIndex { i, j, yaw_slot, class_slot }, class: cls.class, bbox });
                }
            }
        }
    }
    Ok(AnchorGrid { spec: spec.clone(), anchors })
}

/// Box regression target relative to an anchor: center offsets, log size
/// ratios and the absolute yaw as (sin, cos).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub log_length: f64,
    pub log_width: f64,
    pub log_height: f64,
    pub sin_yaw: f64,
    pub cos_yaw: f64,
}

impl RegressionTarget {
    pub fn encode(gt: &Box7, anchor: &Box7) -> Self {
        Self {
            dx: gt.cx - anchor.cx,
            dy: gt.cy - anchor.cy,
            dz: gt.cz - anchor.cz,
            log_length: (gt.length / anchor.length).ln(),
            log_width: (gt.width / anchor.width).ln(),
            log_height: (gt.height / anchor.height).ln(),
            sin_yaw: gt.yaw.sin(),
            cos_yaw: gt.yaw.cos(),
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [self.dx, self.dy, self.dz, self.log_length, self.log_width, self.log_height, self.sin_yaw, self.cos_yaw]
    }
}

/// Inverse of [`RegressionTarget::encode`].
pub fn decode_regression(anchor: &Box7, t: &RegressionTarget) -> Result<Box7, AnchorError> {
    if t.to_array().iter().any(|v| !v.is_finite()) {
        return Err(AnchorError::NonFiniteTarget);
    }
    if t.sin_yaw == 0.0 && t.cos_yaw == 0.0 {
        return Err(AnchorError::DegenerateYaw);
    }
    Box7::new(
        [anchor.cx + t.dx, anchor.cy + t.dy, anchor.cz + t.dz],
        [anchor.width * t.log_width.exp(), anchor.length * t.log_length.exp(), anchor.height * t.log_height.exp()],
        t.sin_yaw.atan2(t.cos_yaw),
    )
    .map_err(|_| AnchorError::NonFiniteTarget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLabel {
    Background,
    Ignore,
    Foreground,
}

impl AnchorLabel {
    pub fn code(self) -> u8 {
        match self {
            AnchorLabel::Background => 0,
            AnchorLabel::Ignore => 1,
            AnchorLabel::Foreground => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub index: AnchorIndex,
    pub label: AnchorLabel,
    /// Index into the ground-truth slice; set for every foreground anchor.
    pub matched: Option<usize>,
    pub target: Option<RegressionTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum UnassignedReason {
    ClassNotInGrid,
    CenterOutsideGrid,
    /// Another object already owns the center cell.
    CellTaken {
        by: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnassignedGt {
    pub gt: usize,
    #[serde(flatten)]
    pub reason: UnassignedReason,
}

/// One assignment per anchor (same order as [`AnchorGrid::anchors`]) plus
/// objects that received no foreground anchor.
#[derive(Debug, Clone)]
pub struct AssignmentSet {
    pub assignments: Vec<AnchorAssignment>,
    pub unassigned: Vec<UnassignedGt>,
    /// Objects that only became trainable through the fallback/promotion rule.
    pub fallback: Vec<usize>,
}

impl AssignmentSet {
    fn background(grid: &AnchorGrid) -> Self {
        Self {
            assignments: grid
                .anchors
                .iter()
                .map(|a| AnchorAssignment {
                    index: a.index,
                    label: AnchorLabel::Background,
                    matched: None,
                    target: None,
                })
                .collect(),
            unassigned: Vec::new(),
            fallback: Vec::new(),
        }
    }

    fn set_foreground(&mut self, grid: &AnchorGrid, k: usize, gt_index: usize, gt: &Box7) {
        let a = &mut self.assignments[k];
        a.label = AnchorLabel::Foreground;
        a.matched = Some(gt_index);
        a.target = Some(RegressionTarget::encode(gt, &grid.anchors[k].bbox));
    }

    pub fn count(&self, label: AnchorLabel) -> usize {
        self.assignments.iter().filter(|a| a.label == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.count(AnchorLabel::Foreground)
    }

    pub fn foreground_for(&self, gt: usize) -> usize {
        self.assignments.iter().filter(|a| a.label == AnchorLabel::Foreground && a.matched == Some(gt)).count()
    }

    /// Dense label codes (0 background, 1 ignore, 2 foreground) in anchor order.
    pub fn label_raster(&self) -> Vec<u8> {
        self.assignments.iter().map(|a| a.label.code()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl IouThresholds {
    pub fn vehicle() -> Self {
        Self { positive: 0.6, negative: 0.45 }
    }

    pub fn vulnerable() -> Self {
        Self { positive: 0.5, negative: 0.35 }
    }

    pub fn default_for(class: ObjectClass) -> Self {
        match class {
            ObjectClass::Pedestrian | ObjectClass::Cyclist => Self::vulnerable(),
            _ => Self::vehicle(),
        }
    }

    fn validate(&self) -> Result<(), AnchorError> {
        if 0.0 <= self.negative && self.negative <= self.positive && self.positive <= 1.0 {
            Ok(())
        } else {
            Err(AnchorError::InvalidParams(format!(
                "need 0 <= negative ({}) <= positive ({}) <= 1",
                self.negative, self.positive
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    /// Axis-aligned footprint rectangles, as in the classic 0°/90° matcher.
    #[default]
    AxisAligned,
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineConfig {
    #[serde(default)]
    pub iou: IouKind,
    /// Per-class overrides of [`IouThresholds::default_for`].
    #[serde(default)]
    pub thresholds: BTreeMap<ObjectClass, IouThresholds>,
}

impl BaselineConfig {
    pub fn uniform(thresholds: IouThresholds) -> Self {
        Self { iou: IouKind::AxisAligned, thresholds: ObjectClass::ALL.iter().map(|c| (*c, thresholds)).collect() }
    }

    pub fn thresholds_for(&self, class: ObjectClass) -> IouThresholds {
        self.thresholds.get(&class).copied().unwrap_or_else(|| IouThresholds::default_for(class))
    }
}

/// Two-threshold IoU assignment with a center fallback anchor for objects
/// that no anchor matches.
pub fn assign_baseline_iou(
    grid: &AnchorGrid,
    gts: &[Label],
    config: &BaselineConfig,
) -> Result<AssignmentSet, AnchorError> {
    for c in &grid.spec.classes {
        config.thresholds_for(c.class).validate()?;
    }
    let mut out = AssignmentSet::background(grid);
    let iou = |a: &Box7, b: &Box7| match config.iou {
        IouKind::AxisAligned => axis_aligned_iou_bev(a, b),
        IouKind::Rotated => rotated_iou_bev(a, b),
    };

    for (k, anchor) in grid.anchors.iter().enumerate() {
        let th = config.thresholds_for(anchor.class);
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.class != anchor.class || !footprints_may_overlap(&anchor.bbox, &gt.bbox) {
                continue;
            }
            let v = iou(&anchor.bbox, &gt.bbox).unwrap_or(0.0);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        match best {
            Some((v, g)) if v >= th.positive && v > 0.0 => out.set_foreground(grid, k, g, &gts[g].bbox),
            Some((v, _)) if v >= th.negative && v > 0.0 => {
                out.assignments[k].label = AnchorLabel::Ignore;
            }
            _ => {}
        }
    }

    for (g, gt) in gts.iter().enumerate() {
        if out.foreground_for(g) > 0 {
            continue;
        }
        match center_anchor(grid, gt) {
            Err(reason) => out.unassigned.push(UnassignedGt { gt: g, reason }),
            Ok(k) => match out.assignments[k].matched {
                Some(other) if out.assignments[k].label == AnchorLabel::Foreground => {
                    out.unassigned.push(UnassignedGt { gt: g, reason: UnassignedReason::CellTaken { by: other } })
                }
                _ => {
                    out.set_foreground(grid, k, g, &gt.bbox);
                    out.fallback.push(g);
                }
            },
        }
    }
    Ok(out)
}

fn footprints_may_overlap(a: &Box7, b: &Box7) -> bool {
    let ra = a.length.hypot(a.width) / 2.0;
    let rb = b.length.hypot(b.width) / 2.0;
    (a.cx - b.cx).hypot(a.cy - b.cy) < ra + rb
}

/// The anchor at the object's center cell whose yaw is closest modulo π.
fn center_anchor(grid: &AnchorGrid, gt: &Label) -> Result<usize, UnassignedReason> {
    let class_slot = grid.spec.class_slot(gt.class).ok_or(UnassignedReason::ClassNotInGrid)?;
    let (i, j) = grid.spec.cell_of(gt.bbox.cx, gt.bbox.cy).ok_or(UnassignedReason::CenterOutsideGrid)?;
    let yaw_slot = grid.spec.nearest_yaw_slot(gt.bbox.yaw);
    Ok(grid.flat_index(&AnchorIndex { i, j, yaw_slot, class_slot }))
}

/// One foreground anchor per object at its center cell, no ignore band.
/// When two objects share a cell the larger footprint wins.
pub fn assign_center_only(grid: &AnchorGrid, gts: &[Label]) -> AssignmentSet {
    let mut out = AssignmentSet::background(grid);
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[b].bbox.bev_area().total_cmp(&gts[a].bbox.bev_area()).then(a.cmp(&b)));
    let mut owners: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for g in order {
        let gt = &gts[g];
        let k = match center_anchor(grid, gt) {
            Ok(k) => k,
            Err(reason) => {
                out.unassigned.push(UnassignedGt { gt: g, reason });
                continue;
            }
        };
        let idx = grid.anchors[k].index;
        let cell = (idx.class_slot, idx.i, idx.j);
        if let Some(&by) = owners.get(&cell) {
            out.unassigned.push(UnassignedGt { gt: g, reason: UnassignedReason::CellTaken { by } });
            continue;
        }
        owners.insert(cell, g);
        out.set_foreground(grid, k, g, &gt.bbox);
    }
    out.unassigned.sort_by_key(|u| u.gt);
    out
}

/// Ellipse sizes as fractions of (length, width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeEllipseParams {
    pub positive_scale: f64,
    pub ignore_scale: f64,
    pub min_positive: usize,
}

impl Default for ShapeEllipseParams {
    fn default() -> Self {
        Self { positive_scale: 0.25, ignore_scale: 0.5, min_positive: 1 }
    }
}

impl ShapeEllipseParams {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if !(self.positive_scale > 0.0 && self.positive_scale <= self.ignore_scale) {
            return Err(AnchorError::InvalidParams(format!(
                "need 0 < positive_scale ({}) <= ignore_scale ({})",
                self.positive_scale, self.ignore_scale
            )));
        }
        if self.min_positive == 0 {
            return Err(AnchorError::InvalidParams("min_positive must be >= 1".into()));
        }
        Ok(())
    }
}

/// Squared Mahalanobis distance of a planar offset under the covariance
/// `R(yaw)·diag(a², b²)·R(yaw)ᵀ`, with `a` along the heading.
pub fn ellipse_distance_sq(dx: f64, dy: f64, yaw: f64, a: f64, b: f64) -> f64 {
    let (s, c) = yaw.sin_cos();
    let along = c * dx + s * dy;
    let across = -s * dx + c * dy;
    (along / a).powi(2) + (across / b).powi(2)
}

/// Half extents of the axis-aligned box around a rotated ellipse.
fn ellipse_extent(yaw: f64, a: f64, b: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    ((a * c).hypot(b * s), (a * s).hypot(b * c))
}

/// Shape-aware assignment: anchors inside the positive ellipse are
/// foreground, those inside the larger ignore ellipse are ignored. Ties
/// between overlapping objects go to the smallest normalized distance, and
/// foreground wins over ignore.
pub fn assign_adaptive_shape(
    grid: &AnchorGrid,
    gts: &[Label],
    params: &ShapeEllipseParams,
) -> Result<AssignmentSet, AnchorError> {
    params.validate()?;
    let spec = &grid.spec;
    let (nx, ny) = (spec.cells_x(), spec.cells_y());
    let ratio_sq = (params.positive_scale / params.ignore_scale).powi(2);

    // (normalized distance², gt) per anchor, for each band
    let mut best_fg: Vec<Option<(f64, usize)>> = vec![None; grid.len()];
    let mut best_ign: Vec<Option<(f64, usize)>> = vec![None; grid.len()];
    let better = |cur: Option<(f64, usize)>, cand: (f64, usize)| match cur {
        None => true,
        Some(c) => cand.0 < c.0 || (cand.0 == c.0 && cand.1 < c.1),
    };

    let mut out = AssignmentSet::background(grid);
    for (g, gt) in gts.iter().enumerate() {
        let Some(class_slot) = spec.class_slot(gt.class) else {
            out.unassigned.push(UnassignedGt { gt: g, reason: UnassignedReason::ClassNotInGrid });
            continue;
        };
        if nx == 0 || ny == 0 {
            continue;
        }
        let b = &gt.bbox;
        let (pa, pb) = (params.positive_scale * b.length, params.positive_scale * b.width);
        let (ia, ib) = (params.ignore_scale * b.length, params.ignore_scale * b.width);
        let (ex, ey) = ellipse_extent(b.yaw, ia, ib);
        let lo_i = ((b.cx - ex - spec.x_range[0]) / spec.cell_size).floor().max(0.0) as usize;
        let lo_j = ((b.cy - ey - spec.y_range[0]) / spec.cell_size).floor().max(0.0) as usize;
        let hi_i = ((b.cx + ex - spec.x_range[0]) / spec.cell_size).ceil();
        let hi_j = ((b.cy + ey - spec.y_range[0]) / spec.cell_size).ceil();
        if hi_i < 0.0 || hi_j < 0.0 {
            continue;
        }
        let hi_i = (hi_i as usize).min(nx - 1);
        let hi_j = (hi_j as usize).min(ny - 1);
        for j in lo_j..=hi_j {
            for i in lo_i..=hi_i {
                let (x, y) = spec.cell_center(i, j);
                let m2 = ellipse_distance_sq(x - b.cx, y - b.cy, b.yaw, pa, pb);
                let m2_ignore = ellipse_distance_sq(x - b.cx, y - b.cy, b.yaw, ia, ib);
                for yaw_slot in 0..spec.yaws.len() {
                    let k = grid.flat_index(&AnchorIndex { i, j, yaw_slot, class_slot });
                    if m2 <= 1.0 {
                        if better(best_fg[k], (m2, g)) {
                            best_fg[k] = Some((m2, g));
                        }
                    } else if m2_ignore <= 1.0 && better(best_ign[k], (m2_ignore / ratio_sq, g)) {
                        best_ign[k] = Some((m2_ignore / ratio_sq, g));
                    }
                }
            }
        }
    }

    for k in 0..grid.len() {
        if let Some((_, g)) = best_fg[k] {
            out.set_foreground(grid, k, g, &gts[g].bbox);
        } else if best_ign[k].is_some() {
            out.assignments[k].label = AnchorLabel::Ignore;
        }
    }

    // promotion: every object gets at least `min_positive` foreground anchors
    let mut counts = vec![0usize; gts.len()];
    for a in &out.assignments {
        if let (AnchorLabel::Foreground, Some(g)) = (a.label, a.matched) {
            counts[g] += 1;
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        if counts[g] >= params.min_positive {
            continue;
        }
        let Some(class_slot) = spec.class_slot(gt.class) else { continue };
        if spec.cell_of(gt.bbox.cx, gt.bbox.cy).is_none() {
            out.unassigned.push(UnassignedGt { gt: g, reason: UnassignedReason::CenterOutsideGrid });
            continue;
        }
        let mut candidates: Vec<(f64, f64, usize)> = grid
            .class_range(class_slot)
            .filter(|&k| out.assignments[k].label != AnchorLabel::Foreground)
            .map(|k| {
                let a = &grid.anchors[k].bbox;
                let d2 = (a.cx - gt.bbox.cx).powi(2) + (a.cy - gt.bbox.cy).powi(2);
                (d2, half_turn_distance(a.yaw, gt.bbox.yaw), k)
            })
            .collect();
        let need = params.min_positive - counts[g];
        if candidates.len() > need {
            candidates.select_nth_unstable_by(need - 1, cmp_candidate);
            candidates.truncate(need);
        }
        candidates.sort_by(cmp_candidate);
        for (_, _, k) in candidates {
            out.set_foreground(grid, k, g, &gt.bbox);
            counts[g] += 1;
        }
        out.fallback.push(g);
    }
    out.unassigned.sort_by_key(|u| u.gt);
    Ok(out)
}

fn cmp_candidate(a: &(f64, f64, usize), b: &(f64, f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
}
