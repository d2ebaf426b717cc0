//! Average precision with group-tolerant class matching, no-label zones and
//! range caps.
//!
//! Matching is greedy by descending confidence: each detection takes the
//! nearest unmatched ground truth of its class group within the threshold.
//! For an evaluated class `C`, the scored stream holds every `C` detection
//! (TP when matched to any group member) plus every other-class detection that
//! matched a `C` ground truth. Recall counts `C` ground truths found by anyone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Label, ObjectClass, PointCloud};
use crate::geometry::{points_in_box, Box7};

pub const DEFAULT_MIN_POINTS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("frame {frame_id}: {gt} ground truths but {counts} point counts")]
    PointCountMismatch { frame_id: u64, gt: usize, counts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneOrigin {
    Manual,
    AutoLowPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoLabelZone {
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub origin: ZoneOrigin,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalFrame {
    pub frame_id: u64,
    pub gt: Vec<Label>,
    /// LiDAR points inside each ground truth box, parallel to `gt`.
    /// Without counts no zones are created automatically.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_points: Option<Vec<usize>>,
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub zones: Vec<NoLabelZone>,
}

/// Number of points of `cloud` inside each label box (margin 0).
pub fn count_points(cloud: &PointCloud, labels: &[Label]) -> Vec<usize> {
    labels.iter().map(|l| points_in_box(cloud.xyz_iter(), &l.bbox, 0.0).len()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    CenterDistance,
    FaceAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeCap {
    #[serde(rename = "default_m")]
    pub default: f64,
    #[serde(rename = "per_class_m", default)]
    pub per_class: BTreeMap<ObjectClass, f64>,
}

impl RangeCap {
    pub fn uniform(range: f64) -> Self {
        Self { default: range, per_class: BTreeMap::new() }
    }

    pub fn for_class(&self, class: ObjectClass) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Classes receiving an AP, in report order.
    pub classes: Vec<ObjectClass>,
    /// Classes that may be confused with each other without penalty.
    pub groups: Vec<Vec<ObjectClass>>,
    /// Classes scored as another class (both ground truth and detections).
    #[serde(default)]
    pub aliases: BTreeMap<ObjectClass, ObjectClass>,
    #[serde(default)]
    pub mode: MatchMode,
    #[serde(rename = "thresholds_m")]
    pub thresholds: Vec<f64>,
    pub max_range: RangeCap,
    pub min_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        use ObjectClass::*;
        Self {
            classes: vec![Truck, Pedestrian, Cyclist, Car],
            groups: vec![vec![Car, Truck], vec![Pedestrian, Cyclist]],
            aliases: [(Trailer, Truck)].into_iter().collect(),
            mode: MatchMode::CenterDistance,
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            max_range: RangeCap::uniform(96.0),
            min_points: DEFAULT_MIN_POINTS,
        }
    }
}

impl EvalConfig {
    /// Caps of 50 m for vehicles and 40 m for everything else.
    pub fn with_short_range(mut self) -> Self {
        use ObjectClass::*;
        self.max_range =
            RangeCap { default: 40.0, per_class: [(Car, 50.0), (Truck, 50.0), (Trailer, 50.0)].into_iter().collect() };
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.thresholds.is_empty() {
            return Err(EvalError::Config("no match thresholds".into()));
        }
        if !self.thresholds.iter().all(|t| t.is_finite() && *t > 0.0)
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvalError::Config("thresholds must be positive and ascending".into()));
        }
        let mut seen = BTreeMap::new();
        for (g, members) in self.groups.iter().enumerate() {
            for c in members {
                if seen.insert(*c, g).is_some() {
                    return Err(EvalError::Config(format!("class {c} in more than one group")));
                }
            }
        }
        for c in &self.classes {
            if !seen.contains_key(c) {
                return Err(EvalError::Config(format!("class {c} is in no group")));
            }
        }
        if !(self.max_range.default > 0.0 && self.max_range.per_class.values().all(|r| *r > 0.0)) {
            return Err(EvalError::Config("range caps must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, class: ObjectClass) -> ObjectClass {
        self.aliases.get(&class).copied().unwrap_or(class)
    }

    fn group_of(&self, class: ObjectClass) -> Option<usize> {
        let c = self.resolve(class);
        self.groups.iter().position(|g| g.contains(&c))
    }

    fn same_group(&self, a: ObjectClass, b: ObjectClass) -> bool {
        let (ra, rb) = (self.resolve(a), self.resolve(b));
        ra == rb || matches!((self.group_of(a), self.group_of(b)), (Some(x), Some(y)) if x == y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoreReason {
    LowPoints,
    InZone,
    OutOfRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgnoredKind {
    GroundTruth,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgnoreRecord {
    pub frame_id: u64,
    pub kind: IgnoredKind,
    /// Index into the frame's original list.
    pub index: usize,
    pub class: ObjectClass,
    pub reason: IgnoreReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<usize>,
}

/// What remains scoreable in a frame after zones and range caps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredFrame {
    pub frame_id: u64,
    pub gt: Vec<Label>,
    pub detections: Vec<Detection>,
    pub zones: Vec<NoLabelZone>,
}

/// Converts under-sampled ground truth into zones and removes everything
/// centered inside a zone.
pub fn apply_no_label_zones(
    frame: &EvalFrame,
    config: &EvalConfig,
) -> Result<(ScoredFrame, Vec<IgnoreRecord>), EvalError> {
    let mut ledger = Vec::new();
    let mut zones = frame.zones.clone();
    let mut low = vec![false; frame.gt.len()];
    if let Some(counts) = &frame.gt_points {
        if counts.len() != frame.gt.len() {
            return Err(EvalError::PointCountMismatch {
                frame_id: frame.frame_id,
                gt: frame.gt.len(),
                counts: counts.len(),
            });
        }
        for (k, (l, &n)) in frame.gt.iter().zip(counts).enumerate() {
            if n < config.min_points {
                low[k] = true;
                zones.push(NoLabelZone { bbox: l.bbox, origin: ZoneOrigin::AutoLowPoints });
                ledger.push(IgnoreRecord {
                    frame_id: frame.frame_id,
                    kind: IgnoredKind::GroundTruth,
                    index: k,
                    class: l.class,
                    reason: IgnoreReason::LowPoints,
                    zone: Some(zones.len() - 1),
                });
            }
        }
    }
    let zone_of = |b: &Box7, manual_only: bool| {
        zones.iter().position(|z| (!manual_only || z.origin == ZoneOrigin::Manual) && z.bbox.contains_bev(b.cx, b.cy))
    };

    let mut gt = Vec::new();
    for (k, l) in frame.gt.iter().enumerate() {
        if low[k] {
            continue;
        }
        if let Some(z) = zone_of(&l.bbox, true) {
            ledger.push(IgnoreRecord {
                frame_id: frame.frame_id,
                kind: IgnoredKind::GroundTruth,
                index: k,
                class: l.class,
                reason: IgnoreReason::InZone,
                zone: Some(z),
            });
        } else {
            gt.push(*l);
        }
    }
    let mut detections = Vec::new();
    for (k, d) in frame.detections.iter().enumerate() {
        if let Some(z) = zone_of(&d.bbox, false) {
            ledger.push(IgnoreRecord {
                frame_id: frame.frame_id,
                kind: IgnoredKind::Detection,
                index: k,
                class: d.class,
                reason: IgnoreReason::InZone,
                zone: Some(z),
            });
        } else {
            detections.push(*d);
        }
    }
    Ok((ScoredFrame { frame_id: frame.frame_id, gt, detections, zones }, ledger))
}

fn bev_range(b: &Box7) -> f64 {
    b.cx.hypot(b.cy)
}

/// Drops ground truth and detections whose BEV center lies beyond the class cap.
fn apply_range_cap(frame: &mut ScoredFrame, config: &EvalConfig, ledger: &mut Vec<IgnoreRecord>) {
    let frame_id = frame.frame_id;
    let mut k = 0;
    frame.gt.retain(|l| {
        k += 1;
        let keep = bev_range(&l.bbox) <= config.max_range.for_class(l.class);
        if !keep {
            ledger.push(IgnoreRecord {
                frame_id,
                kind: IgnoredKind::GroundTruth,
                index: k - 1,
                class: l.class,
                reason: IgnoreReason::OutOfRange,
                zone: None,
            });
        }
        keep
    });
    let mut k = 0;
    frame.detections.retain(|d| {
        k += 1;
        let keep = bev_range(&d.bbox) <= config.max_range.for_class(d.class);
        if !keep {
            ledger.push(IgnoreRecord {
                frame_id,
                kind: IgnoredKind::Detection,
                index: k - 1,
                class: d.class,
                reason: IgnoreReason::OutOfRange,
                zone: None,
            });
        }
        keep
    });
}

/// Front and rear face midpoints at mid-height.
pub fn face_midpoints(b: &Box7) -> [[f64; 3]; 2] {
    let (s, c) = b.yaw.sin_cos();
    let h = b.length / 2.0;
    [[b.cx + h * c, b.cy + h * s, b.cz], [b.cx - h * c, b.cy - h * s, b.cz]]
}

/// Smallest distance between any front/rear face midpoint of `a` and of `b`.
pub fn face_distance(a: &Box7, b: &Box7) -> f64 {
    let fa = face_midpoints(a);
    let fb = face_midpoints(b);
    let mut best = f64::INFINITY;
    for p in &fa {
        for q in &fb {
            best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt());
        }
    }
    best
}

pub fn center_distance(a: &Box7, b: &Box7) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Detection indices by descending score, ties in input order.
fn confidence_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    order
}

/// Greedy matching; returns the matched ground-truth index per detection.
pub fn match_greedy(
    gt: &[Label],
    detections: &[Detection],
    threshold: f64,
    mode: MatchMode,
    config: &EvalConfig,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; detections.len()];
    for d in confidence_order(detections) {
        let det = &detections[d];
        let mut best: Option<(f64, usize)> = None;
        for (g, l) in gt.iter().enumerate() {
            if taken[g] || !config.same_group(det.class, l.class) {
                continue;
            }
            let dist = match mode {
                MatchMode::CenterDistance => center_distance(&det.bbox, &l.bbox),
                MatchMode::FaceAlignment => face_distance(&det.bbox, &l.bbox),
            };
            if dist <= threshold && best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

pub fn match_center_distance(
    gt: &[Label],
    detections: &[Detection],
    threshold: f64,
    config: &EvalConfig,
) -> Vec<Option<usize>> {
    match_greedy(gt, detections, threshold, MatchMode::CenterDistance, config)
}

pub fn match_face_alignment(
    gt: &[Label],
    detections: &[Detection],
    threshold: f64,
    config: &EvalConfig,
) -> Vec<Option<usize>> {
    match_greedy(gt, detections, threshold, MatchMode::FaceAlignment, config)
}

/// One entry of a class's confidence-ranked stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEntry {
    pub score: f64,
    pub tp: bool,
    /// Whether this entry found a ground truth of the evaluated class.
    pub recalls: bool,
}

pub const RECALL_GRID_START: usize = 10;
pub const RECALL_GRID_END: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    #[serde(rename = "threshold_m")]
    pub threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// AP from an already ranked stream: mean interpolated precision on recall
/// 0.10, 0.11, …, 1.00.
pub fn average_precision(stream: &[StreamEntry], n_gt: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(stream.len());
    let mut precision = Vec::with_capacity(stream.len());
    let (mut tp, mut found) = (0usize, 0usize);
    for (k, e) in stream.iter().enumerate() {
        tp += e.tp as usize;
        found += e.recalls as usize;
        recall.push(found as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut sum = 0.0;
    for r in RECALL_GRID_START..=RECALL_GRID_END {
        let r = r as f64 / 100.0;
        let best =
            recall.iter().zip(&precision).filter(|(rc, _)| **rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += best;
    }
    (sum / (RECALL_GRID_END - RECALL_GRID_START + 1) as f64, recall, precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ObjectClass,
    /// Absent when the class has no scoreable ground truth.
    pub ap: Option<f64>,
    pub ap_per_threshold: Vec<f64>,
    /// Counts at each threshold, using all detections.
    pub counts: Vec<Counts>,
    pub ground_truth: usize,
    pub ignored_detections: usize,
    pub ignored_gt: usize,
    pub pr_curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "thresholds_m")]
    pub thresholds: Vec<f64>,
    pub mode: MatchMode,
    pub classes: Vec<ClassReport>,
    /// Mean over classes with an AP.
    pub map: Option<f64>,
    /// Classes without ground truth.
    pub absent: Vec<ObjectClass>,
    pub ignored: Vec<IgnoreRecord>,
}

impl EvalReport {
    pub fn ap(&self, class: ObjectClass) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class).and_then(|c| c.ap)
    }

    /// `class,threshold_m,recall,precision` rows.
    pub fn pr_curves_csv(&self) -> String {
        let mut out = String::from("class,threshold_m,recall,precision\n");
        for c in &self.classes {
            for curve in &c.pr_curves {
                for (r, p) in curve.recall.iter().zip(&curve.precision) {
                    let _ = writeln!(out, "{},{},{},{}", c.class, curve.threshold, r, p);
                }
            }
        }
        out
    }
}

/// Scores all frames.
pub fn evaluate(frames: &[EvalFrame], config: &EvalConfig) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let mut ledger = Vec::new();
    let mut scored = Vec::with_capacity(frames.len());
    for f in frames {
        let (mut s, mut l) = apply_no_label_zones(f, config)?;
        apply_range_cap(&mut s, config, &mut l);
        ledger.extend(l);
        // canonical classes from here on
        for g in &mut s.gt {
            g.class = config.resolve(g.class);
        }
        for d in &mut s.detections {
            d.class = config.resolve(d.class);
        }
        scored.push(s);
    }
    let matches: Vec<Vec<Vec<Option<usize>>>> = config
        .thresholds
        .iter()
        .map(|&t| scored.iter().map(|s| match_greedy(&s.gt, &s.detections, t, config.mode, config)).collect())
        .collect();

    let mut classes = Vec::new();
    let mut absent = Vec::new();
    for &class in &config.classes {
        let n_gt: usize = scored.iter().map(|s| s.gt.iter().filter(|l| l.class == class).count()).sum();
        let ignored_of = |kind: IgnoredKind| {
            ledger
                .iter()
                .filter(|r| r.kind == kind && r.reason != IgnoreReason::OutOfRange && config.resolve(r.class) == class)
                .count()
        };
        let mut report = ClassReport {
            class,
            ap: None,
            ap_per_threshold: Vec::new(),
            counts: Vec::new(),
            ground_truth: n_gt,
            ignored_detections: ignored_of(IgnoredKind::Detection),
            ignored_gt: ignored_of(IgnoredKind::GroundTruth),
            pr_curves: Vec::new(),
        };
        for (t, per_frame) in config.thresholds.iter().zip(&matches) {
            let mut stream = Vec::new();
            let mut counts = Counts::default();
            for (s, m) in scored.iter().zip(per_frame) {
                for (d, det) in s.detections.iter().enumerate() {
                    let hit_class = m[d].map(|g| s.gt[g].class == class);
                    if det.class == class {
                        stream.push(StreamEntry {
                            score: det.score,
                            tp: hit_class.is_some(),
                            recalls: hit_class == Some(true),
                        });
                        if hit_class.is_some() {
                            counts.tp += 1;
                        } else {
                            counts.fp += 1;
                        }
                    } else if hit_class == Some(true) {
                        stream.push(StreamEntry { score: det.score, tp: true, recalls: true });
                        counts.tp += 1;
                    }
                }
            }
            // stable: ties keep frame and detection order
            stream.sort_by(|a, b| b.score.total_cmp(&a.score));
            let found = stream.iter().filter(|e| e.recalls).count();
            counts.fn_ = n_gt - found;
            report.counts.push(counts);
            if n_gt > 0 {
                let (ap, recall, precision) = average_precision(&stream, n_gt);
                report.ap_per_threshold.push(ap);
                report.pr_curves.push(PrCurve { threshold: *t, recall, precision });
            }
        }
        if n_gt > 0 {
            report.ap = Some(report.ap_per_threshold.iter().sum::<f64>() / report.ap_per_threshold.len() as f64);
        } else {
            absent.push(class);
        }
        classes.push(report);
    }
    let present: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(EvalReport { thresholds: config.thresholds.clone(), mode: config.mode, classes, map, absent, ignored: ledger })
}
