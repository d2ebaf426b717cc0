//! Ground-truth database and copy-paste augmentation.
//!
//! Entries store each object's points per temporal step, cropped with *that
//! step's* box, in the object's canonical frame (current box at the origin,
//! heading +X). Linked pairs (towing vehicle and trailer) keep their relative
//! pose and are always pasted together.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{transform_points, Label, ObjectClass, PointCloud, PointCloudFrame};
use crate::geometry::{angle_diff, normalize_angle, points_in_box, rotated_iou_bev, Box7, Pose2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("frame {0} has no ego pose")]
    MissingPose(u64),
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// One frame with its labels; sequences are ordered oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: PointCloudFrame,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStep {
    /// 0 is the current frame, 1 the previous one, …
    pub age: usize,
    /// Box at this step, canonical frame.
    pub bbox: Box7,
    /// Points cropped at this step, canonical frame.
    pub points: PointCloud,
    pub interpolated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLink {
    pub partner_object_id: u64,
    pub partner_entry: usize,
    /// Partner's box pose in this entry's box frame.
    pub relative_pose: Pose2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtDatabaseEntry {
    pub entry_id: usize,
    pub object_id: u64,
    pub source_frame: u64,
    pub class: ObjectClass,
    /// Current box in the canonical frame (`cx = cy = yaw = 0`).
    pub bbox: Box7,
    /// Current box pose in the source frame's ego coordinates.
    pub source_pose: Pose2,
    pub steps: Vec<HistoryStep>,
    pub pair: Option<PairLink>,
}

impl GtDatabaseEntry {
    pub fn point_count(&self, age: usize) -> usize {
        self.steps.iter().find(|s| s.age == age).map_or(0, |s| s.points.len())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    pub entries: Vec<GtDatabaseEntry>,
}

impl GtDatabase {
    pub fn of_class(&self, class: ObjectClass) -> Vec<usize> {
        self.entries.iter().filter(|e| e.class == class).map(|e| e.entry_id).collect()
    }

    /// Appends another database, renumbering its entries.
    pub fn extend(&mut self, other: GtDatabase) {
        let offset = self.entries.len();
        for mut e in other.entries {
            e.entry_id += offset;
            if let Some(p) = e.pair.as_mut() {
                p.partner_entry += offset;
            }
            self.entries.push(e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Each step cropped with its own box.
    #[default]
    HistoryAware,
    /// Every step cropped with the current box (the naive scheme).
    CurrentBoxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Number of temporal steps per entry, current frame included.
    pub history: usize,
    #[serde(default)]
    pub crop: CropMode,
    #[serde(rename = "margin_m", default)]
    pub margin: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { history: 3, crop: CropMode::HistoryAware, margin: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "issue")]
pub enum BuildIssue {
    BrokenPair {
        object_id: u64,
        partner_id: u64,
    },
    /// Box at `age` linearly interpolated between neighboring labels.
    Interpolated {
        object_id: u64,
        age: usize,
    },
    /// No label on one side; the nearest label was held.
    Held {
        object_id: u64,
        age: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct WorldBox {
    bbox: Box7,
    /// World pose of the box frame.
    pose: Pose2,
}

/// Builds entries for every object labeled in the newest frame of `sequence`.
pub fn build_database(
    sequence: &[LabeledFrame],
    pairs: &[(u64, u64)],
    config: &BuildConfig,
) -> Result<(GtDatabase, Vec<BuildIssue>), AugmentError> {
    let newest = sequence.last().ok_or(AugmentError::EmptySequence)?;
    if config.history == 0 {
        return Err(AugmentError::InvalidConfig("history must be >= 1".into()));
    }
    let ego: Vec<Pose2> = sequence
        .iter()
        .map(|f| f.frame.ego_pose.ok_or(AugmentError::MissingPose(f.frame.frame_id)))
        .collect::<Result<_, _>>()?;
    let last = sequence.len() - 1;
    let steps = config.history.min(sequence.len());
    let mut issues = Vec::new();
    let mut entries = Vec::new();

    for label in &newest.labels {
        let current = world_box(&label.bbox, &ego[last]);
        let to_canonical = current.pose.inverse();
        let mut history = Vec::with_capacity(steps);
        for age in 0..steps {
            let f = last - age;
            let (step_world, interpolated) = match lookup_box(sequence, &ego, label.object_id, f) {
                Lookup::Labeled(b) => (b, false),
                Lookup::Interpolated(b) => {
                    issues.push(BuildIssue::Interpolated { object_id: label.object_id, age });
                    (b, true)
                }
                Lookup::Held(b) => {
                    issues.push(BuildIssue::Held { object_id: label.object_id, age });
                    (b, true)
                }
            };
            let crop_world = match config.crop {
                CropMode::HistoryAware => step_world,
                CropMode::CurrentBoxOnly => current,
            };
            let crop_box = crop_world.bbox.with_pose(ego[f].inverse().compose(&crop_world.pose));
            let cloud = &sequence[f].frame.cloud;
            let idx = points_in_box(cloud.xyz_iter(), &crop_box, config.margin);
            let to_canon = to_canonical.compose(&ego[f]);
            history.push(HistoryStep {
                age,
                bbox: step_world.bbox.with_pose(to_canonical.compose(&step_world.pose)),
                points: transform_points(&cloud.select(&idx), &to_canon),
                interpolated,
            });
        }
        entries.push(GtDatabaseEntry {
            entry_id: entries.len(),
            object_id: label.object_id,
            source_frame: newest.frame.frame_id,
            class: label.class,
            bbox: label.bbox.with_pose(Pose2::identity()),
            source_pose: label.bbox.pose(),
            steps: history,
            pair: None,
        });
    }

    // pair links, from explicit annotations and label pair ids
    let mut links: BTreeSet<(u64, u64)> = pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    for l in &newest.labels {
        if let Some(p) = l.pair_id {
            links.insert((l.object_id.min(p), l.object_id.max(p)));
        }
    }
    let by_id: BTreeMap<u64, usize> = entries.iter().map(|e| (e.object_id, e.entry_id)).collect();
    for (a, b) in links {
        match (by_id.get(&a), by_id.get(&b)) {
            (Some(&ea), Some(&eb)) => {
                let pa = world_box(&newest.labels[ea].bbox, &ego[last]).pose;
                let pb = world_box(&newest.labels[eb].bbox, &ego[last]).pose;
                let rel = pa.relative_to(&pb);
                entries[ea].pair = Some(PairLink { partner_object_id: b, partner_entry: eb, relative_pose: rel });
                entries[eb].pair =
                    Some(PairLink { partner_object_id: a, partner_entry: ea, relative_pose: rel.inverse() });
            }
            (None, _) => issues.push(BuildIssue::BrokenPair { object_id: b, partner_id: a }),
            (_, None) => issues.push(BuildIssue::BrokenPair { object_id: a, partner_id: b }),
        }
    }
    Ok((GtDatabase { entries }, issues))
}

fn world_box(b: &Box7, ego: &Pose2) -> WorldBox {
    let pose = ego.compose(&b.pose());
    WorldBox { bbox: b.with_pose(pose), pose }
}

enum Lookup {
    Labeled(WorldBox),
    Interpolated(WorldBox),
    Held(WorldBox),
}

fn find_label(frame: &LabeledFrame, object_id: u64) -> Option<&Label> {
    frame.labels.iter().find(|l| l.object_id == object_id)
}

fn lookup_box(sequence: &[LabeledFrame], ego: &[Pose2], object_id: u64, f: usize) -> Lookup {
    if let Some(l) = find_label(&sequence[f], object_id) {
        return Lookup::Labeled(world_box(&l.bbox, &ego[f]));
    }
    let before =
        (0..f).rev().find_map(|k| find_label(&sequence[k], object_id).map(|l| (k, world_box(&l.bbox, &ego[k]))));
    let after = (f + 1..sequence.len())
        .find_map(|k| find_label(&sequence[k], object_id).map(|l| (k, world_box(&l.bbox, &ego[k]))));
    match (before, after) {
        (Some((ka, a)), Some((kb, b))) => {
            let ta = sequence[ka].frame.timestamp;
            let tb = sequence[kb].frame.timestamp;
            let t = sequence[f].frame.timestamp;
            let w = if tb > ta { (t - ta) / (tb - ta) } else { 0.5 };
            Lookup::Interpolated(interpolate(&a, &b, w))
        }
        (Some((_, a)), None) => Lookup::Held(a),
        (None, Some((_, b))) => Lookup::Held(b),
        (None, None) => unreachable!("object is labeled in the newest frame"),
    }
}

/// Linear interpolation in (x, y, z, size, unwrapped yaw).
fn interpolate(a: &WorldBox, b: &WorldBox, w: f64) -> WorldBox {
    let lerp = |x: f64, y: f64| x + w * (y - x);
    let yaw = normalize_angle(a.bbox.yaw + w * angle_diff(b.bbox.yaw, a.bbox.yaw));
    let bbox = Box7::new(
        [lerp(a.bbox.cx, b.bbox.cx), lerp(a.bbox.cy, b.bbox.cy), lerp(a.bbox.cz, b.bbox.cz)],
        [lerp(a.bbox.width, b.bbox.width), lerp(a.bbox.length, b.bbox.length), lerp(a.bbox.height, b.bbox.height)],
        yaw,
    )
    .expect("interpolating valid boxes");
    WorldBox { bbox, pose: bbox.pose() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementRegion {
    #[serde(rename = "x_range_m")]
    pub x_range: [f64; 2],
    #[serde(rename = "y_range_m")]
    pub y_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// Uniform position in the region, uniform yaw.
    #[default]
    Random,
    /// The pose the object had in its source frame.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub samples_per_class: BTreeMap<ObjectClass, usize>,
    /// Placements with a rotated BEV IoU above this are rejected.
    #[serde(default)]
    pub collision_iou: f64,
    pub region: PlacementRegion,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub placement: PlacementMode,
    /// Epoch after which a training loop should stop sampling. Not used here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fading_epoch: Option<usize>,
    pub seed: u64,
}

fn default_retries() -> usize {
    20
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let r = &self.region;
        if !(r.x_range[0] < r.x_range[1] && r.y_range[0] < r.y_range[1]) {
            return Err(AugmentError::InvalidConfig("empty placement region".into()));
        }
        if !(0.0..=1.0).contains(&self.collision_iou) {
            return Err(AugmentError::InvalidConfig(format!("collision IoU {}", self.collision_iou)));
        }
        if self.max_retries == 0 {
            return Err(AugmentError::InvalidConfig("max_retries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-frame random stream derived from `(seed, frame_id)`.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PastedObject {
    pub entry: usize,
    pub object_id: u64,
    pub class: ObjectClass,
    /// Box in the newest frame's ego coordinates.
    #[serde(rename = "box")]
    pub bbox: Box7,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "skip")]
pub enum SkipReport {
    NoPlacement { entry: usize, class: ObjectClass, attempts: usize },
    EmptyClass { class: ObjectClass },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentOutcome {
    pub added: Vec<PastedObject>,
    pub skips: Vec<SkipReport>,
}

/// Draws entries per class quota and pastes them (with partners) into the scene.
pub fn sample_and_paste<R: Rng>(
    scene: &mut [LabeledFrame],
    database: &GtDatabase,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentOutcome, AugmentError> {
    config.validate()?;
    let last = scene.len().checked_sub(1).ok_or(AugmentError::EmptySequence)?;
    let mut occupied: Vec<Box7> = scene[last].labels.iter().map(|l| l.bbox).collect();
    let mut next_id = scene.iter().flat_map(|f| f.labels.iter().map(|l| l.object_id)).max().map_or(0, |m| m + 1);
    let mut outcome = AugmentOutcome::default();

    for (&class, &quota) in &config.samples_per_class {
        let pool = database.of_class(class);
        if quota > 0 && pool.is_empty() {
            outcome.skips.push(SkipReport::EmptyClass { class });
            continue;
        }
        for _ in 0..quota {
            let entry = &database.entries[pool[rng.gen_range(0..pool.len())]];
            let partner = entry.pair.map(|p| (&database.entries[p.partner_entry], p.relative_pose));
            let attempts = match config.placement {
                PlacementMode::Random => config.max_retries,
                PlacementMode::Original => 1,
            };
            let mut placed = None;
            for _ in 0..attempts {
                let pose = match config.placement {
                    PlacementMode::Random => Pose2::new(
                        rng.gen_range(config.region.x_range[0]..config.region.x_range[1]),
                        rng.gen_range(config.region.y_range[0]..config.region.y_range[1]),
                        normalize_angle(rng.gen_range(-PI..PI)),
                    ),
                    PlacementMode::Original => entry.source_pose,
                };
                let mut boxes = vec![entry.bbox.with_pose(pose)];
                if let Some((p, rel)) = partner {
                    boxes.push(p.bbox.with_pose(pose.compose(&rel)));
                }
                let clear = boxes.iter().all(|b| {
                    occupied.iter().all(|o| rotated_iou_bev(b, o).is_ok_and(|iou| iou <= config.collision_iou))
                });
                if clear {
                    placed = Some((pose, boxes));
                    break;
                }
            }
            let Some((pose, boxes)) = placed else {
                outcome.skips.push(SkipReport::NoPlacement { entry: entry.entry_id, class, attempts });
                continue;
            };

            let primary_id = next_id;
            let partner_id = partner.map(|_| next_id + 1);
            next_id += if partner.is_some() { 2 } else { 1 };
            paste_points(entry, &pose, scene)?;
            add_labels(entry, &pose, primary_id, partner_id, scene)?;
            outcome.added.push(PastedObject {
                entry: entry.entry_id,
                object_id: primary_id,
                class: entry.class,
                bbox: boxes[0],
                partner: partner_id,
            });
            if let (Some((p, rel)), Some(pid)) = (partner, partner_id) {
                let ppose = pose.compose(&rel);
                paste_points(p, &ppose, scene)?;
                add_labels(p, &ppose, pid, Some(primary_id), scene)?;
                outcome.added.push(PastedObject {
                    entry: p.entry_id,
                    object_id: pid,
                    class: p.class,
                    bbox: boxes[1],
                    partner: Some(primary_id),
                });
            }
            occupied.extend(boxes);
        }
    }
    Ok(outcome)
}

/// Transform taking canonical coordinates of `age` to frame `last - age` of the scene.
fn step_transform(scene: &[LabeledFrame], placement: &Pose2, age: usize) -> Result<Pose2, AugmentError> {
    let last = scene.len() - 1;
    if age == 0 {
        return Ok(*placement);
    }
    let target = &scene[last - age].frame;
    let newest = &scene[last].frame;
    let e_t = target.ego_pose.ok_or(AugmentError::MissingPose(target.frame_id))?;
    let e_n = newest.ego_pose.ok_or(AugmentError::MissingPose(newest.frame_id))?;
    Ok(e_t.inverse().compose(&e_n).compose(placement))
}

/// Appends each temporal step's points, moved to `placement`, to the matching scene frame.
pub fn paste_points(
    entry: &GtDatabaseEntry,
    placement: &Pose2,
    scene: &mut [LabeledFrame],
) -> Result<(), AugmentError> {
    let last = scene.len().checked_sub(1).ok_or(AugmentError::EmptySequence)?;
    for step in entry.steps.iter().filter(|s| s.age <= last) {
        let t = step_transform(scene, placement, step.age)?;
        let moved = transform_points(&step.points, &t);
        scene[last - step.age].frame.cloud.extend(&moved);
    }
    Ok(())
}

fn add_labels(
    entry: &GtDatabaseEntry,
    placement: &Pose2,
    object_id: u64,
    pair_id: Option<u64>,
    scene: &mut [LabeledFrame],
) -> Result<(), AugmentError> {
    let last = scene.len() - 1;
    for step in entry.steps.iter().filter(|s| s.age <= last) {
        let t = step_transform(scene, placement, step.age)?;
        scene[last - step.age].labels.push(Label {
            object_id,
            class: entry.class,
            bbox: step.bbox.transformed(&t),
            pair_id,
        });
    }
    Ok(())
}

/// Largest IoU between a pasted box and any non-partner box in `labels`.
pub fn max_non_partner_overlap(labels: &[Label], added: &[PastedObject]) -> f64 {
    let mut worst = 0.0f64;
    for a in added {
        for l in labels {
            if l.object_id == a.object_id || Some(l.object_id) == a.partner {
                continue;
            }
            worst = worst.max(rotated_iou_bev(&a.bbox, &l.bbox).unwrap_or(0.0));
        }
    }
    worst
}
