//! Seeded synthetic yard scenes: boxes moving on straight lines, truck and
//! semi-trailer combinations articulated around the kingpin, a ray-cast
//! spinning LiDAR on a moving ego vehicle, one forward camera with ideal 2D
//! boxes, and ideal 3D detections.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use shape_targets::augment::LabeledFrame;
use shape_targets::eval::Detection;
use shape_targets::fusion::{CameraModel, CategoryGroup, Detection2D};
use shape_targets::geometry::rotated_iou_bev;
use shape_targets::{Box7, Label, ObjectClass, PointCloud, PointCloudFrame, Pose2};

use crate::formats::{CameraDetectionRecord, DetectionRecord};

/// Uniform ranges for (width, length, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimRange {
    #[serde(rename = "min_m")]
    pub min: [f64; 3],
    #[serde(rename = "max_m")]
    pub max: [f64; 3],
}

impl DimRange {
    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        [0, 1, 2].map(|k| uniform(rng, self.min[k], self.max[k]))
    }
}

fn uniform(rng: &mut impl Rng, a: f64, b: f64) -> f64 {
    if b > a {
        rng.gen_range(a..b)
    } else {
        a
    }
}

pub fn default_templates() -> BTreeMap<ObjectClass, DimRange> {
    use ObjectClass::*;
    [
        (Car, DimRange { min: [1.75, 4.2, 1.45], max: [1.95, 4.8, 1.7] }),
        (Truck, DimRange { min: [2.45, 5.8, 3.2], max: [2.55, 6.8, 3.6] }),
        (Trailer, DimRange { min: [2.5, 12.0, 3.8], max: [2.55, 13.6, 4.0] }),
        (Pedestrian, DimRange { min: [0.5, 0.5, 1.6], max: [0.7, 0.7, 1.9] }),
        (Cyclist, DimRange { min: [0.6, 1.6, 1.6], max: [0.8, 1.9, 1.8] }),
    ]
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    #[serde(rename = "height_m")]
    pub height: f64,
    #[serde(rename = "azimuth_step_deg")]
    pub azimuth_step: f64,
    /// Lowest and highest beam elevation.
    #[serde(rename = "elevation_range_deg")]
    pub elevation_range: [f64; 2],
    #[serde(rename = "elevation_step_deg")]
    pub elevation_step: f64,
    #[serde(rename = "max_range_m")]
    pub max_range: f64,
    /// Keep only the first hit per ray. Off: every box a ray crosses returns a point.
    pub occlusion: bool,
    /// How far returns are placed behind the hit surface.
    #[serde(rename = "penetration_m")]
    pub penetration: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            height: 1.8,
            azimuth_step: 0.2,
            elevation_range: [-15.0, 5.0],
            elevation_step: 0.4,
            max_range: 80.0,
            occlusion: true,
            penetration: 0.02,
        }
    }
}

impl LidarSpec {
    pub fn azimuths(&self) -> Vec<f64> {
        let n = (360.0 / self.azimuth_step).round() as usize;
        (0..n).map(|k| (-180.0 + k as f64 * self.azimuth_step).to_radians()).collect()
    }

    pub fn elevations(&self) -> Vec<f64> {
        let n = ((self.elevation_range[1] - self.elevation_range[0]) / self.elevation_step + 1e-9).floor() as usize + 1;
        (0..n).map(|k| (self.elevation_range[0] + k as f64 * self.elevation_step).to_radians()).collect()
    }

    pub fn ray_count(&self) -> usize {
        self.azimuths().len() * self.elevations().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    #[serde(rename = "focal_px")]
    pub focal: f64,
    #[serde(rename = "image_size_px")]
    pub image_size: [f64; 2],
    #[serde(rename = "position_m")]
    pub position: [f64; 3],
    #[serde(rename = "yaw_rad")]
    pub yaw: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self { focal: 1000.0, image_size: [1920.0, 1080.0], position: [1.5, 0.0, 1.6], yaw: 0.0 }
    }
}

impl CameraSpec {
    /// Camera model with shutter time relative to the frame timestamp.
    pub fn model(&self) -> CameraModel {
        CameraModel::forward_looking(
            self.focal,
            self.focal,
            (self.image_size[0], self.image_size[1]),
            self.position,
            self.yaw,
            0.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    #[serde(rename = "frame_interval_s")]
    pub frame_interval: f64,
    #[serde(rename = "ego_speed_mps")]
    pub ego_speed: f64,
    #[serde(rename = "ego_yaw_rate_radps")]
    pub ego_yaw_rate: f64,
    /// Objects per class; each truck tows a trailer when `trailers` is set.
    pub counts: BTreeMap<ObjectClass, usize>,
    pub trailers: bool,
    /// Truck yaw minus trailer yaw.
    #[serde(rename = "articulation_range_deg")]
    pub articulation_range: [f64; 2],
    #[serde(rename = "vehicle_speed_range_mps")]
    pub vehicle_speed: [f64; 2],
    #[serde(rename = "vru_speed_range_mps")]
    pub vru_speed: [f64; 2],
    #[serde(rename = "x_range_m")]
    pub x_range: [f64; 2],
    #[serde(rename = "y_range_m")]
    pub y_range: [f64; 2],
    /// Clearance kept between independently placed objects.
    #[serde(rename = "gap_m")]
    pub gap: f64,
    pub templates: BTreeMap<ObjectClass, DimRange>,
    pub lidar: LidarSpec,
    pub camera: Option<CameraSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        use ObjectClass::*;
        Self {
            seed: 0,
            frames: 3,
            frame_interval: 0.5,
            ego_speed: 3.0,
            ego_yaw_rate: 0.0,
            counts: [(Car, 2), (Truck, 2), (Pedestrian, 3), (Cyclist, 1)].into_iter().collect(),
            trailers: true,
            articulation_range: [-25.0, 25.0],
            vehicle_speed: [0.0, 4.0],
            vru_speed: [0.0, 1.5],
            x_range: [8.0, 40.0],
            y_range: [-18.0, 18.0],
            gap: 0.5,
            templates: default_templates(),
            lidar: LidarSpec::default(),
            camera: Some(CameraSpec::default()),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.frames == 0 {
            return Err("frames must be >= 1".into());
        }
        if !(self.frame_interval > 0.0) {
            return Err("frame interval must be positive".into());
        }
        if !(self.x_range[0] < self.x_range[1] && self.y_range[0] < self.y_range[1]) {
            return Err("empty placement region".into());
        }
        let l = &self.lidar;
        if !(l.azimuth_step > 0.0 && l.elevation_step > 0.0 && l.max_range > 0.0 && l.penetration >= 0.0) {
            return Err("invalid lidar parameters".into());
        }
        for (class, n) in &self.counts {
            if *n > 0 && !self.templates.contains_key(class) {
                return Err(format!("no template for {class}"));
            }
        }
        if self.trailers
            && self.counts.get(&ObjectClass::Truck).copied().unwrap_or(0) > 0
            && !self.templates.contains_key(&ObjectClass::Trailer)
        {
            return Err("no template for trailer".into());
        }
        Ok(())
    }
}

/// Distance of the kingpin ahead of the truck's rear face.
pub const KINGPIN_FROM_TRUCK_REAR: f64 = 1.2;
/// Distance of the kingpin behind the trailer's front face.
pub const KINGPIN_FROM_TRAILER_FRONT: f64 = 1.0;

/// Trailer box for a truck box and articulation (truck yaw minus trailer yaw).
pub fn trailer_box(truck: &Box7, dims: [f64; 3], articulation: f64) -> Box7 {
    let (kx, ky) = truck.pose().apply(-truck.length / 2.0 + KINGPIN_FROM_TRUCK_REAR, 0.0);
    let yaw = truck.yaw - articulation;
    let back = dims[1] / 2.0 - KINGPIN_FROM_TRAILER_FRONT;
    Box7::new([kx - back * yaw.cos(), ky - back * yaw.sin(), dims[2] / 2.0], dims, yaw).expect("valid trailer")
}

#[derive(Debug, Clone)]
struct Actor {
    object_id: u64,
    class: ObjectClass,
    /// World box at t = 0.
    start: Box7,
    /// Velocity in world coordinates.
    velocity: [f64; 2],
    pair_id: Option<u64>,
}

impl Actor {
    fn at(&self, t: f64) -> Box7 {
        let mut b = self.start;
        b.cx += self.velocity[0] * t;
        b.cy += self.velocity[1] * t;
        b
    }
}

/// Ego pose in the world frame after `t` seconds.
pub fn ego_pose_at(spec: &SceneSpec, t: f64) -> Pose2 {
    let (v, w) = (spec.ego_speed, spec.ego_yaw_rate);
    if w.abs() < 1e-12 {
        Pose2::new(v * t, 0.0, 0.0)
    } else {
        Pose2::new(v / w * (w * t).sin(), v / w * (1.0 - (w * t).cos()), w * t)
    }
}

/// Entry distance and exit distance of a ray through a box, if it hits.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Box7) -> Option<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = (origin[0] - b.cx, origin[1] - b.cy);
    let o = [c * ox + s * oy, -s * ox + c * oy, origin[2] - b.cz];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let z = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(z));
        t1 = t1.min(a.max(z));
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, t1))
}

/// Casts every beam against `boxes` (sensor coordinates, ground at z = 0).
pub fn cast(lidar: &LidarSpec, boxes: &[Box7]) -> PointCloud {
    let origin = [0.0, 0.0, lidar.height];
    let elevations = lidar.elevations();
    let mut cloud = PointCloud::default();
    let stride = cloud.stride();
    for az in lidar.azimuths() {
        let (sa, ca) = az.sin_cos();
        for &el in &elevations {
            let (se, ce) = el.sin_cos();
            let dir = [ce * ca, ce * sa, se];
            let mut hits: Vec<(f64, f64)> = boxes.iter().filter_map(|b| ray_box(origin, dir, b)).collect();
            hits.retain(|h| h.0 <= lidar.max_range);
            hits.sort_by(|a, b| a.0.total_cmp(&b.0));
            if lidar.occlusion {
                hits.truncate(1);
            }
            for (t0, t1) in hits {
                let t = (t0 + lidar.penetration).min((t0 + t1) / 2.0);
                let mut row = vec![0.0; stride];
                row[..3].copy_from_slice(&[origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]]);
                // intensity falls off with range
                row[3] = (1.0 - t0 / lidar.max_range).clamp(0.0, 1.0);
                cloud.push(&row);
            }
        }
    }
    cloud
}

fn bbox_corners(b: &Box7) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (k, c) in out.iter_mut().enumerate() {
        let sx = if k & 1 == 0 { -0.5 } else { 0.5 };
        let sy = if k & 2 == 0 { -0.5 } else { 0.5 };
        let sz = if k & 4 == 0 { -0.5 } else { 0.5 };
        let (x, y) = b.pose().apply(sx * b.length, sy * b.width);
        *c = [x, y, b.cz + sz * b.height];
    }
    out
}

pub fn group_of(class: ObjectClass) -> CategoryGroup {
    match class {
        ObjectClass::Pedestrian | ObjectClass::Cyclist => CategoryGroup::Vru,
        _ => CategoryGroup::Vehicle,
    }
}

/// Tight image box of a fully visible-in-depth 3D box, clipped to the image.
pub fn project_box(model: &CameraModel, b: &Box7) -> Option<(f64, f64, f64, f64, f64)> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in bbox_corners(b) {
        let pc = model.to_camera(c);
        if pc[2] <= shape_targets::fusion::MIN_DEPTH {
            return None;
        }
        let u = model.cx + model.fx * pc[0] / pc[2];
        let v = model.cy + model.fy * pc[1] / pc[2];
        lo = [lo[0].min(u), lo[1].min(v)];
        hi = [hi[0].max(u), hi[1].max(v)];
    }
    let (u0, v0) = (lo[0].max(0.0), lo[1].max(0.0));
    let (u1, v1) = (hi[0].min(model.image_width), hi[1].min(model.image_height));
    let depth = model.to_camera([b.cx, b.cy, b.cz])[2];
    (u0 < u1 && v0 < v1).then_some((u0, v0, u1, v1, depth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub frames: Vec<LabeledFrame>,
    pub cameras: Vec<CameraModel>,
    pub camera_detections: Vec<CameraDetectionRecord>,
    pub detections: Vec<DetectionRecord>,
}

fn collides(candidate: &[Box7], placed: &[Vec<Box7>], gap: f64) -> bool {
    let grow = |b: &Box7| Box7::new(b.center(), [b.width + gap, b.length + gap, b.height], b.yaw).unwrap();
    placed.iter().any(|other| {
        candidate.iter().zip(other).any(|(a, b)| rotated_iou_bev(&grow(a), &grow(b)).map_or(true, |iou| iou > 0.0))
    })
}

fn place_actors(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Actor> {
    let times: Vec<f64> = (0..spec.frames).map(|k| k as f64 * spec.frame_interval).collect();
    // per placed object group, its boxes at every frame (trucks and trailers flattened)
    let mut placed: Vec<Vec<Box7>> = Vec::new();
    let mut actors = Vec::new();
    let mut next_id = 1u64;
    for (&class, &count) in &spec.counts {
        if class == ObjectClass::Trailer {
            continue;
        }
        for _ in 0..count {
            for _attempt in 0..200 {
                let dims = spec.templates[&class].sample(rng);
                let x = uniform(rng, spec.x_range[0], spec.x_range[1]);
                let y = uniform(rng, spec.y_range[0], spec.y_range[1]);
                let yaw = uniform(rng, -PI, PI);
                let speed_range = match group_of(class) {
                    CategoryGroup::Vru => spec.vru_speed,
                    CategoryGroup::Vehicle => spec.vehicle_speed,
                };
                let speed = uniform(rng, speed_range[0], speed_range[1]);
                let velocity = [speed * yaw.cos(), speed * yaw.sin()];
                let main = Box7::new([x, y, dims[2] / 2.0], dims, yaw).unwrap();
                let mut group = vec![Actor { object_id: next_id, class, start: main, velocity, pair_id: None }];
                if class == ObjectClass::Truck && spec.trailers {
                    let tdims = spec.templates[&ObjectClass::Trailer].sample(rng);
                    let art = uniform(rng, spec.articulation_range[0], spec.articulation_range[1]).to_radians();
                    group[0].pair_id = Some(next_id + 1);
                    group.push(Actor {
                        object_id: next_id + 1,
                        class: ObjectClass::Trailer,
                        start: trailer_box(&main, tdims, art),
                        velocity,
                        pair_id: Some(next_id),
                    });
                }
                let boxes_per_time: Vec<Vec<Box7>> =
                    group.iter().map(|a| times.iter().map(|t| a.at(*t)).collect()).collect();
                let clash = boxes_per_time.iter().any(|b| collides(b, &placed, spec.gap));
                if !clash {
                    next_id += group.len() as u64;
                    placed.extend(boxes_per_time);
                    actors.extend(group);
                    break;
                }
            }
        }
    }
    actors
}

/// Generates the full scene. Identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<GeneratedScene, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let actors = place_actors(spec, &mut rng);
    let camera = spec.camera.map(|c| c.model());
    let mut frames = Vec::with_capacity(spec.frames);
    let mut camera_detections = Vec::new();
    let mut detections = Vec::new();
    for k in 0..spec.frames {
        let t = k as f64 * spec.frame_interval;
        let ego = ego_pose_at(spec, t);
        let to_ego = ego.inverse();
        let labels: Vec<Label> = actors
            .iter()
            .map(|a| Label {
                object_id: a.object_id,
                class: a.class,
                bbox: a.at(t).transformed(&to_ego),
                pair_id: a.pair_id,
            })
            .collect();
        let boxes: Vec<Box7> = labels.iter().map(|l| l.bbox).collect();
        let cloud = cast(&spec.lidar, &boxes);
        let frame_id = k as u64;
        for l in &labels {
            detections.push(DetectionRecord {
                frame_id,
                detection: Detection { class: l.class, bbox: l.bbox, score: rng.gen_range(0.5..1.0) },
            });
        }
        if let Some(model) = &camera {
            let dets = labels
                .iter()
                .filter_map(|l| {
                    project_box(model, &l.bbox).map(|(u0, v0, u1, v1, depth)| Detection2D {
                        u_min: u0,
                        v_min: v0,
                        u_max: u1,
                        v_max: v1,
                        group: group_of(l.class),
                        confidence: 1.0,
                        depth: Some(depth),
                    })
                })
                .collect();
            camera_detections.push(CameraDetectionRecord { frame_id, camera: 0, detections: dets });
        }
        frames.push(LabeledFrame {
            frame: PointCloudFrame { frame_id, timestamp: t, ego_pose: Some(ego), cloud },
            labels,
        });
    }
    Ok(GeneratedScene { frames, cameras: camera.into_iter().collect(), camera_detections, detections })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_box_slab() {
        let b = Box7::new([10.0, 0.0, 1.0], [2.0, 4.0, 2.0], 0.0).unwrap();
        let (t0, t1) = ray_box([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], &b).unwrap();
        assert!((t0 - 8.0).abs() < 1e-12 && (t1 - 12.0).abs() < 1e-12);
        assert!(ray_box([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], &b).is_none());
        assert!(ray_box([0.0, 0.0, 3.5], [1.0, 0.0, 0.0], &b).is_none());
        let turned = Box7::new([10.0, 0.0, 1.0], [2.0, 4.0, 2.0], PI / 2.0).unwrap();
        let (t0, _) = ray_box([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], &turned).unwrap();
        assert!((t0 - 9.0).abs() < 1e-12);
    }

    #[test]
    fn occlusion_keeps_first_hit() {
        let near = Box7::new([10.0, 0.0, 1.0], [4.0, 2.0, 2.0], 0.0).unwrap();
        let far = Box7::new([20.0, 0.0, 1.0], [4.0, 2.0, 2.0], 0.0).unwrap();
        let mut lidar = LidarSpec { height: 1.0, azimuth_step: 1.0, ..Default::default() };
        let both = cast(&lidar, &[near, far]);
        assert!(both.xyz_iter().all(|p| near.contains(p, 1e-9)));
        lidar.occlusion = false;
        let all = cast(&lidar, &[near, far]);
        assert!(all.xyz_iter().any(|p| far.contains(p, 1e-9)));
        assert!(all.len() > both.len());
    }

    #[test]
    fn trailer_articulation() {
        let truck = Box7::new([0.0, 0.0, 1.6], [2.5, 6.0, 3.2], 0.3).unwrap();
        let art = 20f64.to_radians();
        let trailer = trailer_box(&truck, [2.5, 13.0, 3.9], art);
        assert!((truck.yaw - trailer.yaw - art).abs() < 1e-12);
        // kingpin coincides in both frames
        let k1 = truck.pose().apply(-3.0 + KINGPIN_FROM_TRUCK_REAR, 0.0);
        let k2 = trailer.pose().apply(6.5 - KINGPIN_FROM_TRAILER_FRONT, 0.0);
        assert!((k1.0 - k2.0).abs() < 1e-12 && (k1.1 - k2.1).abs() < 1e-12);
    }

    #[test]
    fn scene_contents() {
        let spec = SceneSpec::default();
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.frames.len(), 3);
        let labels = &scene.frames[2].labels;
        assert_eq!(labels.iter().filter(|l| l.class == ObjectClass::Trailer).count(), 2);
        for l in labels.iter().filter(|l| l.class == ObjectClass::Truck) {
            let partner = labels.iter().find(|p| Some(p.object_id) == l.pair_id).unwrap();
            assert_eq!(partner.pair_id, Some(l.object_id));
        }
        assert!(scene.frames.iter().all(|f| f.frame.cloud.len() > 100));
        assert_eq!(scene, generate_scene(&spec).unwrap());
    }
}
