//! Point-to-detection distance fusion.
//!
//! Each LiDAR point is projected into every camera and annotated, per
//! category group, with its distance to the nearest 2D detection center,
//! normalized by that detection's half width and half height. A point that
//! projects a little off its object still gets a small value, so the column
//! degrades smoothly under calibration or timing error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Column, PointCloudFrame};
use crate::geometry::Pose2;

/// Points closer than this to the image plane are not projected.
pub const MIN_DEPTH: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("configuration error: {0}")]
    Config(String),
}

/// Pinhole camera with a LiDAR→camera extrinsic (camera: x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    #[serde(rename = "fx_px")]
    pub fx: f64,
    #[serde(rename = "fy_px")]
    pub fy: f64,
    #[serde(rename = "cx_px")]
    pub cx: f64,
    #[serde(rename = "cy_px")]
    pub cy: f64,
    /// Row-major rotation taking LiDAR coordinates to camera coordinates.
    pub rotation: [[f64; 3]; 3],
    #[serde(rename = "translation_m")]
    pub translation: [f64; 3],
    #[serde(rename = "image_width_px")]
    pub image_width: f64,
    #[serde(rename = "image_height_px")]
    pub image_height: f64,
    /// Absolute shutter time.
    #[serde(rename = "shutter_time_s")]
    pub shutter_time: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(FusionError::Config("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r[a][k] * r[b][k]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                if (dot - expected).abs() > 1e-9 {
                    return Err(FusionError::Config("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Forward-looking camera mounted at `position` (LiDAR frame), rotated
    /// `yaw` about LiDAR z. LiDAR x maps to camera z.
    pub fn forward_looking(
        fx: f64,
        fy: f64,
        image_size: (f64, f64),
        position: [f64; 3],
        yaw: f64,
        shutter_time: f64,
    ) -> Self {
        let (s, c) = yaw.sin_cos();
        // camera axes expressed in LiDAR coordinates
        let x_cam = [s, -c, 0.0];
        let y_cam = [0.0, 0.0, -1.0];
        let z_cam = [c, s, 0.0];
        let rotation = [x_cam, y_cam, z_cam];
        let translation = [0, 1, 2].map(|k| -(0..3).map(|m| rotation[k][m] * position[m]).sum::<f64>());
        Self {
            fx,
            fy,
            cx: image_size.0 / 2.0,
            cy: image_size.1 / 2.0,
            rotation,
            translation,
            image_width: image_size.0,
            image_height: image_size.1,
            shutter_time,
        }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|k| r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2] + self.translation[k])
    }

    /// Pinhole projection of a camera-frame point; `None` when behind the
    /// near plane or outside `[0, W) × [0, H)`.
    pub fn project_camera_point(&self, pc: [f64; 3]) -> Option<Pixel> {
        if pc[2] <= MIN_DEPTH {
            return None;
        }
        let u = self.cx + self.fx * pc[0] / pc[2];
        let v = self.cy + self.fy * pc[1] / pc[2];
        (u >= 0.0 && u < self.image_width && v >= 0.0 && v < self.image_height).then_some(Pixel { u, v, depth: pc[2] })
    }

    /// Returns a copy with intrinsics, image size scaled by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            fx: self.fx * k,
            fy: self.fy * k,
            cx: self.cx * k,
            cy: self.cy * k,
            image_width: self.image_width * k,
            image_height: self.image_height * k,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a LiDAR point captured `dt` seconds before the shutter.
///
/// `ego_motion` is the ego displacement per second (planar); the point is
/// moved into the ego frame at shutter time before the extrinsic is applied.
pub fn project_point(point: [f64; 3], model: &CameraModel, ego_motion: &Pose2, dt: f64) -> Option<Pixel> {
    let motion = ego_motion.scaled(dt).inverse();
    let (x, y) = motion.apply(point[0], point[1]);
    model.project_camera_point(model.to_camera([x, y, point[2]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryGroup {
    /// Pedestrians and two-wheelers.
    Vru,
    Vehicle,
}

impl CategoryGroup {
    pub const ALL: [CategoryGroup; 2] = [CategoryGroup::Vru, CategoryGroup::Vehicle];

    pub fn column(self) -> Column {
        match self {
            CategoryGroup::Vru => Column::FusionVru,
            CategoryGroup::Vehicle => Column::FusionVehicle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    #[serde(rename = "u_min_px")]
    pub u_min: f64,
    #[serde(rename = "v_min_px")]
    pub v_min: f64,
    #[serde(rename = "u_max_px")]
    pub u_max: f64,
    #[serde(rename = "v_max_px")]
    pub v_max: f64,
    pub group: CategoryGroup,
    pub confidence: f64,
    #[serde(rename = "depth_m", default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
}

impl Detection2D {
    pub fn is_valid(&self) -> bool {
        self.u_min < self.u_max && self.v_min < self.v_max
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.u_max - self.u_min, self.v_max - self.v_min)
    }

    pub fn shifted(&self, du: f64, dv: f64) -> Self {
        Self { u_min: self.u_min + du, u_max: self.u_max + du, v_min: self.v_min + dv, v_max: self.v_max + dv, ..*self }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { u_min: self.u_min * k, u_max: self.u_max * k, v_min: self.v_min * k, v_max: self.v_max * k, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    /// `√((2Δu/w)² + (2Δv/h)²)`: 1 at edge midpoints, < √2 inside the box.
    #[default]
    Elliptic,
    /// `max(|2Δu/w|, |2Δv/h|)`: ≤ 1 exactly inside the box.
    Chebyshev,
}

impl DistanceNorm {
    pub fn evaluate(self, u: f64, v: f64, det: &Detection2D) -> f64 {
        let (uc, vc) = det.center();
        let (w, h) = det.size();
        let a = 2.0 * (u - uc) / w;
        let b = 2.0 * (v - vc) / h;
        match self {
            DistanceNorm::Elliptic => a.hypot(b),
            DistanceNorm::Chebyshev => a.abs().max(b.abs()),
        }
    }
}

/// Minimum normalized distance over `detections` and the index achieving it
/// (lowest index on ties). `None` for an empty list.
pub fn distance_to_nearest_box<'a, I>(u: f64, v: f64, detections: I, norm: DistanceNorm) -> Option<(f64, usize)>
where
    I: IntoIterator<Item = &'a Detection2D>,
{
    let mut best: Option<(f64, usize)> = None;
    for (k, det) in detections.into_iter().enumerate() {
        let d = norm.evaluate(u, v, det);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, k));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Saturation value; also written for points no camera sees.
    pub d_max: f64,
    #[serde(default)]
    pub norm: DistanceNorm,
    /// Ego displacement per second, used to move points to the shutter time.
    #[serde(default)]
    pub ego_motion: Pose2,
    #[serde(default)]
    pub with_depth: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_max: 4.0, norm: DistanceNorm::Elliptic, ego_motion: Pose2::identity(), with_depth: false }
    }
}

/// Per-point fusion values, one column per category group.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionColumns {
    pub vru: Vec<f64>,
    pub vehicle: Vec<f64>,
    /// Estimated depth of the nearest detection that carries one; NaN otherwise.
    pub depth: Option<Vec<f64>>,
    /// Whether any camera sees the point.
    pub visible: Vec<bool>,
}

impl FusionColumns {
    pub fn group(&self, group: CategoryGroup) -> &[f64] {
        match group {
            CategoryGroup::Vru => &self.vru,
            CategoryGroup::Vehicle => &self.vehicle,
        }
    }

    /// Writes the columns into the frame's cloud (appending missing columns).
    pub fn write_into(&self, frame: &mut PointCloudFrame) {
        frame.cloud.set_column(Column::FusionVru, &self.vru);
        frame.cloud.set_column(Column::FusionVehicle, &self.vehicle);
        if let Some(depth) = &self.depth {
            frame.cloud.set_column(Column::CameraDepth, depth);
        }
    }
}

/// Annotates every point with the clamped minimum normalized distance per
/// group across all cameras.
pub fn annotate_frame(
    frame: &PointCloudFrame,
    cameras: &[CameraModel],
    detections: &[Vec<Detection2D>],
    config: &FusionConfig,
) -> Result<FusionColumns, FusionError> {
    if cameras.len() != detections.len() {
        return Err(FusionError::Config(format!("{} cameras but {} detection lists", cameras.len(), detections.len())));
    }
    if !(config.d_max > 0.0) {
        return Err(FusionError::Config(format!("d_max {}", config.d_max)));
    }
    for cam in cameras {
        cam.validate()?;
    }
    if let Some((c, _)) = detections.iter().enumerate().find(|(_, dets)| dets.iter().any(|d| !d.is_valid())) {
        return Err(FusionError::Config(format!("camera {c} has an inverted bounding box")));
    }

    let time_col = frame.cloud.column_index(Column::TimeOffset);
    let n = frame.cloud.len();
    let mut out = FusionColumns {
        vru: vec![config.d_max; n],
        vehicle: vec![config.d_max; n],
        depth: config.with_depth.then(|| vec![f64::NAN; n]),
        visible: vec![false; n],
    };
    let mut nearest_with_depth = vec![f64::INFINITY; if config.with_depth { n } else { 0 }];

    for (cam, dets) in cameras.iter().zip(detections) {
        let per_group: Vec<(CategoryGroup, Vec<&Detection2D>)> =
            CategoryGroup::ALL.iter().map(|g| (*g, dets.iter().filter(|d| d.group == *g).collect())).collect();
        for p in 0..n {
            let row = frame.cloud.row(p);
            let point_time = frame.timestamp + time_col.map_or(0.0, |k| row[k]);
            let Some(px) =
                project_point([row[0], row[1], row[2]], cam, &config.ego_motion, cam.shutter_time - point_time)
            else {
                continue;
            };
            out.visible[p] = true;
            for (group, list) in &per_group {
                let Some((d, k)) = distance_to_nearest_box(px.u, px.v, list.iter().copied(), config.norm) else {
                    continue;
                };
                let slot = match group {
                    CategoryGroup::Vru => &mut out.vru[p],
                    CategoryGroup::Vehicle => &mut out.vehicle[p],
                };
                *slot = slot.min(d.min(config.d_max));
                if let (Some(depth), Some(est)) = (out.depth.as_mut(), list[k].depth) {
                    if d < nearest_with_depth[p] {
                        nearest_with_depth[p] = d;
                        depth[p] = est;
                    }
                }
            }
        }
    }
    Ok(out)
}
