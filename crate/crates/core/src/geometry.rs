//! Rotated-box and planar pose math shared by every other module.
//!
//! Conventions: `length` runs along the heading (+X of the box frame),
//! `width` across it (+Y of the box frame), `yaw` is measured from the world
//! +X axis, counter-clockwise, and is kept in `(-π, π]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Intersections smaller than this are treated as touching, not overlapping.
const MIN_INTERSECTION_AREA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: width={width}, length={length}, height={height}")]
    DegenerateBox { width: f64, length: f64, height: f64 },
    #[error("non-finite box parameter")]
    NonFinite,
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not convex and counter-clockwise at vertex {0}")]
    NotConvex(usize),
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Signed smallest difference `a - b`, wrapped into `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// A 7-DoF box: center, size and rotation about Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Box7Repr", into = "Box7Repr")]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub width: f64,
    pub length: f64,
    pub height: f64,
    pub yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct Box7Repr {
    cx_m: f64,
    cy_m: f64,
    cz_m: f64,
    width_m: f64,
    length_m: f64,
    height_m: f64,
    yaw_rad: f64,
}

impl TryFrom<Box7Repr> for Box7 {
    type Error = GeometryError;

    fn try_from(r: Box7Repr) -> Result<Self, Self::Error> {
        Box7::new([r.cx_m, r.cy_m, r.cz_m], [r.width_m, r.length_m, r.height_m], r.yaw_rad)
    }
}

impl From<Box7> for Box7Repr {
    fn from(b: Box7) -> Self {
        Box7Repr {
            cx_m: b.cx,
            cy_m: b.cy,
            cz_m: b.cz,
            width_m: b.width,
            length_m: b.length,
            height_m: b.height,
            yaw_rad: b.yaw,
        }
    }
}

impl Box7 {
    /// Builds a box from `center = [x, y, z]` and `size = [width, length, height]`.
    /// Rejects non-positive sizes; the yaw is normalized here once.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if center.iter().chain(size.iter()).any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let [width, length, height] = size;
        if width <= 0.0 || length <= 0.0 || height <= 0.0 {
            return Err(GeometryError::DegenerateBox { width, length, height });
        }
        Ok(Self { cx: center[0], cy: center[1], cz: center[2], width, length, height, yaw: normalize_angle(yaw) })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.width, self.length, self.height]
    }

    /// Footprint area in m².
    pub fn bev_area(&self) -> f64 {
        self.width * self.length
    }

    /// The planar pose of the box frame in its parent frame.
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.cx, self.cy, self.yaw)
    }

    /// Same box moved to `pose` (z and size unchanged).
    pub fn with_pose(&self, pose: Pose2) -> Self {
        Self { cx: pose.tx, cy: pose.ty, yaw: normalize_angle(pose.theta), ..*self }
    }

    /// Applies a rigid planar transform to the box.
    pub fn transformed(&self, pose: &Pose2) -> Self {
        self.with_pose(pose.compose(&self.pose()))
    }

    fn check_valid(&self) -> Result<(), GeometryError> {
        if !(self.width > 0.0 && self.length > 0.0 && self.height > 0.0) {
            return Err(GeometryError::DegenerateBox { width: self.width, length: self.length, height: self.height });
        }
        Ok(())
    }

    /// Expresses a world point in the box frame (x along heading, origin at center).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let [x, y, z] = self.to_local(p);
        x.abs() <= self.length / 2.0 + margin
            && y.abs() <= self.width / 2.0 + margin
            && z.abs() <= self.height / 2.0 + margin
    }

    /// BEV-only containment of a planar point.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let [lx, ly, _] = self.to_local([x, y, self.cz]);
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }
}

/// A rigid transform in the BEV plane: rotate by `theta`, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    #[serde(rename = "tx_m")]
    pub tx: f64,
    #[serde(rename = "ty_m")]
    pub ty: f64,
    #[serde(rename = "theta_rad")]
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(tx: f64, ty: f64, theta: f64) -> Self {
        Self { tx, ty, theta }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (tx, ty) = self.apply(other.tx, other.ty);
        Pose2::new(tx, ty, normalize_angle(self.theta + other.theta))
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.tx + s * self.ty), s * self.tx - c * self.ty, normalize_angle(-self.theta))
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn relative_to(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Linear scaling of translation and rotation, used to turn a per-second
    /// motion into the displacement over `factor` seconds.
    pub fn scaled(&self, factor: f64) -> Pose2 {
        Pose2::new(self.tx * factor, self.ty * factor, self.theta * factor)
    }

    /// Largest component-wise deviation from `other`, with the angle wrapped.
    pub fn max_abs_diff(&self, other: &Pose2) -> f64 {
        (self.tx - other.tx).abs().max((self.ty - other.ty).abs()).max(angle_diff(self.theta, other.theta).abs())
    }
}

/// A convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if cross(sub(b, a), sub(c, b)) < -1e-9 {
                return Err(GeometryError::NotConvex((i + 1) % n));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    /// Sutherland–Hodgman clip of `self` against the convex `clip`.
    /// Returns the vertex list of the intersection (possibly empty).
    pub fn clip(&self, clip: &ConvexPolygon) -> Vec<[f64; 2]> {
        let mut output = self.vertices.clone();
        let n = clip.vertices.len();
        for i in 0..n {
            if output.is_empty() {
                break;
            }
            let edge_start = clip.vertices[i];
            let edge_end = clip.vertices[(i + 1) % n];
            let input = std::mem::take(&mut output);
            let m = input.len();
            for k in 0..m {
                let current = input[k];
                let previous = input[(k + m - 1) % m];
                let cur_in = side(edge_start, edge_end, current) >= 0.0;
                let prev_in = side(edge_start, edge_end, previous) >= 0.0;
                if cur_in {
                    if !prev_in {
                        output.push(line_intersection(previous, current, edge_start, edge_end));
                    }
                    output.push(current);
                } else if prev_in {
                    output.push(line_intersection(previous, current, edge_start, edge_end));
                }
            }
        }
        output
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Positive when `p` lies left of the directed edge `a → b`.
fn side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    cross(sub(b, a), sub(p, a))
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let sp = side(a, b, p);
    let sq = side(a, b, q);
    let denom = sp - sq;
    if denom == 0.0 {
        return q;
    }
    let t = sp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn shoelace(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| cross(vertices[i], vertices[(i + 1) % n])).sum();
    twice / 2.0
}

/// The four footprint corners, counter-clockwise, starting front-right.
pub fn box_to_bev_polygon(b: &Box7) -> ConvexPolygon {
    let hl = b.length / 2.0;
    let hw = b.width / 2.0;
    let (s, c) = b.yaw.sin_cos();
    let vertices = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]]
        .iter()
        .map(|&[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
        .collect();
    ConvexPolygon { vertices }
}

/// BEV IoU of the rotated footprints.
pub fn rotated_iou_bev(a: &Box7, b: &Box7) -> Result<f64, GeometryError> {
    a.check_valid()?;
    b.check_valid()?;
    let pa = box_to_bev_polygon(a);
    let pb = box_to_bev_polygon(b);
    let inter = shoelace(&pa.clip(&pb)).max(0.0);
    if inter < MIN_INTERSECTION_AREA {
        return Ok(0.0);
    }
    let union = a.bev_area() + b.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Axis-aligned bounding rectangle of the rotated footprint: `[xmin, ymin, xmax, ymax]`.
pub fn bev_aabb(b: &Box7) -> [f64; 4] {
    let (s, c) = b.yaw.sin_cos();
    let ex = (c * b.length).abs() / 2.0 + (s * b.width).abs() / 2.0;
    let ey = (s * b.length).abs() / 2.0 + (c * b.width).abs() / 2.0;
    [b.cx - ex, b.cy - ey, b.cx + ex, b.cy + ey]
}

/// IoU of the two footprints' axis-aligned bounding rectangles.
///
/// This is what a 0°/90° anchor matcher sees: a box at 45° inflates to a
/// square and stops matching elongated anchors.
pub fn axis_aligned_iou_bev(a: &Box7, b: &Box7) -> Result<f64, GeometryError> {
    a.check_valid()?;
    b.check_valid()?;
    let ra = bev_aabb(a);
    let rb = bev_aabb(b);
    let iw = (ra[2].min(rb[2]) - ra[0].max(rb[0])).max(0.0);
    let ih = (ra[3].min(rb[3]) - ra[1].max(rb[1])).max(0.0);
    let inter = iw * ih;
    if inter < MIN_INTERSECTION_AREA {
        return Ok(0.0);
    }
    let area_a = (ra[2] - ra[0]) * (ra[3] - ra[1]);
    let area_b = (rb[2] - rb[0]) * (rb[3] - rb[1]);
    Ok((inter / (area_a + area_b - inter)).clamp(0.0, 1.0))
}

/// Indices of points (given as `[x, y, z]` rows) inside the box grown by `margin`.
pub fn points_in_box<I>(points: I, b: &Box7, margin: f64) -> Vec<usize>
where
    I: IntoIterator<Item = [f64; 3]>,
{
    points.into_iter().enumerate().filter(|(_, p)| b.contains(*p, margin)).map(|(i, _)| i).collect()
}
