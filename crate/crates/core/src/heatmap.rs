//! Per-class BEV center heatmaps.
//!
//! `Correlated` mode renders a rotated Gaussian whose standard deviations
//! follow the object's length and width; `UncorrelatedBaseline` renders the
//! isotropic CenterPoint-style blob with a single sigma.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::ellipse_distance_sq;
use crate::cloud::{Label, ObjectClass};
use crate::geometry::Box7;

/// Gaussians are cut off beyond this Mahalanobis radius.
pub const TRUNCATION_RADIUS: f64 = 3.0;

/// Score written to every owned peak cell so each object stays extractable.
pub const PEAK_SCORE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("invalid heatmap spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    UncorrelatedBaseline,
    #[default]
    Correlated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// Cells along x.
    pub width: usize,
    /// Cells along y.
    pub height: usize,
    #[serde(rename = "origin_m")]
    pub origin: [f64; 2],
    #[serde(rename = "cell_size_m")]
    pub cell_size: f64,
    pub classes: Vec<ObjectClass>,
    pub gaussian_scale: f64,
    pub mode: HeatmapMode,
    /// Lower bound on both standard deviations, in cells.
    #[serde(rename = "min_sigma_cells")]
    pub min_sigma: f64,
}

impl HeatmapSpec {
    pub const DEFAULT_MIN_SIGMA: f64 = 0.5;

    pub fn validate(&self) -> Result<(), HeatmapError> {
        if !(self.cell_size > 0.0) {
            return Err(HeatmapError::InvalidSpec(format!("cell size {}", self.cell_size)));
        }
        if !(self.gaussian_scale > 0.0) {
            return Err(HeatmapError::InvalidSpec(format!("gaussian scale {}", self.gaussian_scale)));
        }
        if !(self.min_sigma > 0.0) {
            return Err(HeatmapError::InvalidSpec(format!("min sigma {}", self.min_sigma)));
        }
        Ok(())
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.origin[0] + (i as f64 + 0.5) * self.cell_size, self.origin[1] + (j as f64 + 0.5) * self.cell_size)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin[0]) / self.cell_size).floor();
        let fj = ((y - self.origin[1]) / self.cell_size).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.width as f64 || fj >= self.height as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    fn min_sigma_m(&self) -> f64 {
        self.min_sigma * self.cell_size
    }

    /// (along-heading, across-heading) standard deviations in meters.
    pub fn correlated_sigmas(&self, b: &Box7) -> (f64, f64) {
        let floor = self.min_sigma_m();
        ((self.gaussian_scale * b.length).max(floor), (self.gaussian_scale * b.width).max(floor))
    }

    /// Isotropic sigma: scaled geometric mean of length and width.
    pub fn baseline_sigma(&self, b: &Box7) -> f64 {
        (self.gaussian_scale * (b.length * b.width).sqrt()).max(self.min_sigma_m())
    }
}

/// Dense row-major raster (`y` rows, `x` columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// 8-bit grayscale, row 0 at the top (largest y).
    pub fn to_gray8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in (0..self.height).rev() {
            for i in 0..self.width {
                out.push((self.get(i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

fn render_gaussian(center: (f64, f64), yaw: f64, sigmas: (f64, f64), spec: &HeatmapSpec, raster: &mut Raster) {
    let (sa, sb) = sigmas;
    let (s, c) = yaw.sin_cos();
    let ex = TRUNCATION_RADIUS * (sa * c).hypot(sb * s);
    let ey = TRUNCATION_RADIUS * (sa * s).hypot(sb * c);
    let cell = spec.cell_size;
    let lo_i = ((center.0 - ex - spec.origin[0]) / cell).floor().max(0.0);
    let lo_j = ((center.1 - ey - spec.origin[1]) / cell).floor().max(0.0);
    let hi_i = ((center.0 + ex - spec.origin[0]) / cell).ceil().min(spec.width as f64 - 1.0);
    let hi_j = ((center.1 + ey - spec.origin[1]) / cell).ceil().min(spec.height as f64 - 1.0);
    if hi_i < lo_i || hi_j < lo_j {
        return;
    }
    let r2 = TRUNCATION_RADIUS * TRUNCATION_RADIUS;
    for j in lo_j as usize..=hi_j as usize {
        for i in lo_i as usize..=hi_i as usize {
            let (x, y) = spec.cell_center(i, j);
            let m2 = ellipse_distance_sq(x - center.0, y - center.1, yaw, sa, sb);
            if m2 > r2 {
                continue;
            }
            let g = (-0.5 * m2).exp();
            let v = &mut raster.data[j * raster.width + i];
            if g > *v {
                *v = g;
            }
        }
    }
}

/// Max-composes `exp(-½ dᵀΣ⁻¹d)` with `Σ = R(yaw)·diag(σ_l², σ_w²)·R(yaw)ᵀ`.
pub fn render_correlated_gaussian(b: &Box7, spec: &HeatmapSpec, raster: &mut Raster) {
    render_gaussian((b.cx, b.cy), b.yaw, spec.correlated_sigmas(b), spec, raster);
}

/// Max-composes the isotropic Gaussian; the box yaw has no effect.
pub fn render_uncorrelated_baseline(b: &Box7, spec: &HeatmapSpec, raster: &mut Raster) {
    let sigma = spec.baseline_sigma(b);
    render_gaussian((b.cx, b.cy), 0.0, (sigma, sigma), spec, raster);
}

/// Regression payload stored at an object's peak cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPeak {
    pub class: ObjectClass,
    pub i: usize,
    pub j: usize,
    /// Center offset from the cell center, in cells.
    pub offset: [f64; 2],
    #[serde(rename = "z_m")]
    pub z: f64,
    /// (width, length, height) in meters.
    #[serde(rename = "dims_m")]
    pub dims: [f64; 3],
    pub sin_yaw: f64,
    pub cos_yaw: f64,
    /// Index of the owning object in the rendered label slice.
    pub gt: usize,
    /// The owner's own Gaussian value at this cell before the peak score was applied.
    pub own_score: f64,
}

impl HeatmapPeak {
    pub fn log_dims(&self) -> [f64; 3] {
        self.dims.map(f64::ln)
    }

    pub fn decode(&self, spec: &HeatmapSpec) -> Box7 {
        let x = spec.origin[0] + (self.i as f64 + 0.5 + self.offset[0]) * spec.cell_size;
        let y = spec.origin[1] + (self.j as f64 + 0.5 + self.offset[1]) * spec.cell_size;
        Box7::new([x, y, self.z], self.dims, self.sin_yaw.atan2(self.cos_yaw)).expect("peak payload holds a valid box")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub spec: HeatmapSpec,
    /// One raster per entry of `spec.classes`.
    pub channels: Vec<Raster>,
    pub peaks: Vec<HeatmapPeak>,
}

impl Heatmap {
    pub fn channel(&self, class: ObjectClass) -> Option<&Raster> {
        self.spec.classes.iter().position(|c| *c == class).map(|k| &self.channels[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "issue")]
pub enum RenderIssue {
    OutOfExtent {
        gt: usize,
    },
    ClassNotRendered {
        gt: usize,
    },
    /// `gt` lost its peak cell to `owner`, whose Gaussian is higher there.
    PeakConflict {
        gt: usize,
        owner: usize,
    },
}

/// Renders every object into its class channel and records one peak payload per object.
pub fn render_frame(gts: &[Label], spec: &HeatmapSpec) -> Result<(Heatmap, Vec<RenderIssue>), HeatmapError> {
    spec.validate()?;
    let mut channels = vec![Raster::zeros(spec.width, spec.height); spec.classes.len()];
    let mut owners: BTreeMap<(usize, usize, usize), HeatmapPeak> = BTreeMap::new();
    let mut issues = Vec::new();

    for (g, gt) in gts.iter().enumerate() {
        let Some(ch) = spec.classes.iter().position(|c| *c == gt.class) else {
            issues.push(RenderIssue::ClassNotRendered { gt: g });
            continue;
        };
        let b = &gt.bbox;
        let Some((i, j)) = spec.cell_of(b.cx, b.cy) else {
            issues.push(RenderIssue::OutOfExtent { gt: g });
            continue;
        };
        let raster = &mut channels[ch];
        let (sigmas, yaw) = match spec.mode {
            HeatmapMode::Correlated => {
                render_correlated_gaussian(b, spec, raster);
                (spec.correlated_sigmas(b), b.yaw)
            }
            HeatmapMode::UncorrelatedBaseline => {
                render_uncorrelated_baseline(b, spec, raster);
                let s = spec.baseline_sigma(b);
                ((s, s), 0.0)
            }
        };
        let (x, y) = spec.cell_center(i, j);
        let own = (-0.5 * ellipse_distance_sq(x - b.cx, y - b.cy, yaw, sigmas.0, sigmas.1)).exp();
        raster.data[j * raster.width + i] = PEAK_SCORE;

        let peak = HeatmapPeak {
            class: gt.class,
            i,
            j,
            offset: [
                (b.cx - spec.origin[0]) / spec.cell_size - (i as f64 + 0.5),
                (b.cy - spec.origin[1]) / spec.cell_size - (j as f64 + 0.5),
            ],
            z: b.cz,
            dims: [b.width, b.length, b.height],
            sin_yaw: b.yaw.sin(),
            cos_yaw: b.yaw.cos(),
            gt: g,
            own_score: own,
        };
        match owners.get(&(ch, i, j)) {
            Some(prev) if prev.own_score >= own => {
                issues.push(RenderIssue::PeakConflict { gt: g, owner: prev.gt });
            }
            Some(prev) => {
                issues.push(RenderIssue::PeakConflict { gt: prev.gt, owner: g });
                owners.insert((ch, i, j), peak);
            }
            None => {
                owners.insert((ch, i, j), peak);
            }
        }
    }

    let mut peaks: Vec<HeatmapPeak> = owners.into_values().collect();
    peaks.sort_by_key(|p| p.gt);
    Ok((Heatmap { spec: spec.clone(), channels, peaks }, issues))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakDetection {
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub score: f64,
}

/// Local maxima at or above `score_floor` inside a `nms_kernel`-cell window,
/// decoded through the stored payloads. Maxima without a payload are skipped.
pub fn extract_peaks(heatmap: &Heatmap, score_floor: f64, nms_kernel: usize) -> Vec<PeakDetection> {
    let spec = &heatmap.spec;
    let payload: BTreeMap<(ObjectClass, usize, usize), &HeatmapPeak> =
        heatmap.peaks.iter().map(|p| ((p.class, p.i, p.j), p)).collect();
    let radius = (nms_kernel / 2) as isize;
    let mut out = Vec::new();
    for (ch, raster) in heatmap.channels.iter().enumerate() {
        let class = spec.classes[ch];
        for j in 0..raster.height {
            for i in 0..raster.width {
                let v = raster.get(i, j);
                if v < score_floor || v <= 0.0 {
                    continue;
                }
                let own_index = j * raster.width + i;
                let mut is_max = true;
                'window: for dj in -radius..=radius {
                    for di in -radius..=radius {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if (di == 0 && dj == 0)
                            || ni < 0
                            || nj < 0
                            || ni >= raster.width as isize
                            || nj >= raster.height as isize
                        {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        let nv = raster.get(ni, nj);
                        if nv > v || (nv == v && nj * raster.width + ni < own_index) {
                            is_max = false;
                            break 'window;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                if let Some(p) = payload.get(&(class, i, j)) {
                    out.push(PeakDetection { class, bbox: p.decode(spec), score: v });
                }
            }
        }
    }
    out
}
