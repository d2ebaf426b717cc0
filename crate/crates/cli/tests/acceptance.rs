//! Acceptance suite. Every criterion runs with its tolerance and time budget
//! and prints one PASS/FAIL line; the process fails if any criterion does.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shape_targets::anchors::{
    assign_adaptive_shape, assign_baseline_iou, generate_anchor_grid, AnchorClassSpec, AnchorGridSpec, BaselineConfig,
    ShapeEllipseParams,
};
use shape_targets::augment::{
    build_database, frame_rng, max_non_partner_overlap, sample_and_paste, AugmentConfig, BuildConfig, CropMode,
    LabeledFrame, PlacementMode, PlacementRegion,
};
use shape_targets::eval::{evaluate, Detection, EvalConfig, EvalFrame, IgnoreReason, NoLabelZone, ZoneOrigin};
use shape_targets::fusion::{annotate_frame, CameraModel, CategoryGroup, Detection2D, DistanceNorm, FusionConfig};
use shape_targets::geometry::rotated_iou_bev;
use shape_targets::heatmap::{
    extract_peaks, render_correlated_gaussian, render_frame, render_uncorrelated_baseline, HeatmapMode, HeatmapSpec,
    Raster, TRUNCATION_RADIUS,
};
use shape_targets::temporal::{
    compensate_and_merge, encode_and_stack, pillarize, stack, unstack, BevGrid, BevGridSpec, MeanEncoder, PillarEncoder,
};
use shape_targets::{Box7, Column, Label, ObjectClass, PointCloud, PointCloudFrame, Pose2};
use shape_targets_cli::formats::list_files;
use shape_targets_cli::scene::{generate_scene, SceneSpec};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn corners(b: &Box7) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| [b.cx + c * x - s * y, b.cy + s * x + c * y])
}

/// Horizontal extent of a convex polygon at height `y`.
fn scan(poly: &[[f64; 2]; 4], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..4 {
        let (a, b) = (poly[k], poly[(k + 1) % 4]);
        if (a[1] - y) * (b[1] - y) > 0.0 || a[1] == b[1] {
            continue;
        }
        let x = a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Cell centers `x0 + (k + ½)·d`, `k < n`, inside `[a, b]`.
fn centers_in(a: f64, b: f64, x0: f64, d: f64, n: usize) -> i64 {
    let first = ((a - x0) / d - 0.5).ceil().max(0.0) as i64;
    let last = ((b - x0) / d - 0.5).floor().min(n as f64 - 1.0) as i64;
    (last - first + 1).max(0)
}

/// IoU by counting cell centers of an `n × n` raster over the pair's extent.
fn raster_iou(a: &Box7, b: &Box7, n: usize) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let all = pa.iter().chain(pb.iter());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut union) = (0i64, 0i64);
    for r in 0..n {
        let y = y0 + (r as f64 + 0.5) * dy;
        let sa = scan(&pa, y);
        let sb = scan(&pb, y);
        let ca = sa.map_or(0, |(l, h)| centers_in(l, h, x0, dx, n));
        let cb = sb.map_or(0, |(l, h)| centers_in(l, h, x0, dx, n));
        let ci = match (sa, sb) {
            (Some(a), Some(b)) => centers_in(a.0.max(b.0), a.1.min(b.1), x0, dx, n),
            _ => 0,
        };
        inter += ci;
        union += ca + cb - ci;
    }
    inter as f64 / union as f64
}

fn random_box(r: &mut ChaCha8Rng, near: [f64; 2], spread: f64, yaw: Option<f64>) -> Box7 {
    let yaw = yaw.unwrap_or_else(|| r.gen_range(-PI..PI));
    Box7::new(
        [near[0] + r.gen_range(-spread..spread), near[1] + r.gen_range(-spread..spread), 1.0],
        [r.gen_range(0.5..3.0), r.gen_range(0.5..6.0), 2.0],
        yaw,
    )
    .unwrap()
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for _ in 0..500 {
        let a = random_box(&mut r, [0.0, 0.0], 1.0, None);
        let b = random_box(&mut r, [a.cx, a.cy], 2.5, None);
        let iou = rotated_iou_bev(&a, &b).map_err(|e| e.to_string())?;
        let oracle = raster_iou(&a, &b, 2048);
        overlapping += (oracle > 0.0) as usize;
        worst = worst.max((iou - oracle).abs());
    }
    ensure!(worst <= 5e-3, "raster disagreement {worst:.2e} > 5e-3");
    ensure!(overlapping >= 250, "only {overlapping} overlapping pairs exercised");

    let mut worst_aa = 0.0f64;
    let quarter = [0.0, FRAC_PI_2, PI, -FRAC_PI_2];
    for _ in 0..200 {
        let (qa, qb) = (quarter[r.gen_range(0..4)], quarter[r.gen_range(0..4)]);
        let a = random_box(&mut r, [0.0, 0.0], 1.0, Some(qa));
        let b = random_box(&mut r, [a.cx, a.cy], 2.5, Some(qb));
        let ext = |b: &Box7| {
            let turned = (b.yaw.abs() - FRAC_PI_2).abs() < 1e-9;
            let (hx, hy) = if turned { (b.width / 2.0, b.length / 2.0) } else { (b.length / 2.0, b.width / 2.0) };
            [b.cx - hx, b.cx + hx, b.cy - hy, b.cy + hy]
        };
        let (ea, eb) = (ext(&a), ext(&b));
        let ix = (ea[1].min(eb[1]) - ea[0].max(eb[0])).max(0.0);
        let iy = (ea[3].min(eb[3]) - ea[2].max(eb[2])).max(0.0);
        let inter = ix * iy;
        let expected = inter / (a.bev_area() + b.bev_area() - inter);
        let iou = rotated_iou_bev(&a, &b).map_err(|e| e.to_string())?;
        worst_aa = worst_aa.max((iou - expected).abs());
    }
    ensure!(worst_aa <= 1e-9, "axis-aligned disagreement {worst_aa:.2e} > 1e-9");
    Ok(format!("max |Δ| raster {worst:.1e}, axis-aligned {worst_aa:.1e}, {overlapping}/500 overlapping"))
}

fn grid(class: ObjectClass, yaws: Vec<f64>) -> AnchorGridSpec {
    AnchorGridSpec {
        x_range: [-12.0, 12.0],
        y_range: [-12.0, 12.0],
        cell_size: 0.2,
        classes: vec![AnchorClassSpec::default_for(class)],
        yaws,
    }
}

fn label(id: u64, class: ObjectClass, b: Box7) -> Label {
    Label { object_id: id, class, bbox: b, pair_id: None }
}

fn criterion_2() -> Outcome {
    let car = label(0, ObjectClass::Car, Box7::new([0.1, 0.1, 0.8], [1.9, 4.5, 1.6], FRAC_PI_4).unwrap());
    let baseline_grid =
        generate_anchor_grid(&grid(ObjectClass::Car, AnchorGridSpec::baseline_yaws())).map_err(|e| e.to_string())?;
    let base = assign_baseline_iou(&baseline_grid, &[car], &BaselineConfig::default()).map_err(|e| e.to_string())?;
    ensure!(base.foreground_count() == 1, "baseline foreground {} != 1", base.foreground_count());
    ensure!(base.fallback == vec![0], "baseline foreground is not the fallback anchor");

    let one_yaw = generate_anchor_grid(&grid(ObjectClass::Car, vec![0.0])).map_err(|e| e.to_string())?;
    let params = ShapeEllipseParams::default();
    let adaptive = assign_adaptive_shape(&one_yaw, &[car], &params).map_err(|e| e.to_string())?;
    ensure!(adaptive.foreground_count() >= 5, "adaptive foreground {} < 5", adaptive.foreground_count());

    let (cx, cy, yaw) = (0.37, -0.21, 0.3);
    let truck = label(0, ObjectClass::Truck, Box7::new([cx, cy, 1.75], [2.5, 16.0, 3.5], yaw).unwrap());
    let truck_grid = generate_anchor_grid(&grid(ObjectClass::Truck, vec![0.0])).map_err(|e| e.to_string())?;
    let set = assign_adaptive_shape(&truck_grid, &[truck], &params).map_err(|e| e.to_string())?;
    // ellipse membership via the inverse covariance matrix
    let (a, b) = (params.positive_scale * 16.0, params.positive_scale * 2.5);
    let (s, c) = f64::sin_cos(yaw);
    let inv = [
        [c * c / (a * a) + s * s / (b * b), c * s * (1.0 / (a * a) - 1.0 / (b * b))],
        [c * s * (1.0 / (a * a) - 1.0 / (b * b)), s * s / (a * a) + c * c / (b * b)],
    ];
    let mut oracle = 0;
    for j in 0..120 {
        for i in 0..120 {
            let dx = -12.0 + (i as f64 + 0.5) * 0.2 - cx;
            let dy = -12.0 + (j as f64 + 0.5) * 0.2 - cy;
            let m = dx * dx * inv[0][0] + 2.0 * dx * dy * inv[0][1] + dy * dy * inv[1][1];
            oracle += (m <= 1.0) as usize;
        }
    }
    ensure!(set.foreground_count() == oracle, "truck foreground {} != oracle {oracle}", set.foreground_count());
    Ok(format!("car π/4: baseline 1, adaptive {}; 16 m truck: {} = oracle", adaptive.foreground_count(), oracle))
}

fn heat_spec(scale: f64) -> HeatmapSpec {
    HeatmapSpec {
        width: 300,
        height: 300,
        origin: [-30.0, -30.0],
        cell_size: 0.2,
        classes: ObjectClass::ALL.to_vec(),
        gaussian_scale: scale,
        mode: HeatmapMode::Correlated,
        min_sigma: HeatmapSpec::DEFAULT_MIN_SIGMA,
    }
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let spec = heat_spec(1.0 / 8.0);

    // (a) equal length and width collapses to the isotropic baseline
    let mut worst_a = 0.0f64;
    for _ in 0..20 {
        let side = r.gen_range(0.5..4.0);
        let b =
            Box7::new([r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), 1.0], [side, side, 1.5], r.gen_range(-PI..PI))
                .unwrap();
        let mut corr = Raster::zeros(spec.width, spec.height);
        let mut base = Raster::zeros(spec.width, spec.height);
        render_correlated_gaussian(&b, &spec, &mut corr);
        render_uncorrelated_baseline(&b, &spec, &mut base);
        for (x, y) in corr.data.iter().zip(&base.data) {
            worst_a = worst_a.max((x - y).abs());
        }
    }
    ensure!(worst_a <= 1e-12, "(a) l = w deviates by {worst_a:.2e}");

    // (b) per-cell values against the closed form
    let mut worst_b = 0.0f64;
    let floor = spec.min_sigma * spec.cell_size;
    for _ in 0..100 {
        let b = Box7::new(
            [r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0), 1.0],
            [r.gen_range(0.4..3.0), r.gen_range(0.4..16.0), 2.0],
            r.gen_range(-PI..PI),
        )
        .unwrap();
        let mut ras = Raster::zeros(spec.width, spec.height);
        render_correlated_gaussian(&b, &spec, &mut ras);
        let (sl, sw) = ((spec.gaussian_scale * b.length).max(floor), (spec.gaussian_scale * b.width).max(floor));
        let (s, c) = b.yaw.sin_cos();
        let cov = [
            [c * c * sl * sl + s * s * sw * sw, c * s * (sl * sl - sw * sw)],
            [0.0, s * s * sl * sl + c * c * sw * sw],
        ];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
        for j in 0..spec.height {
            for i in 0..spec.width {
                let dx = spec.origin[0] + (i as f64 + 0.5) * spec.cell_size - b.cx;
                let dy = spec.origin[1] + (j as f64 + 0.5) * spec.cell_size - b.cy;
                let m2 = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
                let got = ras.get(i, j);
                let r2 = TRUNCATION_RADIUS * TRUNCATION_RADIUS;
                if (m2 - r2).abs() < 1e-9 {
                    continue;
                }
                let want = if m2 <= r2 { (-0.5 * m2).exp() } else { 0.0 };
                worst_b = worst_b.max((got - want).abs());
            }
        }
    }
    ensure!(worst_b <= 1e-12, "(b) formula deviation {worst_b:.2e}");

    // (c) mass grows with the scale once sigmas exceed the floor
    let mut checked = 0;
    for _ in 0..20 {
        let b = Box7::new([0.3, -0.7, 1.0], [r.gen_range(1.5..3.0), r.gen_range(4.0..16.0), 2.0], r.gen_range(-PI..PI))
            .unwrap();
        let masses: Vec<f64> = [1.0 / 12.0, 1.0 / 8.0, 1.0 / 6.0]
            .iter()
            .map(|s| {
                let sp = heat_spec(*s);
                let mut ras = Raster::zeros(sp.width, sp.height);
                render_correlated_gaussian(&b, &sp, &mut ras);
                ras.mass()
            })
            .collect();
        ensure!(masses[0] < masses[1] && masses[1] < masses[2], "(c) masses not increasing: {masses:?}");
        checked += 1;
    }
    Ok(format!("(a) {worst_a:.1e} (b) {worst_b:.1e} (c) {checked} boxes increasing"))
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let spec = heat_spec(1.0 / 8.0);
    let dims = [[1.9, 4.5, 1.6], [2.5, 6.5, 3.4], [2.5, 13.0, 3.9], [0.6, 0.6, 1.75], [0.7, 1.8, 1.7]];
    let mut labels: Vec<Label> = Vec::new();
    while labels.len() < 50 {
        let k = r.gen_range(0..5);
        let d = dims[k].map(|v| v * r.gen_range(0.9..1.1));
        let b = Box7::new([r.gen_range(-27.0..27.0), r.gen_range(-27.0..27.0), d[2] / 2.0], d, r.gen_range(-PI..PI))
            .unwrap();
        if labels.iter().all(|l| rotated_iou_bev(&l.bbox, &b).unwrap() == 0.0) {
            labels.push(label(labels.len() as u64, ObjectClass::ALL[k], b));
        }
    }
    let (hm, issues) = render_frame(&labels, &spec).map_err(|e| e.to_string())?;
    ensure!(issues.is_empty(), "render issues: {issues:?}");
    let peaks = extract_peaks(&hm, 0.5, 3);
    ensure!(peaks.len() == 50, "{} peaks extracted", peaks.len());
    let half = spec.cell_size / 2.0;
    let mut worst = 0.0f64;
    for l in &labels {
        let hit = peaks.iter().find(|p| {
            p.class == l.class && (p.bbox.cx - l.bbox.cx).abs() <= half && (p.bbox.cy - l.bbox.cy).abs() <= half
        });
        let Some(p) = hit else { return Err(format!("object {} not recovered", l.object_id)) };
        ensure!(
            p.bbox.size() == l.bbox.size(),
            "object {} dims {:?} != {:?}",
            l.object_id,
            p.bbox.size(),
            l.bbox.size()
        );
        worst = worst.max((p.bbox.cx - l.bbox.cx).abs().max((p.bbox.cy - l.bbox.cy).abs()));
    }
    Ok(format!("50/50 recovered, max center error {worst:.1e} m, dims exact"))
}

fn criterion_5() -> Outcome {
    let mut r = rng(5);
    let cam = CameraModel::forward_looking(1000.0, 1000.0, (1920.0, 1080.0), [1.5, 0.0, 1.6], 0.0, 0.0);
    let mut cloud = PointCloud::default();
    for _ in 0..2000 {
        cloud.push(&[r.gen_range(3.0..40.0), r.gen_range(-20.0..20.0), r.gen_range(0.0..3.0), 0.5, 0.0, 0.0, 0.0]);
    }
    let frame = PointCloudFrame { frame_id: 0, timestamp: 0.0, ego_pose: None, cloud };
    let dets: Vec<Detection2D> = (0..12)
        .map(|k| {
            let (u, v) = (r.gen_range(0.0..1800.0), r.gen_range(0.0..1000.0));
            Detection2D {
                u_min: u,
                v_min: v,
                u_max: u + r.gen_range(10.0..300.0),
                v_max: v + r.gen_range(10.0..300.0),
                group: if k % 2 == 0 { CategoryGroup::Vru } else { CategoryGroup::Vehicle },
                confidence: 0.9,
                depth: None,
            }
        })
        .collect();
    let config = FusionConfig::default();
    let base = annotate_frame(&frame, std::slice::from_ref(&cam), std::slice::from_ref(&dets), &config).map_err(|e| e.to_string())?;
    let mut worst_scale = 0.0f64;
    for k in [0.5, 2.0, 0.37] {
        let scaled: Vec<Detection2D> = dets.iter().map(|d| d.scaled(k)).collect();
        let out = annotate_frame(&frame, &[cam.scaled(k)], &[scaled], &config).map_err(|e| e.to_string())?;
        for g in CategoryGroup::ALL {
            for (a, b) in base.group(g).iter().zip(out.group(g)) {
                worst_scale = worst_scale.max((a - b).abs());
            }
        }
    }
    ensure!(worst_scale <= 1e-9, "scaling changed distances by {worst_scale:.2e}");

    let mut violations = 0;
    for _ in 0..1000 {
        let (u0, v0) = (r.gen_range(0.0..1500.0), r.gen_range(0.0..800.0));
        let d = Detection2D {
            u_min: u0,
            v_min: v0,
            u_max: u0 + r.gen_range(5.0..400.0),
            v_max: v0 + r.gen_range(5.0..250.0),
            group: CategoryGroup::Vehicle,
            confidence: 1.0,
            depth: None,
        };
        let (u, v) = (r.gen_range(0.0..1920.0), r.gen_range(0.0..1080.0));
        let eps = r.gen_range(0.0..20.0);
        let dir = r.gen_range(-PI..PI);
        let moved = d.shifted(eps * dir.cos(), eps * dir.sin());
        let (w, h) = d.size();
        let change = (DistanceNorm::Elliptic.evaluate(u, v, &moved) - DistanceNorm::Elliptic.evaluate(u, v, &d)).abs();
        if change > 2.0 * eps / w.min(h) + 1e-12 {
            violations += 1;
        }
    }
    ensure!(violations == 0, "{violations} shift-bound violations");

    let d = Detection2D {
        u_min: 100.0,
        v_min: 50.0,
        u_max: 300.0,
        v_max: 130.0,
        group: CategoryGroup::Vru,
        confidence: 1.0,
        depth: None,
    };
    let mids = [(300.0, 90.0), (100.0, 90.0), (200.0, 50.0), (200.0, 130.0)];
    for (u, v) in mids {
        let dist = DistanceNorm::Elliptic.evaluate(u, v, &d);
        ensure!(dist == 1.0, "edge midpoint ({u}, {v}) gives {dist}");
    }
    Ok(format!("scaling Δ {worst_scale:.1e}, 0/1000 bound violations, midpoints exactly 1"))
}

fn random_grid(r: &mut ChaCha8Rng, spec: &BevGridSpec, channels: usize) -> BevGrid {
    let mut g = BevGrid::zeros(2, spec, channels, 1);
    for v in &mut g.data {
        *v = r.gen_range(-1.0..1.0);
    }
    g
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let spec = BevGridSpec { origin: [-20.0, -20.0], cell_size: 0.5, size_x: 80, size_y: 80 };

    let grids: Vec<BevGrid> = (0..4).map(|_| random_grid(&mut r, &spec, 5)).collect();
    let stacked = stack(&grids).map_err(|e| e.to_string())?;
    let back = unstack(&stacked, 4).map_err(|e| e.to_string())?;
    ensure!(back == grids, "unstack(stack(g)) differs");
    ensure!(stack(&back).map_err(|e| e.to_string())? == stacked, "stack(unstack(s)) differs");

    // single frame against a hand-written encode and scatter
    let mut cloud = PointCloud::new(vec![Column::X, Column::Y, Column::Z, Column::Intensity]);
    for _ in 0..3000 {
        cloud.push(&[r.gen_range(-22.0..22.0), r.gen_range(-22.0..22.0), r.gen_range(0.0..2.0), r.gen_range(0.0..1.0)]);
    }
    let tensor = pillarize(&[cloud], &spec, 16).map_err(|e| e.to_string())?;
    let out = encode_and_stack(&tensor, &MeanEncoder).map_err(|e| e.to_string())?;
    let f1 = MeanEncoder.output_features(tensor.features);
    let mut manual = BevGrid::zeros(1, &spec, f1, 1);
    for p in 0..tensor.max_pillars {
        let Some((i, j)) = tensor.pillar_coord(0, p) else { continue };
        let count = tensor.counts[p];
        if count == 0 || !spec.in_extent(i, j) {
            continue;
        }
        let mut enc = vec![0.0; f1];
        MeanEncoder.encode(tensor.pillar_points(0, p), count, tensor.features, &mut enc);
        let base = manual.index(0, i as usize, j as usize, 0);
        manual.data[base..base + f1].copy_from_slice(&enc);
    }
    ensure!(out.grid.data == manual.data, "single-frame stack differs from plain encode-scatter");

    // static world seen from a moving ego
    let world: Vec<[f64; 3]> =
        (0..1500).map(|_| [r.gen_range(-15.0..25.0), r.gen_range(-15.0..15.0), r.gen_range(0.0..2.0)]).collect();
    let poses = [Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.5, 0.4, 0.05), Pose2::new(3.1, 0.9, 0.11)];
    let frames: Vec<PointCloudFrame> = poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let inv = pose.inverse();
            let pts = world.iter().map(|p| {
                let (x, y) = inv.apply(p[0], p[1]);
                [x, y, p[2]]
            });
            PointCloudFrame {
                frame_id: k as u64,
                timestamp: k as f64 * 0.5,
                ego_pose: Some(*pose),
                cloud: PointCloud::from_xyz(pts),
            }
        })
        .collect();
    let seq = compensate_and_merge(&frames).map_err(|e| e.to_string())?;
    let tensor = pillarize(&seq.frames, &spec, 32).map_err(|e| e.to_string())?;
    let out = encode_and_stack(&tensor, &MeanEncoder).map_err(|e| e.to_string())?;
    // cells with a point within 1e-6 m of a cell border may legitimately flip
    let reference = poses[2].inverse();
    let mut tolerant = std::collections::BTreeSet::new();
    for p in &world {
        let (x, y) = reference.apply(p[0], p[1]);
        let fx = (x - spec.origin[0]) / spec.cell_size;
        let fy = (y - spec.origin[1]) / spec.cell_size;
        let near = |f: f64| (f - f.round()).abs() * spec.cell_size < 1e-6;
        if near(fx) || near(fy) {
            for di in -1..=1 {
                for dj in -1..=1 {
                    tolerant.insert((fx.floor() as i64 + di, fy.floor() as i64 + dj));
                }
            }
        }
    }
    let strip = |cells: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
        cells.into_iter().filter(|(i, j)| !tolerant.contains(&(*i as i64, *j as i64))).collect()
    };
    let blocks: Vec<Vec<(usize, usize)>> = (0..3).map(|t| strip(out.grid.occupied_cells(0, t))).collect();
    ensure!(blocks[0] == blocks[2] && blocks[1] == blocks[2], "occupied cells differ across frame blocks");
    Ok(format!(
        "round trip bit-exact, N=1 equal, {} occupied cells identical in 3 blocks ({} tolerant)",
        blocks[2].len(),
        tolerant.len()
    ))
}

fn yard(seed: u64, trucks: usize) -> Vec<LabeledFrame> {
    let mut spec = SceneSpec { seed, ..Default::default() };
    spec.counts =
        [(ObjectClass::Truck, trucks), (ObjectClass::Car, 2), (ObjectClass::Pedestrian, 2)].into_iter().collect();
    spec.camera = None;
    generate_scene(&spec).expect("valid scene").frames
}

fn criterion_7() -> Outcome {
    let source = yard(70, 3);
    let (db, _) = build_database(&source, &[], &BuildConfig::default()).map_err(|e| e.to_string())?;
    ensure!(db.entries.iter().filter(|e| e.pair.is_some()).count() >= 2, "database holds no pairs");
    let target = yard(71, 1);
    let config = AugmentConfig {
        samples_per_class: [(ObjectClass::Truck, 2), (ObjectClass::Trailer, 1), (ObjectClass::Car, 1)]
            .into_iter()
            .collect(),
        collision_iou: 0.0,
        region: PlacementRegion { x_range: [-60.0, 60.0], y_range: [-60.0, 60.0] },
        max_retries: 20,
        placement: PlacementMode::Random,
        fading_epoch: None,
        seed: 0,
    };
    let (mut pair_pastes, mut pastes, mut worst_rel, mut worst_iou, mut run) = (0usize, 0usize, 0.0f64, 0.0f64, 0u64);
    while pair_pastes < 1000 {
        let mut scene = target.clone();
        let out = sample_and_paste(&mut scene, &db, &config, &mut frame_rng(run, 2)).map_err(|e| e.to_string())?;
        run += 1;
        pastes += out.added.len();
        for a in &out.added {
            let Some(pid) = a.partner else { continue };
            if a.object_id > pid {
                continue;
            }
            let b = out.added.iter().find(|x| x.object_id == pid).ok_or("partner missing from pasted set")?;
            let stored = db.entries[a.entry].pair.ok_or("pasted partner without stored link")?.relative_pose;
            worst_rel = worst_rel.max(a.bbox.pose().relative_to(&b.bbox.pose()).max_abs_diff(&stored));
            pair_pastes += 1;
        }
        worst_iou = worst_iou.max(max_non_partner_overlap(&scene.last().unwrap().labels, &out.added));
    }
    ensure!(worst_rel <= 1e-9, "relative pose error {worst_rel:.2e}");
    ensure!(worst_iou == 0.0, "non-partner overlap {worst_iou}");
    Ok(format!("{pair_pastes} pair pastes ({pastes} objects, {run} frames), rel. pose err {worst_rel:.1e}, overlap 0"))
}

fn inside(b: &Box7, p: [f64; 3]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    (c * dx + s * dy).abs() <= b.length / 2.0
        && (-s * dx + c * dy).abs() <= b.width / 2.0
        && (p[2] - b.cz).abs() <= b.height / 2.0
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let ego = Pose2::new(0.0, 0.0, 0.0);
    let yaw = 0.4f64;
    let boxes: Vec<Box7> = (0..3)
        .map(|k| {
            Box7::new([10.0 + 2.0 * k as f64 * yaw.cos(), 2.0 + 2.0 * k as f64 * yaw.sin(), 1.5], [2.5, 7.0, 3.0], yaw)
                .unwrap()
        })
        .collect();
    let frames: Vec<LabeledFrame> = (0..3)
        .map(|k| {
            let mut cloud = PointCloud::default();
            // surface-ish samples of the box at this step plus clutter
            for _ in 0..600 {
                let (lx, ly) = (r.gen_range(-3.5..3.5), r.gen_range(-1.25..1.25));
                let (x, y) = boxes[k].pose().apply(lx, ly);
                cloud.push(&[x, y, r.gen_range(0.0..3.0), 0.5, 0.0, 0.0, 0.0]);
            }
            for _ in 0..300 {
                cloud.push(&[
                    r.gen_range(0.0..25.0),
                    r.gen_range(-8.0..12.0),
                    r.gen_range(0.0..3.0),
                    0.1,
                    0.0,
                    0.0,
                    0.0,
                ]);
            }
            LabeledFrame {
                frame: PointCloudFrame { frame_id: k as u64, timestamp: 0.5 * k as f64, ego_pose: Some(ego), cloud },
                labels: vec![label(9, ObjectClass::Truck, boxes[k])],
            }
        })
        .collect();
    let aware = build_database(&frames, &[], &BuildConfig::default()).map_err(|e| e.to_string())?.0;
    let naive_cfg = BuildConfig { crop: CropMode::CurrentBoxOnly, ..Default::default() };
    let naive = build_database(&frames, &[], &naive_cfg).map_err(|e| e.to_string())?.0;
    let mut report = Vec::new();
    for age in 0..3 {
        let f = 2 - age;
        let oracle = frames[f].frame.cloud.xyz_iter().filter(|p| inside(&boxes[f], *p)).count();
        let (a, n) = (aware.entries[0].point_count(age), naive.entries[0].point_count(age));
        ensure!(a == oracle, "age {age}: history-aware kept {a} of {oracle}");
        if age > 0 {
            ensure!(n < oracle, "age {age}: naive kept {n}, not fewer than {oracle}");
        }
        report.push(format!("t-{age}: {a}/{oracle} vs naive {n}"));
    }
    Ok(report.join(", "))
}

/// Stream TP FP TP FP TP FP over four cars, one never found. Interpolated
/// precision is 1 on recall 0.10..0.25 (16 points), 2/3 on 0.26..0.50 (25),
/// 0.6 on 0.51..0.75 (25) and 0 above (25): (16 + 50/3 + 15) / 91 = 11/21.
const GOLDEN_AP: f64 = 11.0 / 21.0;

fn bx(x: f64, y: f64, w: f64, l: f64) -> Box7 {
    Box7::new([x, y, 1.0], [w, l, 2.0], 0.0).unwrap()
}

fn criterion_9() -> Outcome {
    let config = EvalConfig::default();
    let cars: Vec<Label> =
        (0..4).map(|k| label(k, ObjectClass::Car, bx(10.0 * k as f64 + 5.0, 0.0, 1.9, 4.5))).collect();
    let det = |b: Box7, s: f64| Detection { class: ObjectClass::Car, bbox: b, score: s };
    let golden = EvalFrame {
        gt: cars.clone(),
        detections: vec![
            det(cars[0].bbox, 0.9),
            det(bx(50.0, 50.0, 1.9, 4.5), 0.8),
            det(cars[1].bbox, 0.7),
            det(cars[0].bbox, 0.6),
            det(cars[2].bbox, 0.5),
            det(bx(60.0, 40.0, 1.9, 4.5), 0.4),
        ],
        ..Default::default()
    };
    let report = evaluate(std::slice::from_ref(&golden), &config).map_err(|e| e.to_string())?;
    let ap = report.ap(ObjectClass::Car).ok_or("car AP absent")?;
    ensure!((ap - GOLDEN_AP).abs() <= 1e-12, "golden AP {ap} != {GOLDEN_AP}");

    let cross_cfg = EvalConfig { thresholds: vec![2.0], ..EvalConfig::default() };
    let cross = EvalFrame {
        gt: vec![label(1, ObjectClass::Truck, bx(12.0, 3.0, 2.5, 9.0))],
        detections: vec![Detection { class: ObjectClass::Car, bbox: bx(12.5, 3.0, 1.9, 4.5), score: 0.8 }],
        ..Default::default()
    };
    let r = evaluate(&[cross], &cross_cfg).map_err(|e| e.to_string())?;
    let truck = r.classes.iter().find(|c| c.class == ObjectClass::Truck).unwrap();
    ensure!(truck.counts[0].tp == 1 && truck.ap == Some(1.0), "cross-class truck case: {:?}", truck.counts);

    let zone = NoLabelZone { bbox: bx(80.0, -20.0, 6.0, 6.0), origin: ZoneOrigin::Manual };
    let mut zoned = golden.clone();
    zoned.zones.push(zone);
    let before = evaluate(&[zoned.clone()], &config).map_err(|e| e.to_string())?;
    zoned.detections.push(Detection { class: ObjectClass::Car, bbox: bx(80.5, -20.0, 1.9, 4.5), score: 0.95 });
    let after = evaluate(&[zoned], &config).map_err(|e| e.to_string())?;
    for (a, b) in before.classes.iter().zip(&after.classes) {
        ensure!(a.ap == b.ap, "in-zone detection changed {} AP", a.class);
    }

    let mut low = golden.clone();
    low.gt_points = Some(vec![4, 50, 50, 50]);
    let r = evaluate(&[low], &config).map_err(|e| e.to_string())?;
    let zoned_gt = r.ignored.iter().filter(|i| i.reason == IgnoreReason::LowPoints && i.index == 0).count();
    ensure!(zoned_gt == 1, "GT with 4 points was not converted to a zone");
    Ok(format!("golden AP {ap:.6} = 11/21, cross-class TP, zone-invariant, 4-point GT zoned"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_shape-targets")
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).env_remove("SHAPE_TARGETS_CONFIG").output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn pipeline(root: &Path, jobs: &str) -> Result<f64, String> {
    let p = |name: &str| root.join(name).display().to_string();
    let _ = std::fs::remove_dir_all(root);
    run_cli(&["gen-scene", "--output", &p("scene"), "--seed", "11", "--jobs", jobs])?;
    run_cli(&["build-gtdb", "--input", &p("scene"), "--output", &p("gtdb"), "--jobs", jobs])?;
    run_cli(&[
        "augment",
        "--input",
        &p("scene"),
        "--gtdb",
        &p("gtdb"),
        "--output",
        &p("aug"),
        "--seed",
        "11",
        "--jobs",
        jobs,
    ])?;
    run_cli(&["targets-anchor", "--input", &p("aug"), "--output", &p("anchors"), "--jobs", jobs])?;
    run_cli(&["targets-heatmap", "--input", &p("aug"), "--output", &p("heatmap"), "--jobs", jobs])?;
    run_cli(&["fuse-camera", "--input", &p("aug"), "--output", &p("fused"), "--jobs", jobs])?;
    run_cli(&["stack-temporal", "--input", &p("fused"), "--output", &p("stack.bin"), "--jobs", jobs])?;
    run_cli(&[
        "evaluate",
        "--input",
        &p("scene"),
        "--output",
        &p("report.json"),
        "--csv",
        &p("pr.csv"),
        "--jobs",
        jobs,
    ])?;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    report["map"].as_f64().ok_or_else(|| "report has no mAP".into())
}

fn criterion_10() -> Outcome {
    let base: PathBuf = std::env::temp_dir().join(format!("shape-targets-acceptance-{}", std::process::id()));
    let (a, b) = (base.join("a"), base.join("b"));
    let map_a = pipeline(&a, "1")?;
    let map_b = pipeline(&b, "4")?;
    ensure!(map_a == 1.0 && map_b == 1.0, "mAP {map_a} / {map_b}, expected 1.0");
    let files = list_files(&a).map_err(|e| e.to_string())?;
    ensure!(files == list_files(&b).map_err(|e| e.to_string())?, "runs produced different file sets");
    for f in &files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ensure!(x == y, "{} differs between runs", f.display());
    }
    let scene = shape_targets_cli::formats::Dataset::load(&a.join("scene")).map_err(|e| e.to_string())?;
    let labels = &scene.frames.last().unwrap().labels;
    ensure!(scene.frames.len() == 3, "expected 3 frames");
    ensure!(labels.iter().any(|l| l.class == ObjectClass::Trailer && l.pair_id.is_some()), "no articulated trailer");
    ensure!(labels.iter().any(|l| l.class == ObjectClass::Pedestrian), "no pedestrian");
    let _ = std::fs::remove_dir_all(&base);
    Ok(format!("mAP 1.0, {} files byte-identical across runs", files.len()))
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "rotated IoU oracle equivalence", budget: Duration::from_secs(30), run: criterion_1 },
        Criterion { id: 2, name: "assignment contrast", budget: Duration::from_secs(5), run: criterion_2 },
        Criterion { id: 3, name: "correlated Gaussian correctness", budget: Duration::from_secs(30), run: criterion_3 },
        Criterion { id: 4, name: "heatmap round trip", budget: Duration::from_secs(10), run: criterion_4 },
        Criterion { id: 5, name: "distance fusion invariances", budget: Duration::from_secs(10), run: criterion_5 },
        Criterion { id: 6, name: "temporal layout contract", budget: Duration::from_secs(10), run: criterion_6 },
        Criterion { id: 7, name: "pair-preserving paste geometry", budget: Duration::from_secs(60), run: criterion_7 },
        Criterion { id: 8, name: "history-aware cropping", budget: Duration::from_secs(5), run: criterion_8 },
        Criterion { id: 9, name: "adapted metric rules", budget: Duration::from_secs(5), run: criterion_9 },
        Criterion { id: 10, name: "end-to-end smoke", budget: Duration::from_secs(120), run: criterion_10 },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || *f == c.id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("over budget ({detail})")),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        failed += result.is_err() as usize;
        println!(
            "[{tag}] criterion {:>2}: {:<32} {:>7.2}s / {:>3}s  {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
