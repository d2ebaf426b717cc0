//! Point clouds, frames and object labels.

use serde::{Deserialize, Serialize};

use crate::geometry::{Box7, Pose2};

/// Semantic tag of a point column. `X`, `Y`, `Z` are always the first three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    X,
    Y,
    Z,
    Intensity,
    /// Seconds relative to the frame timestamp.
    TimeOffset,
    /// Normalized camera distance, vulnerable road users.
    FusionVru,
    /// Normalized camera distance, vehicles.
    FusionVehicle,
    CameraDepth,
    FrameIndex,
    Reserved,
}

impl Column {
    pub const ALL: [Column; 10] = [
        Column::X,
        Column::Y,
        Column::Z,
        Column::Intensity,
        Column::TimeOffset,
        Column::FusionVru,
        Column::FusionVehicle,
        Column::CameraDepth,
        Column::FrameIndex,
        Column::Reserved,
    ];

    pub fn tag(self) -> u8 {
        Column::ALL.iter().position(|c| *c == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Column> {
        Column::ALL.get(tag as usize).copied()
    }
}

/// Row-major point storage with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    columns: Vec<Column>,
    values: Vec<f64>,
}

impl Default for PointCloud {
    fn default() -> Self {
        Self::new(Self::standard_columns())
    }
}

impl PointCloud {
    /// Columns written by the generator: x, y, z, intensity, time offset and
    /// two reserved fusion slots.
    pub fn standard_columns() -> Vec<Column> {
        vec![
            Column::X,
            Column::Y,
            Column::Z,
            Column::Intensity,
            Column::TimeOffset,
            Column::FusionVru,
            Column::FusionVehicle,
        ]
    }

    /// # Panics
    /// If the first three columns are not `X, Y, Z`.
    pub fn new(columns: Vec<Column>) -> Self {
        assert!(
            columns.len() >= 3 && columns[..3] == [Column::X, Column::Y, Column::Z],
            "point clouds start with x, y, z columns"
        );
        Self { columns, values: Vec::new() }
    }

    pub fn from_xyz<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Self {
        let mut cloud = Self::new(vec![Column::X, Column::Y, Column::Z]);
        for p in points {
            cloud.values.extend_from_slice(&p);
        }
        cloud
    }

    /// Takes ownership of a row-major value buffer.
    pub fn from_values(columns: Vec<Column>, values: Vec<f64>) -> Option<Self> {
        let cloud = Self::new(columns);
        if !values.len().is_multiple_of(cloud.stride()) {
            return None;
        }
        Some(Self { values, ..cloud })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn stride(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_index(&self, column: Column) -> Option<usize> {
        self.columns.iter().position(|c| *c == column)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.values[i * s..(i + 1) * s]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.values[i * s..(i + 1) * s]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.stride())
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = self.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn xyz_iter(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.rows().map(|r| [r[0], r[1], r[2]])
    }

    /// # Panics
    /// If `row` does not match the column count.
    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.stride(), "row width mismatch");
        self.values.extend_from_slice(row);
    }

    /// Appends a row from another layout, matching columns by tag and
    /// zero-filling the ones `src_columns` lacks.
    pub fn push_mapped(&mut self, src_columns: &[Column], row: &[f64]) {
        for c in &self.columns {
            let v = src_columns.iter().position(|s| s == c).map_or(0.0, |k| row[k]);
            self.values.push(v);
        }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut out = PointCloud::new(self.columns.clone());
        for &i in indices {
            out.values.extend_from_slice(self.row(i));
        }
        out
    }

    /// Column values as a vector, if present.
    pub fn column_values(&self, column: Column) -> Option<Vec<f64>> {
        let k = self.column_index(column)?;
        Some(self.rows().map(|r| r[k]).collect())
    }

    /// Writes `values` into `column`, appending the column if missing.
    ///
    /// # Panics
    /// If `values.len() != self.len()`.
    pub fn set_column(&mut self, column: Column, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "column length mismatch");
        let k = match self.column_index(column) {
            Some(k) => k,
            None => {
                let n = self.len();
                let old = self.stride();
                let mut widened = Vec::with_capacity(n * (old + 1));
                for r in self.values.chunks_exact(old) {
                    widened.extend_from_slice(r);
                    widened.push(0.0);
                }
                self.values = widened;
                self.columns.push(column);
                old
            }
        };
        let s = self.stride();
        for (i, v) in values.iter().enumerate() {
            self.values[i * s + k] = *v;
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        if other.columns == self.columns {
            self.values.extend_from_slice(&other.values);
        } else {
            for r in other.rows() {
                self.push_mapped(&other.columns, r);
            }
        }
    }
}

/// Rotates then translates every point's (x, y); z and feature columns are untouched.
pub fn transform_points(cloud: &PointCloud, pose: &Pose2) -> PointCloud {
    let mut out = cloud.clone();
    let (s, c) = pose.theta.sin_cos();
    let stride = out.stride();
    for r in out.values.chunks_exact_mut(stride) {
        let (x, y) = (r[0], r[1]);
        r[0] = c * x - s * y + pose.tx;
        r[1] = s * x + c * y + pose.ty;
    }
    out
}

/// A timestamped sweep in ego coordinates plus the ego pose in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub ego_pose: Option<Pose2>,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    Trailer,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] =
        [ObjectClass::Car, ObjectClass::Truck, ObjectClass::Trailer, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Trailer => "trailer",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectClass::ALL.iter().copied().find(|c| c.name() == s).ok_or_else(|| format!("unknown class '{s}'"))
    }
}

/// A ground-truth object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub object_id: u64,
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub bbox: Box7,
    /// Object id of the linked partner (towing vehicle ↔ trailer).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_transform_is_bitwise() {
        let cloud = PointCloud::from_xyz([[1.25, -3.5, 0.1], [0.3, 0.7, 2.0]]);
        let out = transform_points(&cloud, &Pose2::identity());
        assert_eq!(out, cloud);
    }

    #[test]
    fn translation_and_rotation() {
        let cloud = PointCloud::from_xyz([[0.0, 0.0, 5.0]]);
        assert_eq!(transform_points(&cloud, &Pose2::new(1.0, 0.0, 0.0)).xyz(0), [1.0, 0.0, 5.0]);
        let cloud = PointCloud::from_xyz([[1.0, 0.0, 0.0]]);
        let p = transform_points(&cloud, &Pose2::new(0.0, 0.0, PI / 2.0)).xyz(0);
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn features_untouched_by_transform() {
        let mut cloud = PointCloud::new(vec![Column::X, Column::Y, Column::Z, Column::Intensity]);
        cloud.push(&[1.0, 2.0, 3.0, 0.75]);
        let out = transform_points(&cloud, &Pose2::new(4.0, 1.0, 1.0));
        assert_eq!(out.row(0)[2..], [3.0, 0.75]);
    }

    #[test]
    fn set_column_appends_missing() {
        let mut cloud = PointCloud::from_xyz([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        cloud.set_column(Column::FusionVru, &[0.5, 4.0]);
        assert_eq!(cloud.row(1), &[4.0, 5.0, 6.0, 4.0]);
        cloud.set_column(Column::FusionVru, &[1.0, 2.0]);
        assert_eq!(cloud.column_values(Column::FusionVru).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn mapped_push_zero_fills() {
        let mut cloud = PointCloud::default();
        cloud.push_mapped(&[Column::X, Column::Y, Column::Z], &[1.0, 2.0, 3.0]);
        assert_eq!(cloud.row(0), &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
