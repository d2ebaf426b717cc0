//! Training-target generation, camera distance fusion, temporal pillar
//! stacking, pair-aware ground-truth augmentation and grouped AP evaluation
//! for bird's-eye-view 3D object detection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod augment;
pub mod cloud;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod heatmap;
pub mod temporal;

pub use cloud::{Column, Label, ObjectClass, PointCloud, PointCloudFrame};
pub use geometry::{Box7, ConvexPolygon, GeometryError, Pose2};
