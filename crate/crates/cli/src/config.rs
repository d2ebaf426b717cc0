//! One declarative file holding every stage's settings. Missing sections
//! fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use shape_targets::anchors::{AnchorClassSpec, AnchorGridSpec, BaselineConfig, ShapeEllipseParams};
use shape_targets::augment::{AugmentConfig, BuildConfig, PlacementMode, PlacementRegion};
use shape_targets::eval::EvalConfig;
use shape_targets::fusion::FusionConfig;
use shape_targets::heatmap::{HeatmapMode, HeatmapSpec};
use shape_targets::temporal::BevGridSpec;
use shape_targets::ObjectClass;

use crate::error::{CliError, Result};
use crate::formats::read_json;
use crate::scene::SceneSpec;

pub const CONFIG_ENV: &str = "SHAPE_TARGETS_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    Baseline,
    CenterOnly,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorStage {
    pub grid: AnchorGridSpec,
    pub mode: AnchorMode,
    pub adaptive: ShapeEllipseParams,
    pub baseline: BaselineConfig,
}

impl Default for AnchorStage {
    fn default() -> Self {
        Self {
            grid: AnchorGridSpec {
                x_range: [0.0, 51.2],
                y_range: [-25.6, 25.6],
                cell_size: AnchorGridSpec::DEFAULT_CELL_SIZE,
                classes: [
                    ObjectClass::Car,
                    ObjectClass::Truck,
                    ObjectClass::Trailer,
                    ObjectClass::Pedestrian,
                    ObjectClass::Cyclist,
                ]
                .map(AnchorClassSpec::default_for)
                .to_vec(),
                yaws: vec![0.0],
            },
            mode: AnchorMode::Adaptive,
            adaptive: ShapeEllipseParams::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalStage {
    pub grid: BevGridSpec,
    pub max_points_per_pillar: usize,
    pub encoder: EncoderKind,
    /// Most recent frames to stack.
    pub frames: usize,
}

impl Default for TemporalStage {
    fn default() -> Self {
        Self {
            grid: BevGridSpec { origin: [0.0, -25.6], cell_size: 0.4, size_x: 128, size_y: 128 },
            max_points_per_pillar: 100,
            encoder: EncoderKind::Mean,
            frames: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    pub gtdb: BuildConfig,
    pub augment: AugmentConfig,
    pub anchors: AnchorStage,
    pub heatmap: HeatmapSpec,
    pub fusion: FusionConfig,
    pub temporal: TemporalStage,
    pub eval: EvalConfig,
}

pub fn default_augment() -> AugmentConfig {
    AugmentConfig {
        samples_per_class: [(ObjectClass::Truck, 1), (ObjectClass::Car, 2), (ObjectClass::Pedestrian, 2)]
            .into_iter()
            .collect::<BTreeMap<_, _>>(),
        collision_iou: 0.0,
        region: PlacementRegion { x_range: [5.0, 50.0], y_range: [-25.0, 25.0] },
        max_retries: 20,
        placement: PlacementMode::Random,
        fading_epoch: None,
        seed: 0,
    }
}

pub fn default_heatmap() -> HeatmapSpec {
    HeatmapSpec {
        width: 256,
        height: 256,
        origin: [0.0, -25.6],
        cell_size: 0.2,
        classes: vec![
            ObjectClass::Car,
            ObjectClass::Truck,
            ObjectClass::Trailer,
            ObjectClass::Pedestrian,
            ObjectClass::Cyclist,
        ],
        gaussian_scale: 1.0 / 8.0,
        mode: HeatmapMode::Correlated,
        min_sigma: HeatmapSpec::DEFAULT_MIN_SIGMA,
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            gtdb: BuildConfig::default(),
            augment: default_augment(),
            anchors: AnchorStage::default(),
            heatmap: default_heatmap(),
            fusion: FusionConfig::default(),
            temporal: TemporalStage::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Loads `path`, else the file named by the environment variable, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV);
        let chosen = path.map(Path::to_path_buf).or_else(|| env.map(Into::into));
        let config: Self = match chosen {
            Some(p) => read_json(&p)?,
            None => Self::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate().map_err(CliError::Config)?;
        self.augment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.anchors.grid.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.anchors.adaptive.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.heatmap.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.eval.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.gtdb.history == 0 {
            return Err(CliError::Config("gtdb.history must be >= 1".into()));
        }
        let t = &self.temporal;
        if !(t.grid.cell_size > 0.0) || t.max_points_per_pillar == 0 || t.frames == 0 {
            return Err(CliError::Config("invalid temporal stage".into()));
        }
        if !(self.fusion.d_max > 0.0) {
            return Err(CliError::Config("fusion.d_max must be positive".into()));
        }
        Ok(())
    }
}
