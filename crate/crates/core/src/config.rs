//! JSON run configuration. Every key has a default, unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{InsertionStrategy, SiteKind};
use crate::dpp::{DpLayerPosition, DEFAULT_TAU};
use crate::sfc::CurveKind;
use crate::sng::Grouping;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    /// Serialized-patch attention window.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Grid coarsening factor applied when leaving this stage.
    #[serde(default = "default_pool")]
    pub pool: usize,
    /// Group count of PEFT grouping in this stage.
    pub groups: usize,
}

fn default_patch() -> usize {
    16
}

fn default_pool() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Cell edge in meters of the finest grid; stage `i` works on cells of
    /// `grid_size * prod(pool_j, j < i)`.
    pub grid_size: f64,
    /// Curve order at the first stage, reduced by `log2(pool)` per stage.
    pub order_bits: u32,
    pub ffn_ratio: usize,
    /// Orders used by the attention blocks, cycled block by block.
    pub attn_curves: Vec<CurveKind>,
    pub stages: Vec<StageSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: crate::data::FEATURE_DIM,
            num_classes: crate::data::CLASS_NAMES.len(),
            grid_size: 0.2,
            order_bits: 10,
            ffn_ratio: 4,
            attn_curves: CurveKind::MIXED.to_vec(),
            stages: vec![
                StageSpec { channels: 32, blocks: 2, patch: 16, pool: 2, groups: 32 },
                StageSpec { channels: 64, blocks: 2, patch: 16, pool: 2, groups: 16 },
                StageSpec { channels: 128, blocks: 2, patch: 16, pool: 2, groups: 8 },
            ],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.ffn_ratio == 0 {
            return bad("in_channels, num_classes and ffn_ratio must be at least 1".into());
        }
        if !(self.grid_size > 0.0 && self.grid_size.is_finite()) {
            return bad(format!("grid_size must be positive, got {}", self.grid_size));
        }
        if !(1..=crate::sfc::MAX_ORDER_BITS).contains(&self.order_bits) {
            return bad(format!("order_bits must be in 1..={}", crate::sfc::MAX_ORDER_BITS));
        }
        if self.attn_curves.is_empty() {
            return bad("attn_curves must not be empty".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.blocks == 0 || s.patch == 0 || s.groups == 0 {
                return bad(format!("stage {}: channels, blocks, patch and groups must be at least 1", i + 1));
            }
            if s.pool < 2 {
                return bad(format!("stage {}: pool factor must be at least 2", i + 1));
            }
            if i > 0 && s.channels < self.stages[i - 1].channels {
                return bad(format!("stage {}: channels must not decrease", i + 1));
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }

    /// Curve order used at stage `i` (0-based).
    pub fn stage_order_bits(&self, i: usize) -> u32 {
        let drop: u32 = self.stages[..i].iter().map(|s| (s.pool as f64).log2().round() as u32).sum();
        self.order_bits.saturating_sub(drop).max(1)
    }
}

/// How PEFT grouping chooses `m` per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// Per-stage group counts, from `backbone.stages[*].groups` or from
    /// `peft.group_count_stage1` with halving.
    #[default]
    Count,
    PointsPerGroup(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub strategy: InsertionStrategy,
    /// Whole-stage tag replacements keyed by 1-based stage number.
    pub overrides: BTreeMap<usize, Vec<SiteKind>>,
    /// Bases per stage.
    pub bases: Vec<usize>,
    /// `C_d = max(1, C / bottleneck_ratio)` unless `bottleneck` is given.
    pub bottleneck_ratio: usize,
    pub bottleneck: Option<Vec<usize>>,
    pub tau: f64,
    pub scale: f64,
    pub adapter_scale: f64,
    pub position: DpLayerPosition,
    pub grouping: GroupMode,
    /// When set, stage `i` uses `max(1, round(m1 / 2^(i-1)))` groups.
    pub group_count_stage1: Option<usize>,
    /// Curve schedule, cycled over DPP sites in network order.
    pub curves: Vec<CurveKind>,
    /// Router width `max(K, C / router_hidden_divisor)`.
    pub router_hidden_divisor: usize,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            strategy: InsertionStrategy::LastBlockPerStage,
            overrides: BTreeMap::new(),
            bases: vec![4, 4, 2],
            bottleneck_ratio: 8,
            bottleneck: None,
            tau: DEFAULT_TAU,
            scale: 1.0,
            adapter_scale: 1.0,
            position: DpLayerPosition::Down,
            grouping: GroupMode::Count,
            group_count_stage1: None,
            curves: CurveKind::MIXED.to_vec(),
            router_hidden_divisor: 2,
        }
    }
}

impl PeftConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<(), Error> {
        let n = backbone.stages.len();
        let bad = |m: String| Err(Error::Config(m));
        if self.bases.len() != n || self.bases.contains(&0) {
            return bad(format!("peft.bases needs {n} positive entries, one per stage"));
        }
        if let Some(b) = &self.bottleneck {
            if b.len() != n || b.contains(&0) {
                return bad(format!("peft.bottleneck needs {n} positive entries, one per stage"));
            }
        }
        if self.bottleneck_ratio == 0 || self.router_hidden_divisor == 0 {
            return bad("peft.bottleneck_ratio and peft.router_hidden_divisor must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("peft.tau must be positive, got {}", self.tau));
        }
        if !self.scale.is_finite() || !self.adapter_scale.is_finite() {
            return bad("peft scales must be finite".into());
        }
        if self.curves.is_empty() {
            return bad("peft.curves must not be empty".into());
        }
        if self.group_count_stage1 == Some(0) || self.grouping == GroupMode::PointsPerGroup(0) {
            return bad("group sizes must be at least 1".into());
        }
        Ok(())
    }

    pub fn bottleneck_for(&self, stage: usize, channels: usize) -> usize {
        match &self.bottleneck {
            Some(b) => b[stage],
            None => (channels / self.bottleneck_ratio).max(1),
        }
    }

    /// Grouping of stage `stage` (0-based).
    pub fn grouping_for(&self, stage: usize, backbone: &BackboneConfig) -> Grouping {
        match self.grouping {
            GroupMode::PointsPerGroup(n) => Grouping::PointsPerGroup(n),
            GroupMode::Count => Grouping::Count(match self.group_count_stage1 {
                Some(m1) => ((m1 as f64 / 2f64.powi(stage as i32)).round() as usize).max(1),
                None => backbone.stages[stage].groups,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.02, momentum: 0.9, steps: 1000, batch: 1, seed: 0, pretrain_epochs: 3, pretrain_lr: 0.02 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0 && self.lr.is_finite() && self.pretrain_lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Preset name or path to a scene spec JSON file.
    pub pretrain: String,
    pub downstream: String,
    pub pretrain_scenes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Overrides the spec's points per scene.
    pub points: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain: "pretrain-style".into(),
            downstream: "downstream-style".into(),
            pretrain_scenes: 40,
            train_scenes: 40,
            val_scenes: 16,
            points: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub pretrained: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub metrics: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            pretrained: "pretrained.ptpk".into(),
            checkpoint: "model.ptpk".into(),
            loss_log: "loss.csv".into(),
            metrics: "metrics.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.backbone.validate()?;
        self.peft.validate(&self.backbone)?;
        self.train.validate()
    }

    /// Scene spec by preset name or JSON file path, with the point override.
    pub fn scene_spec(&self, which: &str) -> Result<crate::data::SceneSpec, Error> {
        let mut spec = match crate::data::SceneSpec::preset(which) {
            Ok(s) => s,
            Err(_) => {
                let p = Path::new(which);
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Json { path: which.into(), source: e })?
            }
        };
        if let Some(n) = self.data.points {
            spec.points = n;
        }
        Ok(spec)
    }
}
