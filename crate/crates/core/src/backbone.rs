//! A small multi-stage point encoder with serialized-patch attention, grid
//! pooling between stages, and a per-point linear head.
//!
//! Blocks compute
//!
//! ```text
//! h   = x + Proj(Attn(LN1(x)))
//! out = h + FFN(LN2(h)) + peft(h)
//! ```
//!
//! where `peft` is a static adapter, a DPP site, or absent, per the
//! insertion plan.

use std::collections::{BTreeMap, HashMap};

use crate::adapter::{InsertionPlan, InsertionStrategy, SiteKind, StaticAdapter};
use crate::autodiff::{Parameter, ParamStore, Tape, Tensor, Var};
use crate::config::{BackboneConfig, PeftConfig};
use crate::data::PointCloud;
use crate::dpp::{DppSite, DppSiteConfig, DppTrace};
use crate::nn::{Initializer, Linear};
use crate::sfc::{self, Aabb, CurveKind};
use crate::sng::{LayerNormParams, SngSettings};
use crate::Error;

/// Fine-to-coarse assignment of one pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMap {
    /// Coarse cell of every fine point.
    pub assign: Vec<usize>,
    /// Centroid of every coarse cell.
    pub centroids: Vec<[f64; 3]>,
}

impl PoolMap {
    /// Groups points by the cell `floor((c - origin) / cell)`. Cells are
    /// numbered in lexicographic order of their integer keys, so the result
    /// does not depend on input order.
    pub fn build(coords: &[[f64; 3]], origin: [f64; 3], cell: f64) -> Result<Self, Error> {
        if coords.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Config(format!("pooling cell size must be positive, got {cell}")));
        }
        let keys: Vec<[i64; 3]> = coords
            .iter()
            .map(|c| std::array::from_fn(|a| ((c[a] - origin[a]) / cell).floor() as i64))
            .collect();
        let mut sorted: Vec<[i64; 3]> = keys.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let index: HashMap<[i64; 3], usize> = sorted.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let assign: Vec<usize> = keys.iter().map(|k| index[k]).collect();
        let mut sums = vec![[0.0; 3]; sorted.len()];
        let mut counts = vec![0usize; sorted.len()];
        for (c, &a) in coords.iter().zip(&assign) {
            for d in 0..3 {
                sums[a][d] += c[d];
            }
            counts[a] += 1;
        }
        let centroids = sums.iter().zip(&counts).map(|(s, &n)| s.map(|v| v / n as f64)).collect();
        Ok(Self { assign, centroids })
    }

    pub fn cells(&self) -> usize {
        self.centroids.len()
    }
}

/// Mean-pool features of points sharing a coarse cell.
pub fn grid_pool(
    tape: &mut Tape,
    x: Var,
    coords: &[[f64; 3]],
    origin: [f64; 3],
    cell: f64,
) -> Result<(Var, PoolMap), Error> {
    let map = PoolMap::build(coords, origin, cell)?;
    let pooled = tape.segment_mean(x, &map.assign, map.cells())?;
    Ok((pooled, map))
}

#[derive(Debug, Clone)]
pub enum Peft {
    None,
    Adapter(StaticAdapter),
    Dpp(DppSite),
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
    patch: usize,
    curve: CurveKind,
    peft: Peft,
}

#[derive(Debug, Clone)]
struct Stage {
    /// Channel change and norm after pooling into this stage.
    transition: Option<(Linear, LayerNormParams)>,
    blocks: Vec<Block>,
}

/// Whether backbone weights train (pretraining) or stay frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    pub plan: InsertionPlan,
    pub mode: BuildMode,
    pub store: ParamStore,
    embed: Linear,
    embed_norm: LayerNormParams,
    stages: Vec<Stage>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct SiteTrace {
    /// 1-based stage and block.
    pub stage: usize,
    pub block: usize,
    pub trace: DppTrace,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `N x num_classes`.
    pub logits: Var,
    pub sites: Vec<SiteTrace>,
}

pub const HEAD_PREFIX: &str = "head";

impl Model {
    /// A model with freshly initialized parameters. In `Pretrain` mode the
    /// plan is forced to linear probing and every parameter trains; in
    /// `Finetune` mode only the PEFT overlay and the head train.
    pub fn build(backbone: &BackboneConfig, peft: &PeftConfig, seed: u64, mode: BuildMode) -> Result<Self, Error> {
        backbone.validate()?;
        peft.validate(backbone)?;
        let strategy = if mode == BuildMode::Pretrain { InsertionStrategy::LinearProbe } else { peft.strategy };
        let mut plan = InsertionPlan::build(&backbone.blocks(), strategy)?;
        if mode == BuildMode::Finetune {
            plan = plan.with_overrides(&peft.overrides)?;
        }
        let init = Initializer::new(seed);
        let trainable = mode == BuildMode::Pretrain;
        let mut store = ParamStore::new();
        let c0 = backbone.stages[0].channels;
        let embed = Linear::new(&mut store, &init, "embed", backbone.in_channels, c0, true, trainable)?;
        let embed_norm = LayerNormParams::new(&mut store, "embed.norm", c0, trainable)?;

        let mut stages = Vec::with_capacity(backbone.stages.len());
        let mut global = 0;
        let mut dpp_index = 0;
        for (s, spec) in backbone.stages.iter().enumerate() {
            let c = spec.channels;
            let transition = if s == 0 {
                None
            } else {
                let p = format!("stage{}.down", s + 1);
                let prev = backbone.stages[s - 1].channels;
                Some((
                    Linear::new(&mut store, &init, &p, prev, c, true, trainable)?,
                    LayerNormParams::new(&mut store, &format!("{p}.norm"), c, trainable)?,
                ))
            };
            let mut blocks = Vec::with_capacity(spec.blocks);
            for b in 0..spec.blocks {
                let p = format!("stage{}.block{}", s + 1, b + 1);
                let hidden = c * backbone.ffn_ratio;
                let lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
                    Linear::new(store, &init, &format!("{p}.{name}"), i, o, true, trainable)
                };
                let norm1 = LayerNormParams::new(&mut store, &format!("{p}.norm1"), c, trainable)?;
                let q = lin(&mut store, "attn.q", c, c)?;
                let k = lin(&mut store, "attn.k", c, c)?;
                let v = lin(&mut store, "attn.v", c, c)?;
                let proj = lin(&mut store, "attn.proj", c, c)?;
                let norm2 = LayerNormParams::new(&mut store, &format!("{p}.norm2"), c, trainable)?;
                let fc1 = lin(&mut store, "ffn.fc1", c, hidden)?;
                let fc2 = lin(&mut store, "ffn.fc2", hidden, c)?;
                let bottleneck = peft.bottleneck_for(s, c);
                let peft_module = match plan.tags[s][b] {
                    SiteKind::None => Peft::None,
                    SiteKind::Adapter => Peft::Adapter(StaticAdapter::new(
                        &mut store,
                        &init,
                        &format!("{p}.adapter"),
                        c,
                        bottleneck,
                        peft.adapter_scale,
                    )?),
                    SiteKind::Dpp => {
                        let cfg = DppSiteConfig {
                            channels: c,
                            bottleneck,
                            bases: peft.bases[s],
                            router_hidden: DppSiteConfig::router_hidden_for(c, peft.bases[s], peft.router_hidden_divisor),
                            tau: peft.tau,
                            scale: peft.scale,
                            position: peft.position,
                            sng: SngSettings {
                                curve: peft.curves[dpp_index % peft.curves.len()],
                                order_bits: backbone.stage_order_bits(s),
                                grouping: peft.grouping_for(s, backbone),
                            },
                        };
                        dpp_index += 1;
                        Peft::Dpp(DppSite::new(&mut store, &init, &format!("{p}.dpp"), cfg)?)
                    }
                };
                blocks.push(Block {
                    norm1,
                    q,
                    k,
                    v,
                    proj,
                    norm2,
                    fc1,
                    fc2,
                    patch: spec.patch,
                    curve: backbone.attn_curves[global % backbone.attn_curves.len()],
                    peft: peft_module,
                });
                global += 1;
            }
            stages.push(Stage { transition, blocks });
        }
        let c_last = backbone.stages.last().expect("validated nonempty").channels;
        let head = Linear::new(&mut store, &init, HEAD_PREFIX, c_last, backbone.num_classes, true, true)?;
        Ok(Self { backbone: backbone.clone(), peft: peft.clone(), plan, mode, store, embed, embed_norm, stages, head })
    }

    /// PEFT module of block `block` in stage `stage`, both 1-based.
    pub fn peft_at(&self, stage: usize, block: usize) -> Option<&Peft> {
        self.stages.get(stage.checked_sub(1)?)?.blocks.get(block.checked_sub(1)?).map(|b| &b.peft)
    }

    /// The DPP site of a stage (1-based), if any; the last one wins when a
    /// stage has several.
    pub fn dpp_site(&self, stage: usize) -> Option<(usize, &DppSite)> {
        let st = self.stages.get(stage.checked_sub(1)?)?;
        st.blocks.iter().enumerate().rev().find_map(|(b, blk)| match &blk.peft {
            Peft::Dpp(site) => Some((b + 1, site)),
            _ => None,
        })
    }

    pub fn dpp_sites_mut(&mut self) -> impl Iterator<Item = &mut DppSite> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()).filter_map(|b| match &mut b.peft {
            Peft::Dpp(site) => Some(site),
            _ => None,
        })
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut StaticAdapter> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()).filter_map(|b| match &mut b.peft {
            Peft::Adapter(a) => Some(a),
            _ => None,
        })
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Whether `name` belongs to the PEFT overlay.
    pub fn is_peft(name: &str) -> bool {
        name.contains(".adapter.") || name.contains(".dpp.")
    }

    pub fn is_backbone(name: &str) -> bool {
        !Self::is_head(name) && !Self::is_peft(name)
    }

    /// Backbone parameters only, marked frozen, in registration order.
    pub fn frozen_backbone(&self) -> Vec<Parameter> {
        self.store
            .iter()
            .filter(|(_, p)| Self::is_backbone(&p.name))
            .map(|(_, p)| Parameter { name: p.name.clone(), tensor: p.tensor.clone(), trainable: false })
            .collect()
    }

    /// Copies values from `params` into the store. Every backbone parameter
    /// of the model must be present; overlay and head parameters are
    /// optional. Unknown names and shape mismatches are errors.
    pub fn load(&mut self, params: &[Parameter]) -> Result<(), Error> {
        let by_name: BTreeMap<&str, &Parameter> = params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut problems = Vec::new();
        for p in params {
            match self.store.by_name(&p.name) {
                None => problems.push(format!("{} (not in model)", p.name)),
                Some(q) if q.tensor.shape() != p.tensor.shape() => {
                    problems.push(format!("{} (shape {:?} vs {:?})", p.name, p.tensor.shape(), q.tensor.shape()))
                }
                Some(q) if q.trainable != p.trainable => problems.push(format!(
                    "{} (trainable flag {} vs {})",
                    p.name, p.trainable, q.trainable
                )),
                Some(_) => {}
            }
        }
        for (_, q) in self.store.iter() {
            if Self::is_backbone(&q.name) && !by_name.contains_key(q.name.as_str()) {
                problems.push(format!("{} (missing from checkpoint)", q.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!("checkpoint does not match model: {}", problems.join(", "))));
        }
        for p in params {
            let id = self.store.id(&p.name).expect("checked above");
            self.store.get_mut(id).tensor = p.tensor.clone();
        }
        Ok(())
    }

    /// Closed-form trainable count: every PEFT site plus the head.
    pub fn closed_form_trainable(&self) -> usize {
        let mut total = Linear::numel(self.backbone.stages.last().expect("nonempty").channels, self.backbone.num_classes, true);
        for (s, stage) in self.stages.iter().enumerate() {
            let c = self.backbone.stages[s].channels;
            for b in &stage.blocks {
                total += match &b.peft {
                    Peft::None => 0,
                    Peft::Adapter(_) => StaticAdapter::trainable_numel(c, self.peft.bottleneck_for(s, c)),
                    Peft::Dpp(site) => site.config.trainable_numel(),
                };
            }
        }
        total
    }

    /// `(trainable, frozen)` scalar counts from the registry.
    pub fn census(&self) -> (usize, usize) {
        self.store.census()
    }

    pub fn features_tensor(&self, cloud: &PointCloud) -> Result<Tensor, Error> {
        if cloud.feature_dim != self.backbone.in_channels {
            return Err(Error::Data(format!(
                "feature width {} does not match the embedding input width {}",
                cloud.feature_dim, self.backbone.in_channels
            )));
        }
        cloud.validate(None)?;
        Ok(Tensor::new(vec![cloud.len(), cloud.feature_dim], cloud.features.clone())?)
    }

    pub fn forward(&self, tape: &mut Tape, cloud: &PointCloud) -> Result<ForwardOutput, Error> {
        self.forward_with(tape, &self.store, cloud)
    }

    /// Forward pass with parameter values taken from `store`, which must
    /// share this model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, cloud: &PointCloud) -> Result<ForwardOutput, Error> {
        let feats = self.features_tensor(cloud)?;
        let input = tape.constant(feats);
        let x = self.embed.forward(tape, store, input)?;
        let mut x = self.embed_norm.forward(tape, store, x)?;
        let origin = Aabb::from_points(&cloud.coords)?.min;
        let mut coords = cloud.coords.clone();
        let mut cell = self.backbone.grid_size;
        let mut to_coarse: Vec<usize> = (0..cloud.len()).collect();
        let mut sites = Vec::new();

        for (s, stage) in self.stages.iter().enumerate() {
            if let Some((lin, norm)) = &stage.transition {
                cell *= self.backbone.stages[s - 1].pool as f64;
                let (pooled, map) = grid_pool(tape, x, &coords, origin, cell)?;
                to_coarse.iter_mut().for_each(|c| *c = map.assign[*c]);
                coords = map.centroids;
                let y = lin.forward(tape, store, pooled)?;
                x = norm.forward(tape, store, y)?;
            }
            let bits = self.backbone.stage_order_bits(s);
            for (b, block) in stage.blocks.iter().enumerate() {
                let (out, trace) = block.forward(tape, store, x, &coords, bits)?;
                x = out;
                if let Some(trace) = trace {
                    sites.push(SiteTrace { stage: s + 1, block: b + 1, trace });
                }
            }
        }
        let full = tape.gather_rows(x, &to_coarse)?;
        let logits = self.head.forward(tape, store, full)?;
        Ok(ForwardOutput { logits, sites })
    }

    /// Point coordinates seen by stage `stage` (1-based): the input points
    /// for stage 1, pooled cell centroids afterwards.
    pub fn stage_coords(&self, coords: &[[f64; 3]], stage: usize) -> Result<Vec<[f64; 3]>, Error> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::Config(format!("stage {stage} out of range 1..={}", self.stages.len())));
        }
        let origin = Aabb::from_points(coords)?.min;
        let mut coords = coords.to_vec();
        let mut cell = self.backbone.grid_size;
        for s in 1..stage {
            cell *= self.backbone.stages[s - 1].pool as f64;
            coords = PoolMap::build(&coords, origin, cell)?.centroids;
        }
        Ok(coords)
    }

    /// Grouping settings of stage `stage` (1-based): those of its DPP site,
    /// or the ones a site there would get from the configuration.
    pub fn stage_sng(&self, stage: usize) -> Result<SngSettings, Error> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::Config(format!("stage {stage} out of range 1..={}", self.stages.len())));
        }
        if let Some((_, site)) = self.dpp_site(stage) {
            return Ok(site.config.sng);
        }
        let s = stage - 1;
        Ok(SngSettings {
            curve: self.peft.curves[s % self.peft.curves.len()],
            order_bits: self.backbone.stage_order_bits(s),
            grouping: self.peft.grouping_for(s, &self.backbone),
        })
    }

    /// Argmax class per point.
    pub fn predict(&self, cloud: &PointCloud) -> Result<Vec<usize>, Error> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, cloud)?;
        let logits = tape.value(out.logits);
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

impl Block {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        coords: &[[f64; 3]],
        bits: u32,
    ) -> Result<(Var, Option<DppTrace>), Error> {
        let order = sfc::serialize(coords, self.curve, bits)?;
        let a = self.norm1.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, a)?;
        let k = self.k.forward(tape, store, a)?;
        let v = self.v.forward(tape, store, a)?;
        let att = tape.patch_attention(q, k, v, &order.perm, self.patch)?;
        let att = self.proj.forward(tape, store, att)?;
        let h = tape.add(x, att)?;

        let f = self.norm2.forward(tape, store, h)?;
        let f = self.fc1.forward(tape, store, f)?;
        let f = tape.relu(f)?;
        let f = self.fc2.forward(tape, store, f)?;
        let out = tape.add(h, f)?;
        match &self.peft {
            Peft::None => Ok((out, None)),
            Peft::Adapter(a) => {
                let d = a.delta(tape, store, h)?;
                Ok((tape.add(out, d)?, None))
            }
            Peft::Dpp(site) => {
                let br = site.branch(tape, store, h, coords)?;
                Ok((tape.add(out, br.delta)?, Some(br.trace)))
            }
        }
    }
}

#[cfg(test)]
mod tests;
