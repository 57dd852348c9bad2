//! Static bottleneck adapters and the plan that decides which block gets
//! which kind of PEFT branch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::nn::{Init, Initializer};
use crate::sng::LayerNormParams;
use crate::Error;

/// Per-token bottleneck: `x + s * (ReLU(LN(x) W_down) W_up + b_up)`.
#[derive(Debug, Clone)]
pub struct StaticAdapter {
    pub channels: usize,
    pub bottleneck: usize,
    pub scale: f64,
    norm: LayerNormParams,
    down: ParamId,
    up: ParamId,
    up_bias: ParamId,
}

impl StaticAdapter {
    pub fn new(
        store: &mut ParamStore,
        init: &Initializer,
        prefix: &str,
        channels: usize,
        bottleneck: usize,
        scale: f64,
    ) -> Result<Self, Error> {
        if channels == 0 || bottleneck == 0 {
            return Err(Error::Config("adapter widths must be at least 1".into()));
        }
        let norm = LayerNormParams::new(store, &format!("{prefix}.norm"), channels, true)?;
        let down = init.add(store, format!("{prefix}.down.weight"), &[channels, bottleneck], Init::fan_in(channels), true)?;
        let up = init.add(store, format!("{prefix}.up.weight"), &[bottleneck, channels], Init::Zeros, true)?;
        let up_bias = init.add(store, format!("{prefix}.up.bias"), &[channels], Init::Zeros, true)?;
        Ok(Self { channels, bottleneck, scale, norm, down, up, up_bias })
    }

    pub fn norm(&self) -> &LayerNormParams {
        &self.norm
    }

    pub fn down(&self) -> ParamId {
        self.down
    }

    pub fn up(&self) -> ParamId {
        self.up
    }

    pub fn up_bias(&self) -> ParamId {
        self.up_bias
    }

    /// The residual contribution `s * (...)` alone.
    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, Error> {
        let h = self.norm.forward(tape, store, x)?;
        let down = tape.param(store, self.down);
        let h = tape.matmul(h, down)?;
        let h = tape.relu(h)?;
        let up = tape.param(store, self.up);
        let h = tape.matmul(h, up)?;
        let b = tape.param(store, self.up_bias);
        let h = tape.add_bias(h, b)?;
        Ok(tape.mul_scalar(h, self.scale)?)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, Error> {
        let d = self.delta(tape, store, x)?;
        Ok(tape.add(x, d)?)
    }

    pub fn trainable_numel(channels: usize, bottleneck: usize) -> usize {
        LayerNormParams::numel(channels) + 2 * channels * bottleneck + channels
    }
}

/// What a block carries besides the frozen backbone computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    None,
    Adapter,
    Dpp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionStrategy {
    /// DPP in every block.
    Dense,
    /// DPP in every second block, counted over the whole network.
    EveryTwo,
    /// DPP in every third block, counted over the whole network.
    EveryThree,
    /// A single DPP in the final block of the network.
    LastBlockOnly,
    FirstBlockPerStage,
    #[default]
    LastBlockPerStage,
    /// Static adapters everywhere, no DPP.
    AdapterOnly,
    /// No PEFT branch at all; only the head trains.
    LinearProbe,
}

impl InsertionStrategy {
    pub const ALL: [InsertionStrategy; 8] = [
        InsertionStrategy::Dense,
        InsertionStrategy::EveryTwo,
        InsertionStrategy::EveryThree,
        InsertionStrategy::LastBlockOnly,
        InsertionStrategy::FirstBlockPerStage,
        InsertionStrategy::LastBlockPerStage,
        InsertionStrategy::AdapterOnly,
        InsertionStrategy::LinearProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InsertionStrategy::Dense => "dense",
            InsertionStrategy::EveryTwo => "every_two",
            InsertionStrategy::EveryThree => "every_three",
            InsertionStrategy::LastBlockOnly => "last_block_only",
            InsertionStrategy::FirstBlockPerStage => "first_block_per_stage",
            InsertionStrategy::LastBlockPerStage => "last_block_per_stage",
            InsertionStrategy::AdapterOnly => "adapter_only",
            InsertionStrategy::LinearProbe => "linear_probe",
        }
    }

    /// Tag of block `block` (0-based) of stage `stage`, where `global` is the
    /// 1-based index of the block over the whole network.
    fn tag(self, stage: usize, block: usize, stage_blocks: usize, global: usize, total: usize, n_stages: usize) -> SiteKind {
        let dpp = match self {
            InsertionStrategy::Dense => true,
            InsertionStrategy::EveryTwo => global % 2 == 0,
            InsertionStrategy::EveryThree => global % 3 == 0,
            InsertionStrategy::LastBlockOnly => stage + 1 == n_stages && global == total,
            InsertionStrategy::FirstBlockPerStage => block == 0,
            InsertionStrategy::LastBlockPerStage => block + 1 == stage_blocks,
            InsertionStrategy::AdapterOnly => false,
            InsertionStrategy::LinearProbe => return SiteKind::None,
        };
        if dpp {
            SiteKind::Dpp
        } else {
            SiteKind::Adapter
        }
    }
}

impl fmt::Display for InsertionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InsertionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown insertion strategy {s:?}")))
    }
}

/// Per stage, per block PEFT tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertionPlan {
    pub strategy: InsertionStrategy,
    pub tags: Vec<Vec<SiteKind>>,
}

impl InsertionPlan {
    pub fn build(blocks: &[usize], strategy: InsertionStrategy) -> Result<Self, Error> {
        if blocks.is_empty() || blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        let total: usize = blocks.iter().sum();
        let mut global = 0;
        let tags = blocks
            .iter()
            .enumerate()
            .map(|(s, &b)| {
                (0..b)
                    .map(|j| {
                        global += 1;
                        strategy.tag(s, j, b, global, total, blocks.len())
                    })
                    .collect()
            })
            .collect();
        Ok(Self { strategy, tags })
    }

    /// Replace the tags of whole stages. Keys are 1-based stage numbers.
    pub fn with_overrides(mut self, overrides: &BTreeMap<usize, Vec<SiteKind>>) -> Result<Self, Error> {
        for (&stage, tags) in overrides {
            let slot = stage
                .checked_sub(1)
                .and_then(|s| self.tags.get_mut(s))
                .ok_or_else(|| Error::Config(format!("override for nonexistent stage {stage}")))?;
            if slot.len() != tags.len() {
                return Err(Error::Config(format!(
                    "override for stage {stage} has {} tags but the stage has {} blocks",
                    tags.len(),
                    slot.len()
                )));
            }
            slot.clone_from(tags);
        }
        Ok(self)
    }

    pub fn count(&self, kind: SiteKind) -> usize {
        self.tags.iter().flatten().filter(|&&t| t == kind).count()
    }

    pub fn total_blocks(&self) -> usize {
        self.tags.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use SiteKind::{Adapter as A, Dpp as D};

    #[test]
    fn plan_examples() {
        let p = InsertionPlan::build(&[2, 2, 2], InsertionStrategy::LastBlockPerStage).unwrap();
        assert_eq!(p.tags, vec![vec![A, D], vec![A, D], vec![A, D]]);
        let p = InsertionPlan::build(&[2, 2, 2], InsertionStrategy::Dense).unwrap();
        assert_eq!((p.count(D), p.count(A)), (6, 0));
        let p = InsertionPlan::build(&[2, 3, 2], InsertionStrategy::LastBlockOnly).unwrap();
        assert_eq!(p.count(D), 1);
        assert_eq!(p.tags[2][1], D);
        let p = InsertionPlan::build(&[2, 3, 2], InsertionStrategy::FirstBlockPerStage).unwrap();
        assert_eq!(p.tags, vec![vec![D, A], vec![D, A, A], vec![D, A]]);
        let p = InsertionPlan::build(&[3, 3], InsertionStrategy::EveryThree).unwrap();
        assert_eq!(p.tags, vec![vec![A, A, D], vec![A, A, D]]);
        let p = InsertionPlan::build(&[3, 2], InsertionStrategy::EveryTwo).unwrap();
        assert_eq!(p.tags, vec![vec![A, D, A], vec![D, A]]);
        let p = InsertionPlan::build(&[2, 2], InsertionStrategy::LinearProbe).unwrap();
        assert_eq!(p.count(SiteKind::None), 4);
        assert!(InsertionPlan::build(&[2, 0], InsertionStrategy::Dense).is_err());
        assert_eq!("dense".parse::<InsertionStrategy>().unwrap(), InsertionStrategy::Dense);
        assert!("sparse".parse::<InsertionStrategy>().unwrap_err().to_string().contains("unknown insertion strategy"));
    }

    #[test]
    fn plans_cover_every_block() {
        for blocks in [vec![1], vec![2, 2, 2], vec![1, 4, 3, 2, 2]] {
            for s in InsertionStrategy::ALL {
                let p = InsertionPlan::build(&blocks, s).unwrap();
                assert_eq!(p.total_blocks(), blocks.iter().sum::<usize>());
                if s == InsertionStrategy::LastBlockPerStage {
                    assert_eq!(p.count(D), blocks.len());
                }
            }
        }
    }

    #[test]
    fn overrides_replace_stages() {
        let p = InsertionPlan::build(&[2, 2], InsertionStrategy::LastBlockPerStage).unwrap();
        let o = BTreeMap::from([(2, vec![D, D])]);
        let p = p.with_overrides(&o).unwrap();
        assert_eq!(p.tags, vec![vec![A, D], vec![D, D]]);
        assert!(p.clone().with_overrides(&BTreeMap::from([(3, vec![D])])).is_err());
        assert!(p.with_overrides(&BTreeMap::from([(1, vec![D])])).is_err());
    }

    #[test]
    fn adapter_identity_cases_and_census() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![9, 6], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut store = ParamStore::new();
        let mut a = StaticAdapter::new(&mut store, &Initializer::new(1), "a", 6, 3, 1.0).unwrap();
        assert_eq!(store.census().0, StaticAdapter::trainable_numel(6, 3));
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = a.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let up = a.up();
        store.get_mut(up).tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let y = a.forward(&mut tape, &store, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) > 0.0);
        a.scale = 0.0;
        let y = a.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }
}
