//! Serialization-based neighborhood grouping.
//!
//! Tokens are layer-normalized, reordered along a space-filling curve and
//! cut into contiguous chunks of `n = ceil(N / m)` tokens. Only the final
//! chunk can be short; it is zero-padded to `n` slots. Because the chunks
//! are contiguous, the padded `m * n` sequence holds the real tokens in its
//! first `N` rows, so ungrouping is a slice followed by the inverse gather.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sfc::{self, CurveKind, SerializedOrder};
use crate::Error;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// How the serialized sequence is cut into groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// A target number of groups `m`.
    Count(usize),
    /// A target number of points per group; `m = ceil(N / n)`.
    PointsPerGroup(usize),
}

impl Grouping {
    /// Resolved `(groups, capacity)` for `n_points` tokens. Every group
    /// holds at least one real token, so fewer than the requested number of
    /// groups is returned when `ceil` chunking cannot fill them all.
    pub fn layout(self, n_points: usize) -> Result<(usize, usize), Error> {
        if n_points == 0 {
            return Err(Error::EmptyPointCloud);
        }
        let capacity = match self {
            Grouping::Count(m) if m >= 1 => n_points.div_ceil(m.min(n_points)),
            Grouping::PointsPerGroup(p) if p >= 1 => {
                let m = n_points.div_ceil(p);
                n_points.div_ceil(m)
            }
            _ => return Err(Error::Config("group count and points per group must be at least 1".into())),
        };
        Ok((n_points.div_ceil(capacity), capacity))
    }
}

/// Shape and ordering metadata of a grouped token tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    pub order: SerializedOrder,
    pub groups: usize,
    pub capacity: usize,
    /// `groups x capacity`, true where a slot holds a real token.
    pub mask: Vec<bool>,
}

impl GroupLayout {
    pub fn new(order: SerializedOrder, grouping: Grouping) -> Result<Self, Error> {
        let n = order.len();
        let (groups, capacity) = grouping.layout(n)?;
        let mask = (0..groups * capacity).map(|slot| slot < n).collect();
        Ok(Self { order, groups, capacity, mask })
    }

    pub fn n_points(&self) -> usize {
        self.order.len()
    }

    /// Number of real tokens in group `g`.
    pub fn group_len(&self, g: usize) -> usize {
        self.mask[g * self.capacity..(g + 1) * self.capacity].iter().filter(|&&m| m).count()
    }

    /// Real tokens must form a prefix of every group and of the flattened
    /// slot sequence, and their count must match the ordering.
    pub fn validate(&self) -> Result<(), Error> {
        let n = self.order.len();
        let consistent = self.mask.len() == self.groups * self.capacity
            && self.mask.iter().filter(|&&m| m).count() == n
            && self.mask.iter().enumerate().all(|(slot, &m)| m == (slot < n));
        if consistent {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "mask of {} slots ({} real) is inconsistent with an ordering of {} points in {} x {} groups",
                self.mask.len(),
                self.mask.iter().filter(|&&m| m).count(),
                n,
                self.groups,
                self.capacity
            )))
        }
    }

    /// Per original point: `(group, slot, curve code)`.
    pub fn assignments(&self) -> Vec<(usize, usize, u64)> {
        (0..self.n_points())
            .map(|i| {
                let k = self.order.inv_perm[i];
                (k / self.capacity, k % self.capacity, self.order.codes[k])
            })
            .collect()
    }
}

/// Grouped tokens: `values` is an `m x n x C` tensor on the tape.
#[derive(Debug, Clone)]
pub struct GroupedTokens {
    pub values: Var,
    pub layout: GroupLayout,
}

impl GroupedTokens {
    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.values)[2]
    }
}

/// Serialize `x` along `curve` and cut it into padded groups, without
/// normalization.
pub fn group_tokens(
    tape: &mut Tape,
    x: Var,
    coords: &[[f64; 3]],
    curve: CurveKind,
    order_bits: u32,
    grouping: Grouping,
) -> Result<GroupedTokens, Error> {
    if coords.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != coords.len() {
        return Err(AutodiffError::ShapeMismatch { op: "group_tokens", left: shape, right: vec![coords.len(), 3] }.into());
    }
    let order = sfc::serialize(coords, curve, order_bits)?;
    group_in_order(tape, x, order, grouping)
}

/// Group `x` along an existing ordering.
pub fn group_in_order(tape: &mut Tape, x: Var, order: SerializedOrder, grouping: Grouping) -> Result<GroupedTokens, Error> {
    let layout = GroupLayout::new(order, grouping)?;
    let c = tape.shape(x)[1];
    let seq = tape.gather_rows(x, &layout.order.perm)?;
    let padded = tape.pad_rows(seq, layout.groups * layout.capacity)?;
    let values = tape.reshape(padded, &[layout.groups, layout.capacity, c])?;
    Ok(GroupedTokens { values, layout })
}

/// Inverse grouping and deserialization of an `m x n x C'` tensor laid out
/// like `layout`: padded slots are dropped and rows return to input order.
pub fn sng_inverse(tape: &mut Tape, values: Var, layout: &GroupLayout) -> Result<Var, Error> {
    layout.validate()?;
    let shape = tape.shape(values).to_vec();
    if shape.len() != 3 || shape[0] != layout.groups || shape[1] != layout.capacity {
        return Err(AutodiffError::ShapeMismatch {
            op: "sng_inverse",
            left: shape,
            right: vec![layout.groups, layout.capacity],
        }
        .into());
    }
    let flat = tape.reshape(values, &[layout.groups * layout.capacity, shape[2]])?;
    let real = tape.slice_rows(flat, 0, layout.n_points())?;
    Ok(tape.gather_rows(real, &layout.order.inv_perm)?)
}

/// Trainable layer norm owned by a PEFT module.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, trainable: bool) -> Result<Self, Error> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), trainable)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), trainable)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, Error> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.layernorm(x, g, b, LAYERNORM_EPS)?)
    }

    pub fn numel(channels: usize) -> usize {
        2 * channels
    }
}

/// Serialization and grouping settings of one insertion site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SngSettings {
    pub curve: CurveKind,
    pub order_bits: u32,
    pub grouping: Grouping,
}

/// The full grouping step: layer norm, serialization, padded grouping.
pub fn sng_forward(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNormParams,
    settings: &SngSettings,
    x: Var,
    coords: &[[f64; 3]],
) -> Result<GroupedTokens, Error> {
    if coords.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let normed = norm.forward(tape, store, x)?;
    group_tokens(tape, normed, coords, settings.curve, settings.order_bits, settings.grouping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfc::{quantize, Aabb, GridCoord};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<[f64; 3]>, Tensor) {
        let coords = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let feats = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        (coords, feats)
    }

    #[test]
    fn ceil_partition_examples() {
        assert_eq!(Grouping::Count(3).layout(10).unwrap(), (3, 4));
        assert_eq!(Grouping::Count(4).layout(4).unwrap(), (4, 1));
        assert_eq!(Grouping::Count(1).layout(7).unwrap(), (1, 7));
        // 5 points in 4 requested groups: ceil chunks of 2 fill only 3 groups
        assert_eq!(Grouping::Count(4).layout(5).unwrap(), (3, 2));
        assert_eq!(Grouping::Count(50).layout(3).unwrap(), (3, 1));
        assert_eq!(Grouping::PointsPerGroup(4).layout(10).unwrap(), (3, 4));
        assert_eq!(Grouping::PointsPerGroup(100).layout(10).unwrap(), (1, 10));
        assert!(matches!(Grouping::Count(3).layout(0), Err(Error::EmptyPointCloud)));
        assert!(Grouping::Count(0).layout(3).is_err());
    }

    #[test]
    fn ten_points_in_three_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (coords, feats) = cloud(&mut rng, 10, 3);
        let mut tape = Tape::inference();
        let x = tape.constant(feats);
        let g = group_tokens(&mut tape, x, &coords, CurveKind::Hilbert, 10, Grouping::Count(3)).unwrap();
        assert_eq!(tape.shape(g.values), &[3, 4, 3]);
        let sizes: Vec<usize> = (0..3).map(|i| g.layout.group_len(i)).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // padded slots hold exact zeros
        let v = tape.value(g.values).data();
        assert!(v[(2 * 4 + 2) * 3..].iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_group_with_identity_norm_is_serialized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (coords, _) = cloud(&mut rng, 9, 4);
        // rows with zero mean and unit variance pass through the norm unchanged
        let rows: Vec<[f64; 4]> = (0..9)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [s, -s, s, -s]
            })
            .collect();
        let x_t = Tensor::from_rows(&rows);
        let mut store = ParamStore::new();
        let norm = LayerNormParams::new(&mut store, "n", 4, true).unwrap();
        let settings = SngSettings { curve: CurveKind::ZOrder, order_bits: 10, grouping: Grouping::Count(1) };
        let mut tape = Tape::inference();
        let x = tape.constant(x_t.clone());
        let g = sng_forward(&mut tape, &store, &norm, &settings, x, &coords).unwrap();
        let got = tape.value(g.values).clone().reshaped(&[9, 4]).unwrap();
        for (k, &i) in g.layout.order.perm.iter().enumerate() {
            for c in 0..4 {
                assert!((got.row(k)[c] - x_t.row(i)[c]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn inverse_is_exact_and_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (coords, feats) = cloud(&mut rng, 37, 5);
        let mut tape = Tape::inference();
        let x = tape.constant(feats.clone());
        let g = group_tokens(&mut tape, x, &coords, CurveKind::HilbertPermuted(crate::sfc::AxisPerm::YXZ), 8, Grouping::Count(5))
            .unwrap();
        let back = sng_inverse(&mut tape, g.values, &g.layout).unwrap();
        assert!(tape.value(back).bit_eq(&feats));

        let mut poisoned = tape.value(g.values).clone();
        let c = 5;
        for (slot, &real) in g.layout.mask.iter().enumerate() {
            if !real {
                poisoned.data_mut()[slot * c..(slot + 1) * c].iter_mut().for_each(|v| *v = 999.0);
            }
        }
        assert!(g.layout.mask.iter().any(|m| !m), "test needs padding");
        let pv = tape.constant(poisoned);
        let back2 = sng_inverse(&mut tape, pv, &g.layout).unwrap();
        assert!(tape.value(back2).bit_eq(&feats));
    }

    #[test]
    fn one_group_inverse_is_plain_inverse_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (coords, feats) = cloud(&mut rng, 6, 2);
        let mut tape = Tape::inference();
        let x = tape.constant(feats.clone());
        let g = group_tokens(&mut tape, x, &coords, CurveKind::ZOrder, 10, Grouping::Count(1)).unwrap();
        let seq = tape.value(g.values).clone().reshaped(&[6, 2]).unwrap();
        let sv = tape.constant(seq);
        let manual = tape.gather_rows(sv, &g.layout.order.inv_perm).unwrap();
        let back = sng_inverse(&mut tape, g.values, &g.layout).unwrap();
        assert!(tape.value(back).bit_eq(tape.value(manual)));
    }

    #[test]
    fn inconsistent_layout_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (coords, feats) = cloud(&mut rng, 7, 2);
        let mut tape = Tape::inference();
        let x = tape.constant(feats);
        let g = group_tokens(&mut tape, x, &coords, CurveKind::ZOrder, 10, Grouping::Count(2)).unwrap();
        let mut bad = g.layout.clone();
        bad.mask[0] = false;
        assert!(matches!(sng_inverse(&mut tape, g.values, &bad), Err(Error::Layout(_))));
        let err = group_tokens(&mut tape, x, &[], CurveKind::ZOrder, 10, Grouping::Count(2)).unwrap_err();
        assert_eq!(err.to_string(), "empty point cloud");
    }

    fn mean_l1_diameter(cells: &[GridCoord], order: &[usize], m: usize) -> f64 {
        let n = order.len().div_ceil(m);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(n) {
            let mut d = 0;
            for a in chunk {
                for b in chunk {
                    d = d.max(cells[*a].l1(cells[*b]));
                }
            }
            total += f64::from(d);
            count += 1;
        }
        total / f64::from(count)
    }

    #[test]
    fn hilbert_groups_are_more_compact_than_random_groups() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 1000 + (seed as usize) * 7;
            let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let bits = 10;
            let bbox = Aabb::from_points(&coords).unwrap();
            let cells = quantize(&coords, bits, &bbox).unwrap();
            let order = sfc::serialize(&coords, CurveKind::Hilbert, bits).unwrap();
            let mut random: Vec<usize> = (0..n).collect();
            random.shuffle(&mut rng);
            let curve_d = mean_l1_diameter(&cells, &order.perm, 50);
            let random_d = mean_l1_diameter(&cells, &random, 50);
            assert!(curve_d < random_d, "seed {seed}: {curve_d} vs {random_d}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in 0u64..1000, n in 1usize..300, m_frac in 0.0f64..1.0, which in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (coords, feats) = cloud(&mut rng, n, 3);
            let m = 1 + ((n - 1) as f64 * m_frac) as usize;
            let mut tape = Tape::inference();
            let x = tape.constant(feats.clone());
            let g = group_tokens(&mut tape, x, &coords, CurveKind::MIXED[which], 10, Grouping::Count(m)).unwrap();
            prop_assert_eq!(g.layout.mask.iter().filter(|&&r| r).count(), n);
            prop_assert!((0..g.layout.groups).all(|i| g.layout.group_len(i) >= 1));
            let back = sng_inverse(&mut tape, g.values, &g.layout).unwrap();
            prop_assert!(tape.value(back).bit_eq(&feats));
        }
    }
}
