//! Dynamic parameter projector.
//!
//! Each group of serialized tokens gets its own down-projection, mixed from
//! `K` learnable bases by a small router over the group's mean token:
//!
//! ```text
//! O   = softmax(MLP(mean_g(x_g)) / tau)          m x K
//! W_i = sum_k O[i,k] P_k                         C x C_d
//! out = x + s * (ReLU(ungroup(x_g W_i)) W_up + b_up)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::nn::{Init, Initializer, Linear};
use crate::sng::{self, GroupLayout, GroupedTokens, LayerNormParams, SngSettings};
use crate::Error;

pub const DEFAULT_TAU: f64 = 4.0;

/// Which projection of the bottleneck is synthesized per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpLayerPosition {
    #[default]
    Down,
    Up,
    Both,
}

impl DpLayerPosition {
    fn dynamic_down(self) -> bool {
        matches!(self, DpLayerPosition::Down | DpLayerPosition::Both)
    }

    fn dynamic_up(self) -> bool {
        matches!(self, DpLayerPosition::Up | DpLayerPosition::Both)
    }
}

impl fmt::Display for DpLayerPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DpLayerPosition::Down => "down",
            DpLayerPosition::Up => "up",
            DpLayerPosition::Both => "both",
        })
    }
}

impl FromStr for DpLayerPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "down" => Ok(DpLayerPosition::Down),
            "up" => Ok(DpLayerPosition::Up),
            "both" => Ok(DpLayerPosition::Both),
            other => Err(Error::Config(format!("unknown DPLayer position {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DppSiteConfig {
    pub channels: usize,
    pub bottleneck: usize,
    pub bases: usize,
    pub router_hidden: usize,
    pub tau: f64,
    pub scale: f64,
    pub position: DpLayerPosition,
    pub sng: SngSettings,
}

impl DppSiteConfig {
    /// Router width `max(K, C / divisor)`.
    pub fn router_hidden_for(channels: usize, bases: usize, divisor: usize) -> usize {
        bases.max(channels / divisor.max(1))
    }

    fn validate(&self) -> Result<(), Error> {
        if self.channels == 0 || self.bottleneck == 0 || self.bases == 0 || self.router_hidden == 0 {
            return Err(Error::Config("DPP widths and base count must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("router temperature must be positive, got {}", self.tau)));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("DPP scale must be finite".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of one site.
    pub fn trainable_numel(&self) -> usize {
        let (c, d, k, h) = (self.channels, self.bottleneck, self.bases, self.router_hidden);
        let down = if self.position.dynamic_down() { k * c * d } else { c * d };
        let up = if self.position.dynamic_up() { k * d * c } else { d * c };
        let router = c * h + h + h * k + k;
        LayerNormParams::numel(c) + down + router + up + c
    }
}

#[derive(Debug, Clone, Copy)]
enum Projection {
    Static(ParamId),
    Dynamic(ParamId),
}

#[derive(Debug, Clone)]
pub struct DppSite {
    pub config: DppSiteConfig,
    norm: LayerNormParams,
    fc1: Linear,
    fc2: Linear,
    down: Projection,
    up: Projection,
    up_bias: ParamId,
}

/// What one forward pass of a site produced besides its output.
#[derive(Debug, Clone)]
pub struct DppTrace {
    pub layout: GroupLayout,
    /// `m x K` routing coefficients.
    pub routing: Var,
    /// `m x C x C_d` synthesized down weights (down or both positions).
    pub down_weights: Option<Var>,
    /// `m x C_d x C` synthesized up weights (up or both positions).
    pub up_weights: Option<Var>,
}

impl DppTrace {
    /// The synthesized weights used for similarity analysis.
    pub fn weights(&self) -> Var {
        self.down_weights.or(self.up_weights).expect("a site always synthesizes at least one projection")
    }
}

#[derive(Debug, Clone)]
pub struct DppBranch {
    /// `N x C` residual contribution `s * (...)`.
    pub delta: Var,
    pub trace: DppTrace,
}

impl DppSite {
    pub fn new(store: &mut ParamStore, init: &Initializer, prefix: &str, config: DppSiteConfig) -> Result<Self, Error> {
        config.validate()?;
        let (c, d, k, h) = (config.channels, config.bottleneck, config.bases, config.router_hidden);
        let norm = LayerNormParams::new(store, &format!("{prefix}.norm"), c, true)?;
        let down = if config.position.dynamic_down() {
            Projection::Dynamic(init.add(store, format!("{prefix}.bases"), &[k, c, d], Init::fan_in(c), true)?)
        } else {
            Projection::Static(init.add(store, format!("{prefix}.down.weight"), &[c, d], Init::fan_in(c), true)?)
        };
        let fc1 = Linear::new(store, init, &format!("{prefix}.router.fc1"), c, h, true, true)?;
        let fc2 = Linear::new(store, init, &format!("{prefix}.router.fc2"), h, k, true, true)?;
        let up = if config.position.dynamic_up() {
            Projection::Dynamic(init.add(store, format!("{prefix}.up_bases"), &[k, d, c], Init::Zeros, true)?)
        } else {
            Projection::Static(init.add(store, format!("{prefix}.up.weight"), &[d, c], Init::Zeros, true)?)
        };
        let up_bias = init.add(store, format!("{prefix}.up.bias"), &[c], Init::Zeros, true)?;
        Ok(Self { config, norm, fc1, fc2, down, up, up_bias })
    }

    /// Parameter ids of the down-projection bases, if dynamic.
    pub fn bases(&self) -> Option<ParamId> {
        match self.down {
            Projection::Dynamic(id) => Some(id),
            Projection::Static(_) => None,
        }
    }

    pub fn down_weight(&self) -> ParamId {
        match self.down {
            Projection::Dynamic(id) | Projection::Static(id) => id,
        }
    }

    pub fn up_weight(&self) -> ParamId {
        match self.up {
            Projection::Dynamic(id) | Projection::Static(id) => id,
        }
    }

    pub fn up_bias(&self) -> ParamId {
        self.up_bias
    }

    pub fn norm(&self) -> &LayerNormParams {
        &self.norm
    }

    pub fn router_layers(&self) -> (&Linear, &Linear) {
        (&self.fc1, &self.fc2)
    }

    /// Layer norm, serialization and grouping of the site input.
    pub fn group(&self, tape: &mut Tape, store: &ParamStore, x: Var, coords: &[[f64; 3]]) -> Result<GroupedTokens, Error> {
        sng::sng_forward(tape, store, &self.norm, &self.config.sng, x, coords)
    }

    /// `m x K` routing coefficients from mask-aware group means.
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, g: &GroupedTokens) -> Result<Var, Error> {
        for i in 0..g.layout.groups {
            if g.layout.group_len(i) == 0 {
                return Err(Error::Layout(format!("group {i} has no real tokens")));
            }
        }
        let pooled = tape.mean_rows_masked(g.values, &g.layout.mask)?;
        let hidden = self.fc1.forward(tape, store, pooled)?;
        let hidden = tape.relu(hidden)?;
        let logits = self.fc2.forward(tape, store, hidden)?;
        Ok(tape.softmax_rows(logits, self.config.tau)?)
    }

    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, x: Var, coords: &[[f64; 3]]) -> Result<DppBranch, Error> {
        let g = self.group(tape, store, x, coords)?;
        self.branch_from_grouped(tape, store, &g)
    }

    /// Residual contribution computed from already grouped tokens.
    pub fn branch_from_grouped(&self, tape: &mut Tape, store: &ParamStore, g: &GroupedTokens) -> Result<DppBranch, Error> {
        let (c, d) = (self.config.channels, self.config.bottleneck);
        let (m, n) = (g.layout.groups, g.layout.capacity);
        let routing = self.route(tape, store, g)?;

        let (projected, down_weights) = match self.down {
            Projection::Dynamic(bases) => {
                let w = synthesize_weights(tape, store, routing, bases)?;
                (tape.batched_matmul(g.values, w)?, Some(w))
            }
            Projection::Static(weight) => {
                let flat = tape.reshape(g.values, &[m * n, c])?;
                let w = tape.param(store, weight);
                let y = tape.matmul(flat, w)?;
                (tape.reshape(y, &[m, n, d])?, None)
            }
        };

        let (hidden, up_weights) = match self.up {
            Projection::Static(weight) => {
                let tokens = sng::sng_inverse(tape, projected, &g.layout)?;
                let act = tape.relu(tokens)?;
                let w = tape.param(store, weight);
                (tape.matmul(act, w)?, None)
            }
            Projection::Dynamic(bases) => {
                let act = tape.relu(projected)?;
                let w = synthesize_weights(tape, store, routing, bases)?;
                let y = tape.batched_matmul(act, w)?;
                (sng::sng_inverse(tape, y, &g.layout)?, Some(w))
            }
        };
        let b = tape.param(store, self.up_bias);
        let out = tape.add_bias(hidden, b)?;
        let delta = tape.mul_scalar(out, self.config.scale)?;
        Ok(DppBranch { delta, trace: DppTrace { layout: g.layout.clone(), routing, down_weights, up_weights } })
    }

    /// `x + s * (...)` together with the trace of the pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, coords: &[[f64; 3]]) -> Result<(Var, DppTrace), Error> {
        let br = self.branch(tape, store, x, coords)?;
        Ok((tape.add(x, br.delta)?, br.trace))
    }
}

/// `W_i = sum_k O[i,k] P_k` for bases of shape `K x A x B`; returns `m x A x B`.
pub fn synthesize_weights(tape: &mut Tape, store: &ParamStore, routing: Var, bases: ParamId) -> Result<Var, Error> {
    let shape = store.get(bases).tensor.shape().to_vec();
    let (k, a, b) = (shape[0], shape[1], shape[2]);
    let p = tape.param(store, bases);
    let flat = tape.reshape(p, &[k, a * b])?;
    let mixed = tape.matmul(routing, flat)?;
    let m = tape.shape(routing)[0];
    Ok(tape.reshape(mixed, &[m, a, b])?)
}

/// Pairwise cosine similarity of the flattened per-group weights of an
/// `m x ...` tensor. Pairs involving a zero-norm weight get 0.
pub fn weight_similarity(weights: &Tensor) -> Tensor {
    let m = weights.shape()[0];
    let len = weights.numel() / m.max(1);
    let rows: Vec<&[f64]> = weights.data().chunks(len.max(1)).take(m).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            out[i * m + j] = s;
            out[j * m + i] = s;
        }
    }
    Tensor::new(vec![m, m], out).expect("square")
}

/// Shannon entropy (nats) of every routing row.
pub fn routing_entropy(routing: &Tensor) -> Vec<f64> {
    (0..routing.rows())
        .map(|i| -routing.row(i).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::StaticAdapter;
    use crate::autodiff::gradcheck;
    use crate::sfc::CurveKind;
    use crate::sng::Grouping;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(c: usize, d: usize, k: usize, m: usize) -> DppSiteConfig {
        DppSiteConfig {
            channels: c,
            bottleneck: d,
            bases: k,
            router_hidden: DppSiteConfig::router_hidden_for(c, k, 2),
            tau: DEFAULT_TAU,
            scale: 1.0,
            position: DpLayerPosition::Down,
            sng: SngSettings { curve: CurveKind::Hilbert, order_bits: 10, grouping: Grouping::Count(m) },
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Vec<[f64; 3]>, Tensor) {
        let coords = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let feats = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        (coords, feats)
    }

    /// Fill every trainable tensor with random values so that no gradient
    /// path is trivially zero.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
    }

    fn run(site: &DppSite, store: &ParamStore, coords: &[[f64; 3]], x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let (out, trace) = site.forward(&mut tape, store, xv, coords).unwrap();
        (tape.value(out).clone(), tape.value(trace.routing).clone(), tape.value(trace.weights()).clone())
    }

    #[test]
    fn fresh_site_is_identity_and_zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (coords, x) = cloud(&mut rng, 31, 8);
        let mut store = ParamStore::new();
        let site = DppSite::new(&mut store, &Initializer::new(1), "dpp", config(8, 4, 3, 4)).unwrap();
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let br = site.branch(&mut tape, &store, xv, &coords).unwrap();
        assert!(tape.value(br.delta).data().iter().all(|&v| v == 0.0));
        let (out, _, _) = run(&site, &store, &coords, &x);
        assert_eq!(out.data(), x.data());

        randomize(&mut store, 3);
        let (out, _, _) = run(&site, &store, &coords, &x);
        assert!(out.max_abs_diff(&x) > 0.0);
        let mut zero = site.clone();
        zero.config.scale = 0.0;
        let (out, _, _) = run(&zero, &store, &coords, &x);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn routing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (coords, x) = cloud(&mut rng, 20, 8);
        let mut store = ParamStore::new();
        let site = DppSite::new(&mut store, &Initializer::new(2), "dpp", config(8, 4, 3, 5)).unwrap();
        let (fc1, fc2) = site.router_layers();
        let (w2, b2) = (fc2.weight, fc2.bias.unwrap());
        let _ = fc1;
        store.get_mut(w2).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(b2).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (_, o, _) = run(&site, &store, &coords, &x);
        assert!(o.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut store1 = ParamStore::new();
        let site1 = DppSite::new(&mut store1, &Initializer::new(2), "dpp", config(8, 4, 1, 5)).unwrap();
        randomize(&mut store1, 4);
        let (_, o, w) = run(&site1, &store1, &coords, &x);
        assert!(o.data().iter().all(|&v| v == 1.0));
        let sim = weight_similarity(&w);
        assert!(sim.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn temperature_sweep_flattens_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (coords, x) = cloud(&mut rng, 40, 8);
        let mut store = ParamStore::new();
        let mut site = DppSite::new(&mut store, &Initializer::new(6), "dpp", config(8, 4, 4, 6)).unwrap();
        randomize(&mut store, 7);
        let mut last = f64::INFINITY;
        for tau in [4.0, 40.0, 400.0] {
            site.config.tau = tau;
            let (_, o, _) = run(&site, &store, &coords, &x);
            let dev = o.data().iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
            assert!(dev < last, "tau {tau}: {dev} !< {last}");
            last = dev;
        }
    }

    #[test]
    fn joint_logit_and_temperature_scaling_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (coords, x) = cloud(&mut rng, 29, 8);
        let mut store = ParamStore::new();
        let site = DppSite::new(&mut store, &Initializer::new(9), "dpp", config(8, 4, 3, 4)).unwrap();
        randomize(&mut store, 10);
        let (out, o, w) = run(&site, &store, &coords, &x);
        for c in [0.5, 2.0, 8.0] {
            let mut scaled = store.clone();
            let fc2 = *site.router_layers().1;
            for id in [fc2.weight, fc2.bias.unwrap()] {
                scaled.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v *= c);
            }
            let mut s2 = site.clone();
            s2.config.tau *= c;
            let (out2, o2, w2) = run(&s2, &scaled, &coords, &x);
            assert!(o.max_abs_diff(&o2) < 1e-12);
            assert!(w.max_abs_diff(&w2) < 1e-12);
            assert!(out.max_abs_diff(&out2) < 1e-12);
        }
    }

    #[test]
    fn synthesis_selects_and_mixes_bases() {
        let mut store = ParamStore::new();
        let p = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let bases = store.add("p", p, true).unwrap();
        let mut tape = Tape::inference();
        let o = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]));
        let w = synthesize_weights(&mut tape, &store, o, bases).unwrap();
        assert_eq!(tape.shape(w), &[3, 2, 1]);
        assert_eq!(tape.value(w).data(), &[1.0, 2.0, 3.0, 6.0, 2.0, 4.0]);
    }

    #[test]
    fn synthesized_weights_depend_on_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (coords_a, xa) = cloud(&mut rng, 30, 8);
        let (coords_b, xb) = cloud(&mut rng, 30, 8);
        let mut store = ParamStore::new();
        let site = DppSite::new(&mut store, &Initializer::new(12), "dpp", config(8, 4, 3, 3)).unwrap();
        randomize(&mut store, 13);
        let (_, oa, wa) = run(&site, &store, &coords_a, &xa);
        let (_, _, wb) = run(&site, &store, &coords_b, &xb);
        assert!(wa.max_abs_diff(&wb) > 0.0);
        for i in 0..oa.rows() {
            assert!((oa.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(oa.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    /// Static adapter evaluated through the same grouping path, written out
    /// by hand: group the normalized tokens, project with the shared down
    /// weight, ungroup, then the shared up projection.
    fn grouped_adapter_reference(site: &DppSite, store: &ParamStore, coords: &[[f64; 3]], x: &Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let g = site.group(&mut tape, store, xv, coords).unwrap();
        let p1 = store.get(site.bases().unwrap()).tensor.clone();
        let (c, d) = (site.config.channels, site.config.bottleneck);
        let w = tape.constant(p1.reshaped(&[c, d]).unwrap());
        let flat = tape.reshape(g.values, &[g.layout.groups * g.layout.capacity, c]).unwrap();
        let y = tape.matmul(flat, w).unwrap();
        let y = tape.reshape(y, &[g.layout.groups, g.layout.capacity, d]).unwrap();
        let tokens = sng::sng_inverse(&mut tape, y, &g.layout).unwrap();
        let act = tape.relu(tokens).unwrap();
        let up = tape.param(store, site.up_weight());
        let b = tape.param(store, site.up_bias());
        let h = tape.matmul(act, up).unwrap();
        let h = tape.add_bias(h, b).unwrap();
        let h = tape.mul_scalar(h, site.config.scale).unwrap();
        let out = tape.add(xv, h).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_basis_matches_static_adapter() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (coords, x) = cloud(&mut rng, 23, 8);
            let mut store = ParamStore::new();
            let init = Initializer::new(seed);
            let site = DppSite::new(&mut store, &init, "dpp", config(8, 4, 1, 4)).unwrap();
            let adapter = StaticAdapter::new(&mut store, &init, "adapter", 8, 4, 1.0).unwrap();
            randomize(&mut store, 200 + seed);
            // share LN, down, up and bias
            let pairs = [
                (site.norm().gamma, adapter.norm().gamma),
                (site.norm().beta, adapter.norm().beta),
                (site.bases().unwrap(), adapter.down()),
                (site.up_weight(), adapter.up()),
                (site.up_bias(), adapter.up_bias()),
            ];
            for (from, to) in pairs {
                let t = store.get(from).tensor.clone();
                let shape = store.get(to).tensor.shape().to_vec();
                store.get_mut(to).tensor = t.reshaped(&shape).unwrap();
            }
            let (dpp_out, _, _) = run(&site, &store, &coords, &x);
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let a = adapter.forward(&mut tape, &store, xv).unwrap();
            let diff = dpp_out.max_abs_diff(tape.value(a));
            assert!(diff <= 1e-12, "seed {seed}: per-token adapter differs by {diff}");
            let reference = grouped_adapter_reference(&site, &store, &coords, &x);
            let diff = dpp_out.max_abs_diff(&reference);
            assert!(diff <= 1e-12, "seed {seed}: grouped adapter differs by {diff}");
        }
    }

    #[test]
    fn padded_slot_contents_never_reach_the_output() {
        for position in [DpLayerPosition::Down, DpLayerPosition::Up, DpLayerPosition::Both] {
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let (coords, x) = cloud(&mut rng, 27, 8);
            let mut store = ParamStore::new();
            let mut cfg = config(8, 4, 3, 4);
            cfg.position = position;
            let site = DppSite::new(&mut store, &Initializer::new(21), "dpp", cfg).unwrap();
            randomize(&mut store, 22);

            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let g = site.group(&mut tape, &store, xv, &coords).unwrap();
            assert!(g.layout.mask.iter().any(|m| !m));
            let clean = site.branch_from_grouped(&mut tape, &store, &g).unwrap();

            let mut poisoned = tape.value(g.values).clone();
            for (slot, &real) in g.layout.mask.iter().enumerate() {
                if !real {
                    poisoned.data_mut()[slot * 8..(slot + 1) * 8].iter_mut().for_each(|v| *v = 999.0);
                }
            }
            let pv = tape.constant(poisoned);
            let pg = GroupedTokens { values: pv, layout: g.layout.clone() };
            let dirty = site.branch_from_grouped(&mut tape, &store, &pg).unwrap();
            assert!(tape.value(clean.delta).bit_eq(tape.value(dirty.delta)), "{position}");
            assert!(tape.value(clean.trace.routing).bit_eq(tape.value(dirty.trace.routing)));
        }
    }

    #[test]
    fn site_gradients_match_finite_differences() {
        for position in [DpLayerPosition::Down, DpLayerPosition::Up, DpLayerPosition::Both] {
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            // m = 3 groups of n = 5
            let (coords, x) = cloud(&mut rng, 15, 8);
            let labels: Vec<i64> = (0..15).map(|_| rng.random_range(0..8)).collect();
            let mut store = ParamStore::new();
            let mut cfg = config(8, 4, 2, 3);
            cfg.position = position;
            let site = DppSite::new(&mut store, &Initializer::new(31), "dpp", cfg).unwrap();
            randomize(&mut store, 32);

            let loss = |store: &ParamStore, tape: &mut Tape| -> Result<Var, Error> {
                let xv = tape.constant(x.clone());
                let (out, _) = site.forward(tape, store, xv, &coords)?;
                Ok(tape.cross_entropy(out, &labels)?)
            };
            let mut tape = Tape::new();
            let l = loss(&store, &mut tape).unwrap();
            let grads = tape.backward(l).unwrap();
            let report = gradcheck::check_trainable(&mut store, grads.params(), 1e-5, 1e-4, |s| {
                let mut tape = Tape::inference();
                let l = loss(s, &mut tape)?;
                Ok::<f64, Error>(tape.value(l).data()[0])
            })
            .unwrap();
            assert!(report.passed(), "{position}: {:?}", report.failures().collect::<Vec<_>>());
            assert_eq!(report.params.len(), store.len());
            assert!(report.params.iter().all(|p| p.max_abs_grad > 0.0), "{position}: vacuous check");
        }
    }

    #[test]
    fn similarity_and_entropy() {
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let s = weight_similarity(&w);
        assert_eq!(s.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let o = Tensor::from_rows(&[[0.5, 0.5], [1.0, 0.0]]);
        let h = routing_entropy(&o);
        assert!((h[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(h[1], 0.0);
    }

    #[test]
    fn census_matches_registry() {
        for position in [DpLayerPosition::Down, DpLayerPosition::Up, DpLayerPosition::Both] {
            let mut store = ParamStore::new();
            let mut cfg = config(16, 2, 4, 3);
            cfg.position = position;
            DppSite::new(&mut store, &Initializer::new(0), "s", cfg.clone()).unwrap();
            assert_eq!(store.census().0, cfg.trainable_numel());
        }
    }
}
