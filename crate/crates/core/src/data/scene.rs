//! Synthetic rooms built from a floor, wall slabs, boxes and spheres.
//!
//! Points are split among recipes by their frequency targets (largest
//! remainder), then sampled uniformly on each primitive's surface with
//! Gaussian jitter. Features are `x, y, z, r, g, b` with per-recipe base
//! colors plus noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::Error;

pub const FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// Range of the room length along x, meters.
    pub length: [f64; 2],
    /// Range of the room width along y, meters.
    pub width: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Floor,
    /// The four walls, from the floor up to the room height.
    Walls,
    /// Axis-aligned box surfaces. `elevation` is the range of the bottom face
    /// height; boxes `against_wall` touch a random wall.
    Box {
        size_min: [f64; 3],
        size_max: [f64; 3],
        #[serde(default)]
        elevation: [f64; 2],
        #[serde(default)]
        against_wall: bool,
    },
    Sphere {
        radius: [f64; 2],
        /// Range of the center height above the floor, added to the radius.
        #[serde(default)]
        elevation: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub class: usize,
    pub primitive: Primitive,
    /// Target share of the scene's points.
    pub frequency: f64,
    pub color: [f64; 3],
    /// Inclusive range of instance counts.
    #[serde(default = "one_instance")]
    pub instances: [usize; 2],
}

fn one_instance() -> [usize; 2] {
    [1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub class_names: Vec<String>,
    pub room: RoomSpec,
    pub points: usize,
    /// Positional jitter, meters.
    pub noise: f64,
    pub color_noise: f64,
    pub recipes: Vec<Recipe>,
    #[serde(default)]
    pub seed: u64,
}

pub const CLASS_NAMES: [&str; 5] = ["floor", "wall", "table", "cabinet", "sphere"];

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Built-in distributions: `"pretrain-style"` and `"downstream-style"`.
    pub fn preset(name: &str) -> Result<Self, Error> {
        match name {
            "pretrain-style" => Ok(Self::pretrain_style()),
            "downstream-style" => Ok(Self::downstream_style()),
            other => Err(Error::Config(format!("unknown scene preset {other:?}"))),
        }
    }

    fn base(name: &str, recipes: Vec<Recipe>) -> Self {
        Self {
            name: name.into(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            room: RoomSpec { length: [4.0, 7.0], width: [3.5, 6.0], height: 2.6 },
            points: 320,
            noise: 0.01,
            color_noise: 0.06,
            recipes,
            seed: 0,
        }
    }

    fn pretrain_style() -> Self {
        Self::base(
            "pretrain-style",
            vec![
                Recipe { class: 0, primitive: Primitive::Floor, frequency: 0.45, color: [0.55, 0.42, 0.30], instances: [1, 1] },
                Recipe { class: 1, primitive: Primitive::Walls, frequency: 0.30, color: [0.80, 0.80, 0.78], instances: [1, 1] },
                Recipe {
                    class: 2,
                    primitive: Primitive::Box {
                        size_min: [0.8, 0.6, 0.04],
                        size_max: [1.6, 1.0, 0.06],
                        elevation: [0.70, 0.78],
                        against_wall: false,
                    },
                    frequency: 0.12,
                    color: [0.60, 0.45, 0.28],
                    instances: [1, 2],
                },
                Recipe {
                    class: 3,
                    primitive: Primitive::Box {
                        size_min: [0.5, 0.4, 1.2],
                        size_max: [1.0, 0.6, 2.0],
                        elevation: [0.0, 0.0],
                        against_wall: true,
                    },
                    frequency: 0.09,
                    color: [0.35, 0.35, 0.40],
                    instances: [1, 2],
                },
                Recipe {
                    class: 4,
                    primitive: Primitive::Sphere { radius: [0.15, 0.30], elevation: [0.0, 1.0] },
                    frequency: 0.04,
                    color: [0.85, 0.20, 0.15],
                    instances: [1, 2],
                },
            ],
        )
    }

    /// Same classes with different proportions, shapes and palette: low,
    /// wide tables, short cabinets, bigger spheres, and colors shuffled
    /// between classes.
    fn downstream_style() -> Self {
        let mut spec = Self::base(
            "downstream-style",
            vec![
                Recipe { class: 0, primitive: Primitive::Floor, frequency: 0.48, color: [0.70, 0.70, 0.72], instances: [1, 1] },
                Recipe { class: 1, primitive: Primitive::Walls, frequency: 0.22, color: [0.62, 0.50, 0.36], instances: [1, 1] },
                Recipe {
                    class: 2,
                    primitive: Primitive::Box {
                        size_min: [1.2, 0.8, 0.04],
                        size_max: [2.2, 1.4, 0.08],
                        elevation: [0.40, 0.55],
                        against_wall: false,
                    },
                    frequency: 0.10,
                    color: [0.45, 0.45, 0.50],
                    instances: [1, 2],
                },
                Recipe {
                    class: 3,
                    primitive: Primitive::Box {
                        size_min: [0.6, 0.4, 0.6],
                        size_max: [1.4, 0.6, 1.0],
                        elevation: [0.0, 0.0],
                        against_wall: true,
                    },
                    frequency: 0.13,
                    color: [0.58, 0.46, 0.33],
                    instances: [1, 3],
                },
                Recipe {
                    class: 4,
                    primitive: Primitive::Sphere { radius: [0.25, 0.45], elevation: [0.0, 0.3] },
                    frequency: 0.07,
                    color: [0.20, 0.35, 0.80],
                    instances: [1, 2],
                },
            ],
        );
        spec.seed = 1;
        spec
    }

    fn validate(&self) -> Result<(), Error> {
        if self.recipes.is_empty() {
            return Err(Error::Config(format!("scene spec {:?} has no recipes", self.name)));
        }
        if self.points == 0 {
            return Err(Error::Config("scene spec must request at least one point".into()));
        }
        let r = &self.room;
        let ok_range = |a: [f64; 2]| a[0] > 0.0 && a[0] <= a[1] && a[1].is_finite();
        if !ok_range(r.length) || !ok_range(r.width) || !(r.height > 0.0 && r.height.is_finite()) {
            return Err(Error::Config("room extents must be positive ranges".into()));
        }
        if !(self.noise >= 0.0 && self.color_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        for rc in &self.recipes {
            if rc.class >= self.class_names.len() {
                return Err(Error::Config(format!("recipe class {} has no name", rc.class)));
            }
            if !(rc.frequency >= 0.0 && rc.frequency.is_finite()) {
                return Err(Error::Config(format!("recipe frequency {} is invalid", rc.frequency)));
            }
            if rc.instances[0] == 0 || rc.instances[0] > rc.instances[1] {
                return Err(Error::Config("instance range must be a nonempty range of positive counts".into()));
            }
        }
        if self.recipes.iter().map(|r| r.frequency).sum::<f64>() <= 0.0 {
            return Err(Error::Config("recipe frequencies sum to zero".into()));
        }
        Ok(())
    }

    /// Largest-remainder split of `points` by recipe frequency.
    pub fn allocation(&self) -> Vec<usize> {
        let total: f64 = self.recipes.iter().map(|r| r.frequency).sum();
        let exact: Vec<f64> = self.recipes.iter().map(|r| r.frequency / total * self.points as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..exact.len()).collect();
        rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = self.points - counts.iter().sum::<usize>();
        for &i in rest.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }
}

/// Seed of scene `index` in a dataset drawn with `seed` (SplitMix64 mix).
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Room {
    lx: f64,
    ly: f64,
    h: f64,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud, Error> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = Room {
        lx: rng.random_range(spec.room.length[0]..=spec.room.length[1]),
        ly: rng.random_range(spec.room.width[0]..=spec.room.width[1]),
        h: spec.room.height,
    };
    let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let cjitter = Normal::new(0.0, spec.color_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut coords = Vec::with_capacity(spec.points);
    let mut features = Vec::with_capacity(spec.points * FEATURE_DIM);
    let mut labels = Vec::with_capacity(spec.points);
    for (recipe, count) in spec.recipes.iter().zip(spec.allocation()) {
        let instances = rng.random_range(recipe.instances[0]..=recipe.instances[1]);
        let shapes: Vec<Shape> = (0..instances).map(|_| Shape::place(&recipe.primitive, &room, &mut rng)).collect();
        let areas: Vec<f64> = shapes.iter().map(Shape::area).collect();
        let total_area: f64 = areas.iter().sum();
        for _ in 0..count {
            let shape = &shapes[pick(&areas, total_area, &mut rng)];
            let p = shape.sample(&mut rng);
            let p = [p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng), p[2] + jitter.sample(&mut rng)];
            coords.push(p);
            features.extend_from_slice(&p);
            for c in recipe.color {
                features.push((c + cjitter.sample(&mut rng)).clamp(0.0, 1.0));
            }
            labels.push(recipe.class as i64);
        }
    }
    PointCloud::new(coords, features, FEATURE_DIM, labels)
}

/// `count` scenes whose seeds derive from `seed`.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<PointCloud>, Error> {
    (0..count)
        .map(|i| {
            let mut s = spec.clone();
            s.seed = scene_seed(seed, i as u64);
            generate_scene(&s)
        })
        .collect()
}

fn pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// An axis-aligned rectangle in 3D: `origin + a * u + b * v`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
}

impl Rect {
    fn area(&self) -> f64 {
        let n = |w: [f64; 3]| (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        n(self.u) * n(self.v)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        std::array::from_fn(|i| self.origin[i] + a * self.u[i] + b * self.v[i])
    }
}

enum Shape {
    Rects(Vec<Rect>),
    Sphere { center: [f64; 3], radius: f64 },
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn box_faces(min: [f64; 3], size: [f64; 3]) -> Vec<Rect> {
    let [x, y, z] = min;
    let [sx, sy, sz] = size;
    let ex = [sx, 0.0, 0.0];
    let ey = [0.0, sy, 0.0];
    let ez = [0.0, 0.0, sz];
    vec![
        Rect { origin: [x, y, z], u: ex, v: ey },
        Rect { origin: [x, y, z + sz], u: ex, v: ey },
        Rect { origin: [x, y, z], u: ex, v: ez },
        Rect { origin: [x, y + sy, z], u: ex, v: ez },
        Rect { origin: [x, y, z], u: ey, v: ez },
        Rect { origin: [x + sx, y, z], u: ey, v: ez },
    ]
}

impl Shape {
    fn place(p: &Primitive, room: &Room, rng: &mut ChaCha8Rng) -> Shape {
        let Room { lx, ly, h } = *room;
        match p {
            Primitive::Floor => Shape::Rects(vec![Rect { origin: [0.0; 3], u: [lx, 0.0, 0.0], v: [0.0, ly, 0.0] }]),
            Primitive::Walls => Shape::Rects(vec![
                Rect { origin: [0.0; 3], u: [lx, 0.0, 0.0], v: [0.0, 0.0, h] },
                Rect { origin: [0.0, ly, 0.0], u: [lx, 0.0, 0.0], v: [0.0, 0.0, h] },
                Rect { origin: [0.0; 3], u: [0.0, ly, 0.0], v: [0.0, 0.0, h] },
                Rect { origin: [lx, 0.0, 0.0], u: [0.0, ly, 0.0], v: [0.0, 0.0, h] },
            ]),
            Primitive::Box { size_min, size_max, elevation, against_wall } => {
                let mut size: [f64; 3] = std::array::from_fn(|i| uniform(rng, [size_min[i], size_max[i]]));
                size[0] = size[0].min(lx);
                size[1] = size[1].min(ly);
                let z = uniform(rng, *elevation);
                let mut min = [rng.random_range(0.0..=(lx - size[0])), rng.random_range(0.0..=(ly - size[1])), z];
                if *against_wall {
                    match rng.random_range(0..4) {
                        0 => min[0] = 0.0,
                        1 => min[0] = lx - size[0],
                        2 => min[1] = 0.0,
                        _ => min[1] = ly - size[1],
                    }
                }
                Shape::Rects(box_faces(min, size))
            }
            Primitive::Sphere { radius, elevation } => {
                let r = uniform(rng, *radius).min(lx / 2.0).min(ly / 2.0);
                let center = [rng.random_range(r..=(lx - r)), rng.random_range(r..=(ly - r)), r + uniform(rng, *elevation)];
                Shape::Sphere { center, radius: r }
            }
        }
    }

    fn area(&self) -> f64 {
        match self {
            Shape::Rects(rects) => rects.iter().map(Rect::area).sum(),
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Shape::Rects(rects) => {
                let areas: Vec<f64> = rects.iter().map(Rect::area).collect();
                let total = areas.iter().sum();
                rects[pick(&areas, total, rng)].sample(rng)
            }
            Shape::Sphere { center, radius } => {
                // uniform on the sphere: z uniform in [-1, 1], azimuth uniform
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                [center[0] + radius * s * phi.cos(), center[1] + radius * s * phi.sin(), center[2] + radius * z]
            }
        }
    }
}
