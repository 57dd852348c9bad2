//! Space-filling curve codecs over a cubic `2^b` grid and the point
//! serialization built on top of them.
//!
//! Two curves are provided: the Morton (Z-order) curve, formed by bit
//! interleaving with `x` in the least-significant position of every triad,
//! and the Hilbert curve, computed with Skilling's transpose algorithm. Each
//! can be applied to axis-permuted coordinates, which yields the "trans"
//! variants used to diversify neighborhoods between layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported bits per axis; `3 * 21 = 63` still fits a `u64` code.
pub const MAX_ORDER_BITS: u32 = 21;

/// Largest order accepted by [`quantize`].
pub const MAX_QUANTIZE_BITS: u32 = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfcError {
    #[error("invalid coordinate: point {index} has a non-finite component")]
    InvalidCoordinate { index: usize },
    #[error("coordinate out of range: {coord:?} does not fit {order_bits} bits per axis")]
    CoordinateOutOfRange { coord: GridCoord, order_bits: u32 },
    #[error("code {code} out of range for {order_bits} bits per axis")]
    CodeOutOfRange { code: u64, order_bits: u32 },
    #[error("order_bits must be in [1, {max}], got {got}")]
    InvalidOrderBits { got: u32, max: u32 },
    #[error("axis permutation {0:?} is not a bijection on (x, y, z)")]
    InvalidAxisPerm([usize; 3]),
    #[error("unknown curve {0:?}")]
    UnknownCurve(String),
    #[error("cannot serialize an empty point set")]
    Empty,
}

/// Integer cell coordinate on a `2^b` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl GridCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    fn as_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    fn from_array(a: [u32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    fn check(self, order_bits: u32) -> Result<(), SfcError> {
        check_bits(order_bits, MAX_ORDER_BITS)?;
        let limit = 1u64 << order_bits;
        if self.as_array().iter().any(|&v| u64::from(v) >= limit) {
            return Err(SfcError::CoordinateOutOfRange { coord: self, order_bits });
        }
        Ok(())
    }

    /// Manhattan distance between two cells.
    pub fn l1(self, other: GridCoord) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z)
    }
}

fn check_bits(order_bits: u32, max: u32) -> Result<(), SfcError> {
    if order_bits == 0 || order_bits > max {
        return Err(SfcError::InvalidOrderBits { got: order_bits, max });
    }
    Ok(())
}

fn check_code(code: u64, order_bits: u32) -> Result<(), SfcError> {
    check_bits(order_bits, MAX_ORDER_BITS)?;
    if code >> (3 * order_bits) != 0 {
        return Err(SfcError::CodeOutOfRange { code, order_bits });
    }
    Ok(())
}

/// A permutation of the three axes: the permuted coordinate is
/// `(c[p[0]], c[p[1]], c[p[2]])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AxisPerm([usize; 3]);

impl AxisPerm {
    pub const IDENTITY: AxisPerm = AxisPerm([0, 1, 2]);
    /// Swap of x and y, the permutation used by the default "permuted" curves.
    pub const YXZ: AxisPerm = AxisPerm([1, 0, 2]);

    pub fn new(p: [usize; 3]) -> Result<Self, SfcError> {
        let mut seen = [false; 3];
        for &a in &p {
            if a > 2 || seen[a] {
                return Err(SfcError::InvalidAxisPerm(p));
            }
            seen[a] = true;
        }
        Ok(Self(p))
    }

    pub fn axes(self) -> [usize; 3] {
        self.0
    }

    pub fn apply(self, c: GridCoord) -> GridCoord {
        let a = c.as_array();
        GridCoord::from_array([a[self.0[0]], a[self.0[1]], a[self.0[2]]])
    }

    pub fn invert(self, c: GridCoord) -> GridCoord {
        let a = c.as_array();
        let mut out = [0u32; 3];
        for (i, &src) in self.0.iter().enumerate() {
            out[src] = a[i];
        }
        GridCoord::from_array(out)
    }

    fn letters(self) -> String {
        self.0.iter().map(|&a| ['x', 'y', 'z'][a]).collect()
    }

    fn parse_letters(s: &str) -> Result<Self, SfcError> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 {
            return Err(SfcError::UnknownCurve(s.to_string()));
        }
        let mut p = [0usize; 3];
        for (slot, ch) in p.iter_mut().zip(chars) {
            *slot = match ch {
                'x' => 0,
                'y' => 1,
                'z' => 2,
                _ => return Err(SfcError::UnknownCurve(s.to_string())),
            };
        }
        Self::new(p)
    }
}

/// Which curve orders the points, optionally on axis-permuted coordinates.
///
/// Text form (used in JSON configs): `zorder`, `hilbert`, or either followed
/// by `:` and an axis order such as `zorder:yxz`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CurveKind {
    ZOrder,
    ZOrderPermuted(AxisPerm),
    Hilbert,
    HilbertPermuted(AxisPerm),
}

impl CurveKind {
    /// Mixed schedule cycled over successive insertion sites.
    pub const MIXED: [CurveKind; 4] = [
        CurveKind::Hilbert,
        CurveKind::HilbertPermuted(AxisPerm::YXZ),
        CurveKind::ZOrder,
        CurveKind::ZOrderPermuted(AxisPerm::YXZ),
    ];

    pub fn axis_perm(self) -> AxisPerm {
        match self {
            CurveKind::ZOrder | CurveKind::Hilbert => AxisPerm::IDENTITY,
            CurveKind::ZOrderPermuted(p) | CurveKind::HilbertPermuted(p) => p,
        }
    }

    fn is_hilbert(self) -> bool {
        matches!(self, CurveKind::Hilbert | CurveKind::HilbertPermuted(_))
    }

    /// Curve code of a cell: the base curve applied to the axis-permuted cell.
    pub fn encode(self, c: GridCoord, order_bits: u32) -> Result<u64, SfcError> {
        let p = self.axis_perm().apply(c);
        if self.is_hilbert() {
            hilbert_encode(p, order_bits)
        } else {
            morton_encode(p, order_bits)
        }
    }

    pub fn decode(self, code: u64, order_bits: u32) -> Result<GridCoord, SfcError> {
        let p = if self.is_hilbert() {
            hilbert_decode(code, order_bits)?
        } else {
            morton_decode(code, order_bits)?
        };
        Ok(self.axis_perm().invert(p))
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveKind::ZOrder => write!(f, "zorder"),
            CurveKind::Hilbert => write!(f, "hilbert"),
            CurveKind::ZOrderPermuted(p) => write!(f, "zorder:{}", p.letters()),
            CurveKind::HilbertPermuted(p) => write!(f, "hilbert:{}", p.letters()),
        }
    }
}

impl FromStr for CurveKind {
    type Err = SfcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, perm) = match s.split_once(':') {
            Some((b, p)) => (b, Some(AxisPerm::parse_letters(p)?)),
            None => (s, None),
        };
        match (base, perm) {
            ("zorder", None) => Ok(CurveKind::ZOrder),
            ("hilbert", None) => Ok(CurveKind::Hilbert),
            ("zorder", Some(p)) => Ok(CurveKind::ZOrderPermuted(p)),
            ("hilbert", Some(p)) => Ok(CurveKind::HilbertPermuted(p)),
            _ => Err(SfcError::UnknownCurve(s.to_string())),
        }
    }
}

impl TryFrom<String> for CurveKind {
    type Error = SfcError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CurveKind> for String {
    fn from(c: CurveKind) -> String {
        c.to_string()
    }
}

/// Axis-aligned bounding box in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Tight box around the points. Errors on non-finite input.
    pub fn from_points(coords: &[[f64; 3]]) -> Result<Self, SfcError> {
        if coords.is_empty() {
            return Err(SfcError::Empty);
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for (i, p) in coords.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(SfcError::InvalidCoordinate { index: i });
            }
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Map real coordinates to cells of a `2^b` grid spanning `bbox`.
///
/// An axis with zero extent maps every point to cell 0 on that axis.
pub fn quantize(coords: &[[f64; 3]], order_bits: u32, bbox: &Aabb) -> Result<Vec<GridCoord>, SfcError> {
    check_bits(order_bits, MAX_QUANTIZE_BITS)?;
    let cells = f64::from(1u32 << order_bits);
    let top = (1u32 << order_bits) - 1;
    let extent = bbox.extent();
    coords
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(SfcError::InvalidCoordinate { index: i });
            }
            let mut q = [0u32; 3];
            for a in 0..3 {
                if extent[a] > 0.0 {
                    let t = ((p[a] - bbox.min[a]) / extent[a] * cells).floor();
                    q[a] = if t <= 0.0 { 0 } else { (t as u64).min(u64::from(top)) as u32 };
                }
            }
            Ok(GridCoord::from_array(q))
        })
        .collect()
}

// Spread the low 21 bits of `v` so that two zero bits follow each one.
fn spread3(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact3(v: u64) -> u64 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x
}

pub fn morton_encode(c: GridCoord, order_bits: u32) -> Result<u64, SfcError> {
    c.check(order_bits)?;
    Ok(spread3(u64::from(c.x)) | (spread3(u64::from(c.y)) << 1) | (spread3(u64::from(c.z)) << 2))
}

pub fn morton_decode(code: u64, order_bits: u32) -> Result<GridCoord, SfcError> {
    check_code(code, order_bits)?;
    Ok(GridCoord::new(
        compact3(code) as u32,
        compact3(code >> 1) as u32,
        compact3(code >> 2) as u32,
    ))
}

/// Hilbert index of a cell. Consecutive indices are face-adjacent cells and
/// index 0 is the origin.
pub fn hilbert_encode(c: GridCoord, order_bits: u32) -> Result<u64, SfcError> {
    c.check(order_bits)?;
    let mut x = c.as_array();
    axes_to_transpose(&mut x, order_bits);
    // x[0] carries the most significant bit of every triad.
    let mut code = 0u64;
    for bit in (0..order_bits).rev() {
        for v in &x {
            code = (code << 1) | u64::from((v >> bit) & 1);
        }
    }
    Ok(code)
}

pub fn hilbert_decode(code: u64, order_bits: u32) -> Result<GridCoord, SfcError> {
    check_code(code, order_bits)?;
    let mut x = [0u32; 3];
    for bit in 0..order_bits {
        let triad = (code >> (3 * bit)) & 0b111;
        x[0] |= (((triad >> 2) & 1) as u32) << bit;
        x[1] |= (((triad >> 1) & 1) as u32) << bit;
        x[2] |= ((triad & 1) as u32) << bit;
    }
    transpose_to_axes(&mut x, order_bits);
    Ok(GridCoord::from_array(x))
}

fn axes_to_transpose(x: &mut [u32; 3], bits: u32) {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], bits: u32) {
    let n = 2u64 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u64;
    while q != n {
        let qq = q as u32;
        let p = qq - 1;
        for i in (0..3).rev() {
            if x[i] & qq != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

/// A curve-induced ordering of a point set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedOrder {
    /// `perm[k]` is the original index of the `k`-th serialized point.
    pub perm: Vec<usize>,
    /// `inv_perm[i]` is the serialized position of original point `i`.
    pub inv_perm: Vec<usize>,
    /// Curve code of each serialized point, aligned with `perm`.
    pub codes: Vec<u64>,
    pub curve: CurveKind,
    pub order_bits: u32,
}

impl SerializedOrder {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Identity ordering, used when grouping is requested without a curve.
    pub fn identity(n: usize, curve: CurveKind, order_bits: u32) -> Self {
        Self {
            perm: (0..n).collect(),
            inv_perm: (0..n).collect(),
            codes: vec![0; n],
            curve,
            order_bits,
        }
    }
}

/// Sort points by the curve code of their quantized coordinate, breaking
/// ties by ascending original index. The grid spans the points' own box.
pub fn serialize(coords: &[[f64; 3]], curve: CurveKind, order_bits: u32) -> Result<SerializedOrder, SfcError> {
    let bbox = Aabb::from_points(coords)?;
    let cells = quantize(coords, order_bits, &bbox)?;
    let mut keyed = cells
        .iter()
        .enumerate()
        .map(|(i, &c)| curve.encode(c, order_bits).map(|code| (code, i)))
        .collect::<Result<Vec<_>, _>>()?;
    keyed.sort_unstable();
    let mut inv_perm = vec![0; keyed.len()];
    for (k, &(_, i)) in keyed.iter().enumerate() {
        inv_perm[i] = k;
    }
    Ok(SerializedOrder {
        perm: keyed.iter().map(|&(_, i)| i).collect(),
        codes: keyed.iter().map(|&(c, _)| c).collect(),
        inv_perm,
        curve,
        order_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Bit-by-bit reference interleaving, independent of the magic-number path.
    fn morton_oracle(c: GridCoord, b: u32) -> u64 {
        let mut code = 0u64;
        for j in 0..b {
            code |= u64::from((c.x >> j) & 1) << (3 * j);
            code |= u64::from((c.y >> j) & 1) << (3 * j + 1);
            code |= u64::from((c.z >> j) & 1) << (3 * j + 2);
        }
        code
    }

    fn all_cells(b: u32) -> impl Iterator<Item = GridCoord> {
        let n = 1u32 << b;
        (0..n).flat_map(move |x| (0..n).flat_map(move |y| (0..n).map(move |z| GridCoord::new(x, y, z))))
    }

    #[test]
    fn quantize_corners_and_midpoint() {
        let bbox = Aabb { min: [0.0; 3], max: [1.0; 3] };
        assert_eq!(quantize(&[[0.0; 3]], 4, &bbox).unwrap()[0], GridCoord::new(0, 0, 0));
        assert_eq!(quantize(&[[1.0; 3]], 4, &bbox).unwrap()[0], GridCoord::new(15, 15, 15));
        // floor(0.5 * 2) = 1 on every axis
        let expect = (0.5f64 * 2.0).floor() as u32;
        assert_eq!(quantize(&[[0.5; 3]], 1, &bbox).unwrap()[0], GridCoord::new(expect, expect, expect));
    }

    #[test]
    fn quantize_degenerate_axis_and_bad_input() {
        let bbox = Aabb { min: [0.0, 0.0, 2.0], max: [1.0, 1.0, 2.0] };
        let q = quantize(&[[0.9, 0.9, 2.0]], 3, &bbox).unwrap();
        assert_eq!(q[0], GridCoord::new(7, 7, 0));
        let err = quantize(&[[0.0, f64::NAN, 2.0]], 3, &bbox).unwrap_err();
        assert!(err.to_string().contains("invalid coordinate"));
        assert!(quantize(&[[0.0; 3]], 0, &bbox).is_err());
        assert!(quantize(&[[0.0; 3]], 21, &bbox).is_err());
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode(GridCoord::new(0, 0, 0), 1).unwrap(), 0);
        assert_eq!(morton_encode(GridCoord::new(1, 0, 0), 1).unwrap(), 1);
        assert_eq!(morton_encode(GridCoord::new(0, 1, 0), 1).unwrap(), 2);
        assert_eq!(morton_encode(GridCoord::new(0, 0, 1), 1).unwrap(), 4);
        let c = GridCoord::new(2, 3, 1);
        assert_eq!(morton_oracle(c, 2), 30);
        assert_eq!(morton_encode(c, 2).unwrap(), 30);
        assert_eq!(morton_decode(30, 2).unwrap(), c);
        assert_eq!(morton_decode(7, 1).unwrap(), GridCoord::new(1, 1, 1));
        assert_eq!(morton_decode(0, 3).unwrap(), GridCoord::new(0, 0, 0));
    }

    #[test]
    fn morton_matches_oracle_exhaustively() {
        for b in 1..=4 {
            for c in all_cells(b) {
                assert_eq!(morton_encode(c, b).unwrap(), morton_oracle(c, b));
            }
        }
    }

    #[test]
    fn out_of_range_errors() {
        let err = morton_encode(GridCoord::new(4, 0, 0), 2).unwrap_err();
        assert!(err.to_string().contains("coordinate out of range"));
        assert!(hilbert_encode(GridCoord::new(0, 0, 8), 3).is_err());
        assert!(morton_decode(64, 2).is_err());
        assert!(hilbert_decode(512, 3).is_err());
        assert!(morton_decode(511, 3).is_ok());
    }

    #[test]
    fn hilbert_origin_and_bijection() {
        assert_eq!(hilbert_encode(GridCoord::new(0, 0, 0), 5).unwrap(), 0);
        assert_eq!(hilbert_decode(0, 5).unwrap(), GridCoord::new(0, 0, 0));
        let mut seen = vec![false; 512];
        for c in all_cells(3) {
            let code = hilbert_encode(c, 3).unwrap() as usize;
            assert!(!seen[code]);
            seen[code] = true;
            assert_eq!(hilbert_decode(code as u64, 3).unwrap(), c);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn hilbert_order_one_visits_every_corner() {
        let visited: std::collections::BTreeSet<_> =
            (0..8).map(|k| hilbert_decode(k, 1).unwrap()).collect();
        let corners: std::collections::BTreeSet<_> = all_cells(1).collect();
        assert_eq!(visited, corners);
    }

    #[test]
    fn hilbert_consecutive_codes_are_adjacent() {
        for b in 1..=4u32 {
            let mut prev = hilbert_decode(0, b).unwrap();
            for k in 1..(1u64 << (3 * b)) {
                let cur = hilbert_decode(k, b).unwrap();
                assert_eq!(prev.l1(cur), 1, "b={b} k={k}");
                prev = cur;
            }
        }
    }

    #[test]
    fn permuted_curves_equal_base_on_permuted_cells() {
        let perm = AxisPerm::new([2, 0, 1]).unwrap();
        for c in all_cells(2) {
            let pc = perm.apply(c);
            assert_eq!(
                CurveKind::HilbertPermuted(perm).encode(c, 2).unwrap(),
                hilbert_encode(pc, 2).unwrap()
            );
            assert_eq!(CurveKind::ZOrderPermuted(perm).encode(c, 2).unwrap(), morton_encode(pc, 2).unwrap());
            assert_eq!(perm.invert(pc), c);
            let code = CurveKind::HilbertPermuted(perm).encode(c, 2).unwrap();
            assert_eq!(CurveKind::HilbertPermuted(perm).decode(code, 2).unwrap(), c);
        }
        assert!(AxisPerm::new([0, 0, 1]).is_err());
    }

    #[test]
    fn curve_names_round_trip() {
        for c in CurveKind::MIXED {
            assert_eq!(c.to_string().parse::<CurveKind>().unwrap(), c);
        }
        assert_eq!("hilbert:yxz".parse::<CurveKind>().unwrap(), CurveKind::HilbertPermuted(AxisPerm::YXZ));
        assert!("peano".parse::<CurveKind>().is_err());
        assert!("zorder:xxz".parse::<CurveKind>().is_err());
    }

    #[test]
    fn serialize_examples() {
        let one = serialize(&[[0.3, 0.2, 0.1]], CurveKind::ZOrder, 10).unwrap();
        assert_eq!(one.perm, vec![0]);

        // With a unit box at b=1, (1,0,1) has Morton code 5 and (0,1,0) code 2.
        let pts = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let order = serialize(&pts, CurveKind::ZOrder, 1).unwrap();
        assert_eq!(order.codes, vec![2, 5]);
        assert_eq!(order.perm, vec![1, 0]);
        assert_eq!(order.inv_perm, vec![1, 0]);

        let same = [[0.5, 0.5, 0.5]; 3];
        assert_eq!(serialize(&same, CurveKind::Hilbert, 4).unwrap().perm, vec![0, 1, 2]);

        assert_eq!(serialize(&[], CurveKind::Hilbert, 4).unwrap_err(), SfcError::Empty);
    }

    proptest! {
        #[test]
        fn serialize_returns_valid_inverse_permutations(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..200),
            which in 0usize..4,
            bits in 1u32..=12,
        ) {
            let curve = CurveKind::MIXED[which];
            let order = serialize(&pts, curve, bits).unwrap();
            let mut sorted = order.perm.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..pts.len()).collect::<Vec<_>>());
            for (k, &i) in order.perm.iter().enumerate() {
                prop_assert_eq!(order.inv_perm[i], k);
            }
            prop_assert!(order.codes.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(serialize(&pts, curve, bits).unwrap(), order);
        }

        #[test]
        fn codecs_round_trip_at_high_order(x in 0u32..(1 << 21), y in 0u32..(1 << 21), z in 0u32..(1 << 21)) {
            let c = GridCoord::new(x, y, z);
            prop_assert_eq!(morton_decode(morton_encode(c, 21).unwrap(), 21).unwrap(), c);
            prop_assert_eq!(hilbert_decode(hilbert_encode(c, 21).unwrap(), 21).unwrap(), c);
        }
    }
}
