//! Phase spaces, the parametric map menu, semigroup words and iterated
//! function systems.
//!
//! Points live in `[0, 1)` per coordinate. Circle maps in the menu are
//! orientation-preserving lifts `g: R -> R` with `g(t + 1) = g(t) + 1`; the
//! lift is what the exact-interval Ulam method and the arc-image code use.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bisection stops once the bracket is this narrow; Newton polishes from there.
const BISECTION_WIDTH: f64 = 1e-8;
const NEWTON_STEPS: usize = 10;
const BISECTION_CAP: usize = 200;
/// Required accuracy of an iterative inverse, in circle distance.
pub const INVERSE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseSpace {
    Circle,
    Torus2,
}

impl PhaseSpace {
    pub fn dim(self) -> usize {
        match self {
            PhaseSpace::Circle => 1,
            PhaseSpace::Torus2 => 2,
        }
    }
}

impl fmt::Display for PhaseSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseSpace::Circle => f.write_str("circle"),
            PhaseSpace::Torus2 => f.write_str("torus2"),
        }
    }
}

/// Reduce a real number into `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    // rem_euclid rounds tiny negative inputs up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// `min(|x - y|, 1 - |x - y|)` for coordinates in `[0, 1)`.
#[inline]
pub fn circle_distance(x: f64, y: f64) -> f64 {
    let d = wrap(x - y);
    d.min(1.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Point {
    Circle(f64),
    Torus([f64; 2]),
}

impl Point {
    pub fn circle(x: f64) -> Self {
        Point::Circle(wrap(x))
    }

    pub fn torus(x: f64, y: f64) -> Self {
        Point::Torus([wrap(x), wrap(y)])
    }

    pub fn space(&self) -> PhaseSpace {
        match self {
            Point::Circle(_) => PhaseSpace::Circle,
            Point::Torus(_) => PhaseSpace::Torus2,
        }
    }

    /// Coordinates padded to two entries (`y = 0` on the circle).
    pub fn coords(&self) -> [f64; 2] {
        match *self {
            Point::Circle(x) => [x, 0.0],
            Point::Torus(c) => c,
        }
    }

    /// Circle distance, or the sup over coordinates of circle distances on
    /// the torus.
    pub fn distance(&self, other: &Point) -> Result<f64> {
        match (self, other) {
            (Point::Circle(x), Point::Circle(y)) => Ok(circle_distance(*x, *y)),
            (Point::Torus(a), Point::Torus(b)) => {
                Ok(circle_distance(a[0], b[0]).max(circle_distance(a[1], b[1])))
            }
            _ => Err(Error::usage("distance between points of different phase spaces")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }
}

fn default_freq() -> u32 {
    1
}

/// The parametric menu of invertible maps.
///
/// `CircleDiffeo { a, b, freq }` is `x -> x + a + b / (2 pi freq) * sin(2 pi freq x)`
/// with derivative `1 + b cos(2 pi freq x)`, so `|b| < 1` keeps it a
/// diffeomorphism. `freq = 2` gives maps that fix `{0, 1/4, 1/2, 3/4}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MapFamily {
    Rotation {
        alpha: f64,
    },
    CircleDiffeo {
        a: f64,
        b: f64,
        #[serde(default = "default_freq")]
        freq: u32,
    },
    ToralAutomorphism {
        matrix: [[i64; 2]; 2],
    },
    ToralTranslation {
        v: [f64; 2],
    },
}

impl MapFamily {
    pub fn circle_diffeo(a: f64, b: f64) -> Self {
        MapFamily::CircleDiffeo { a, b, freq: 1 }
    }

    pub fn space(&self) -> PhaseSpace {
        match self {
            MapFamily::Rotation { .. } | MapFamily::CircleDiffeo { .. } => PhaseSpace::Circle,
            MapFamily::ToralAutomorphism { .. } | MapFamily::ToralTranslation { .. } => {
                PhaseSpace::Torus2
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64, name: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite, got {x}")))
            }
        };
        match *self {
            MapFamily::Rotation { alpha } => finite(alpha, "rotation alpha"),
            MapFamily::CircleDiffeo { a, b, freq } => {
                finite(a, "circle-diffeo a")?;
                finite(b, "circle-diffeo b")?;
                if b.abs() >= 1.0 {
                    return Err(Error::invalid(format!(
                        "circle-diffeo requires |b| < 1, got b = {b}"
                    )));
                }
                if freq == 0 {
                    return Err(Error::invalid("circle-diffeo freq must be at least 1"));
                }
                Ok(())
            }
            MapFamily::ToralAutomorphism { matrix } => {
                let det = det2(&matrix);
                if det.abs() != 1 {
                    return Err(Error::invalid(format!(
                        "toral automorphism requires |det L| = 1, got det = {det}"
                    )));
                }
                Ok(())
            }
            MapFamily::ToralTranslation { v } => {
                finite(v[0], "translation v1")?;
                finite(v[1], "translation v2")
            }
        }
    }

    pub fn volume_preserving(&self) -> bool {
        match *self {
            MapFamily::CircleDiffeo { b, .. } => b == 0.0,
            _ => true,
        }
    }

    /// Continuous parameters in a fixed order; automorphisms have none.
    pub fn continuous_params(&self) -> Vec<f64> {
        match *self {
            MapFamily::Rotation { alpha } => vec![alpha],
            MapFamily::CircleDiffeo { a, b, .. } => vec![a, b],
            MapFamily::ToralAutomorphism { .. } => Vec::new(),
            MapFamily::ToralTranslation { v } => vec![v[0], v[1]],
        }
    }

    /// Same family with its continuous parameters replaced, in the order of
    /// [`continuous_params`](Self::continuous_params).
    pub fn with_continuous_params(&self, params: &[f64]) -> Result<MapFamily> {
        let want = self.continuous_params().len();
        if params.len() != want {
            return Err(Error::usage(format!(
                "expected {want} continuous parameters, got {}",
                params.len()
            )));
        }
        let out = match *self {
            MapFamily::Rotation { .. } => MapFamily::Rotation { alpha: params[0] },
            MapFamily::CircleDiffeo { freq, .. } => MapFamily::CircleDiffeo {
                a: params[0],
                b: params[1],
                freq,
            },
            f @ MapFamily::ToralAutomorphism { .. } => f,
            MapFamily::ToralTranslation { .. } => MapFamily::ToralTranslation {
                v: [params[0], params[1]],
            },
        };
        out.validate()?;
        Ok(out)
    }

    /// Forward lift on the real line (circle families only).
    #[inline]
    pub(crate) fn lift_forward(&self, t: f64) -> f64 {
        match *self {
            MapFamily::Rotation { alpha } => t + alpha,
            MapFamily::CircleDiffeo { a, b, freq } => {
                let q = freq as f64;
                t + a + b / (TAU * q) * (TAU * q * t).sin()
            }
            _ => unreachable!("lift of a torus map"),
        }
    }

    /// Inverse lift: exact for rotations, bisection then Newton for
    /// circle diffeomorphisms.
    pub(crate) fn lift_inverse(&self, t: f64) -> Result<f64> {
        match *self {
            MapFamily::Rotation { alpha } => Ok(t - alpha),
            MapFamily::CircleDiffeo { a, b, freq } => {
                let q = freq as f64;
                let g = |s: f64| s + a + b / (TAU * q) * (TAU * q * s).sin();
                let dg = |s: f64| 1.0 + b * (TAU * q * s).cos();
                // |g(s) - s - a| <= |b| / (2 pi q) brackets the root.
                let r = b.abs() / (TAU * q) + 1e-12;
                let mut lo = t - a - r;
                let mut hi = t - a + r;
                let mut steps = 0;
                while hi - lo > BISECTION_WIDTH && steps < BISECTION_CAP {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) < t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    steps += 1;
                }
                let mut s = 0.5 * (lo + hi);
                for _ in 0..NEWTON_STEPS {
                    let res = g(s) - t;
                    if res == 0.0 {
                        break;
                    }
                    let next = s - res / dg(s);
                    if !(lo - BISECTION_WIDTH..=hi + BISECTION_WIDTH).contains(&next) {
                        break;
                    }
                    s = next;
                }
                let residual = (g(s) - t).abs();
                if residual > INVERSE_TOL * t.abs().max(1.0) {
                    return Err(Error::NumericalFailure {
                        what: format!("inverse of circle-diffeo(a={a}, b={b}) at {t}"),
                        residual,
                    });
                }
                Ok(s)
            }
            _ => unreachable!("lift of a torus map"),
        }
    }

    #[inline]
    pub(crate) fn forward(&self, p: Point) -> Point {
        match (*self, p) {
            (MapFamily::Rotation { .. } | MapFamily::CircleDiffeo { .. }, Point::Circle(x)) => {
                Point::Circle(wrap(self.lift_forward(x)))
            }
            (MapFamily::ToralAutomorphism { matrix: m }, Point::Torus([x, y])) => Point::Torus([
                wrap(m[0][0] as f64 * x + m[0][1] as f64 * y),
                wrap(m[1][0] as f64 * x + m[1][1] as f64 * y),
            ]),
            (MapFamily::ToralTranslation { v }, Point::Torus([x, y])) => {
                Point::Torus([wrap(x + v[0]), wrap(y + v[1])])
            }
            _ => unreachable!("phase space checked by caller"),
        }
    }

    pub(crate) fn backward(&self, p: Point) -> Result<Point> {
        Ok(match (*self, p) {
            (MapFamily::Rotation { .. } | MapFamily::CircleDiffeo { .. }, Point::Circle(y)) => {
                Point::Circle(wrap(self.lift_inverse(y)?))
            }
            (MapFamily::ToralAutomorphism { matrix }, Point::Torus([x, y])) => {
                let m = inverse2(&matrix);
                Point::Torus([
                    wrap(m[0][0] as f64 * x + m[0][1] as f64 * y),
                    wrap(m[1][0] as f64 * x + m[1][1] as f64 * y),
                ])
            }
            (MapFamily::ToralTranslation { v }, Point::Torus([x, y])) => {
                Point::Torus([wrap(x - v[0]), wrap(y - v[1])])
            }
            _ => unreachable!("phase space checked by caller"),
        })
    }
}

fn det2(m: &[[i64; 2]; 2]) -> i64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Integer inverse of a unimodular 2x2 matrix.
pub fn inverse2(m: &[[i64; 2]; 2]) -> [[i64; 2]; 2] {
    let det = det2(m);
    [
        [det * m[1][1], -det * m[0][1]],
        [-det * m[1][0], det * m[0][0]],
    ]
}

/// A validated map from the menu together with the direction it is used in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothMap {
    pub family: MapFamily,
    pub direction: Direction,
}

impl SmoothMap {
    pub fn new(family: MapFamily) -> Result<Self> {
        family.validate()?;
        Ok(SmoothMap {
            family,
            direction: Direction::Forward,
        })
    }

    /// The same map used in the opposite direction.
    pub fn inverse(&self) -> Self {
        SmoothMap {
            family: self.family,
            direction: self.direction.flip(),
        }
    }

    pub fn space(&self) -> PhaseSpace {
        self.family.space()
    }

    fn check(&self, p: &Point) -> Result<()> {
        if p.space() != self.space() {
            return Err(Error::usage(format!(
                "point on {} given to a map on {}",
                p.space(),
                self.space()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: Point) -> Result<Point> {
        self.check(&x)?;
        match self.direction {
            Direction::Forward => Ok(self.family.forward(x)),
            Direction::Inverse => self.family.backward(x),
        }
    }

    pub fn apply_inverse(&self, y: Point) -> Result<Point> {
        self.inverse().apply(y)
    }

    /// Lift of this map (in its direction) on the real line; circle maps only.
    pub fn lift(&self, t: f64) -> Result<f64> {
        if self.space() != PhaseSpace::Circle {
            return Err(Error::usage("lifts exist only for circle maps"));
        }
        match self.direction {
            Direction::Forward => Ok(self.family.lift_forward(t)),
            Direction::Inverse => self.family.lift_inverse(t),
        }
    }

    /// Jacobian determinant at `x`.
    pub fn derivative(&self, x: Point) -> Result<f64> {
        self.check(&x)?;
        let forward_at = |p: Point| match (self.family, p) {
            (MapFamily::CircleDiffeo { b, freq, .. }, Point::Circle(t)) => {
                1.0 + b * (TAU * freq as f64 * t).cos()
            }
            (MapFamily::ToralAutomorphism { matrix }, _) => det2(&matrix).abs() as f64,
            _ => 1.0,
        };
        match self.direction {
            Direction::Forward => Ok(forward_at(x)),
            Direction::Inverse => {
                let pre = self.family.backward(x)?;
                Ok(1.0 / forward_at(pre))
            }
        }
    }

    pub fn volume_preserving(&self) -> bool {
        self.family.volume_preserving()
    }
}

/// One letter of a semigroup word: a map index (0-based) and a direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter {
    pub index: usize,
    pub direction: Direction,
}

impl Letter {
    pub fn forward(index: usize) -> Self {
        Letter {
            index,
            direction: Direction::Forward,
        }
    }

    pub fn inverse(index: usize) -> Self {
        Letter {
            index,
            direction: Direction::Inverse,
        }
    }
}

/// A nonempty word, applied left to right: `[f1, f2]` means `f2(f1(x))`.
///
/// Serialized as a list of 1-based signed integers, `+i` for `f_i` and `-i`
/// for its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Word {
    letters: Vec<Letter>,
}

impl Word {
    pub fn new(letters: Vec<Letter>) -> Result<Self> {
        if letters.is_empty() {
            return Err(Error::usage("words have length at least 1"));
        }
        Ok(Word { letters })
    }

    /// Word of forward letters from 0-based indices.
    pub fn forward(indices: &[usize]) -> Result<Self> {
        Word::new(indices.iter().map(|&i| Letter::forward(i)).collect())
    }

    /// Word of inverse letters from 0-based indices.
    pub fn inverse(indices: &[usize]) -> Result<Self> {
        Word::new(indices.iter().map(|&i| Letter::inverse(i)).collect())
    }

    /// Parse the signed 1-based encoding.
    pub fn from_signed(code: &[i64]) -> Result<Self> {
        let letters = code
            .iter()
            .map(|&c| match c {
                0 => Err(Error::usage("word symbol 0 is not a map index")),
                c if c > 0 => Ok(Letter::forward(c as usize - 1)),
                c => Ok(Letter::inverse((-c) as usize - 1)),
            })
            .collect::<Result<Vec<_>>>()?;
        Word::new(letters)
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.letters
            .iter()
            .map(|l| match l.direction {
                Direction::Forward => l.index as i64 + 1,
                Direction::Inverse => -(l.index as i64 + 1),
            })
            .collect()
    }

    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_forward(&self) -> bool {
        self.letters.iter().all(|l| l.direction == Direction::Forward)
    }

    pub fn is_inverse(&self) -> bool {
        self.letters.iter().all(|l| l.direction == Direction::Inverse)
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = self.letters.clone();
        letters.extend_from_slice(&other.letters);
        Word { letters }
    }

    pub fn push(&mut self, letter: Letter) {
        self.letters.push(letter);
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.letters.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match l.direction {
                Direction::Forward => write!(f, "f{}", l.index + 1)?,
                Direction::Inverse => write!(f, "f{}^-1", l.index + 1)?,
            }
        }
        Ok(())
    }
}

impl Serialize for Word {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_signed().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Word {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = Vec::<i64>::deserialize(d)?;
        Word::from_signed(&code).map_err(serde::de::Error::custom)
    }
}

/// Tolerance on the probability vector's total.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A finite family of forward maps on one phase space with selection
/// probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IFSystem {
    space: PhaseSpace,
    maps: Vec<SmoothMap>,
    probs: Vec<f64>,
}

impl IFSystem {
    pub fn new(space: PhaseSpace, families: Vec<MapFamily>, probs: Vec<f64>) -> Result<Self> {
        if families.is_empty() {
            return Err(Error::invalid("an IFS needs at least one map"));
        }
        if probs.len() != families.len() {
            return Err(Error::invalid(format!(
                "{} maps but {} probabilities",
                families.len(),
                probs.len()
            )));
        }
        let maps = families
            .into_iter()
            .enumerate()
            .map(|(i, fam)| {
                if fam.space() != space {
                    return Err(Error::invalid(format!(
                        "map {} lives on {}, system on {space}",
                        i + 1,
                        fam.space()
                    )));
                }
                SmoothMap::new(fam)
            })
            .collect::<Result<Vec<_>>>()?;
        let k = maps.len();
        for (i, &p) in probs.iter().enumerate() {
            let ok = if k > 1 { p > 0.0 && p < 1.0 } else { p > 0.0 };
            if !p.is_finite() || !ok {
                return Err(Error::invalid(format!(
                    "probability p{} = {p} must lie in (0, 1)",
                    i + 1
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(IFSystem { space, maps, probs })
    }

    /// Equal probabilities.
    pub fn uniform(space: PhaseSpace, families: Vec<MapFamily>) -> Result<Self> {
        let k = families.len().max(1);
        IFSystem::new(space, families, vec![1.0 / k as f64; k])
    }

    pub fn space(&self) -> PhaseSpace {
        self.space
    }

    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[SmoothMap] {
        &self.maps
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn families(&self) -> Vec<MapFamily> {
        self.maps.iter().map(|m| m.family).collect()
    }

    pub fn volume_preserving(&self) -> bool {
        self.maps.iter().all(SmoothMap::volume_preserving)
    }

    /// Same probabilities, new maps (used by the robustness sweep).
    pub fn with_families(&self, families: Vec<MapFamily>) -> Result<Self> {
        IFSystem::new(self.space, families, self.probs.clone())
    }

    pub fn letter_map(&self, letter: Letter) -> Result<SmoothMap> {
        let m = self.maps.get(letter.index).ok_or_else(|| {
            Error::usage(format!(
                "map index {} out of range 1..={}",
                letter.index + 1,
                self.k()
            ))
        })?;
        Ok(match letter.direction {
            Direction::Forward => *m,
            Direction::Inverse => m.inverse(),
        })
    }

    pub fn apply_letter(&self, letter: Letter, x: Point) -> Result<Point> {
        self.letter_map(letter)?.apply(x)
    }

    /// Left-to-right composition of the word's letters applied to `x`.
    pub fn apply_word(&self, word: &Word, x: Point) -> Result<Point> {
        word.letters()
            .iter()
            .try_fold(x, |p, &l| self.apply_letter(l, p))
    }

    /// Lift of the word applied to a real number (circle systems only).
    pub fn lift_word(&self, word: &Word, t: f64) -> Result<f64> {
        word.letters()
            .iter()
            .try_fold(t, |s, &l| self.letter_map(l)?.lift(s))
    }

    /// Forward step with a 0-based symbol; no validation, used in hot loops.
    #[inline]
    pub(crate) fn step(&self, symbol: usize, x: Point) -> Point {
        self.maps[symbol].family.forward(x)
    }
}
