//! Colorings of `n` particles, set partitions of the particle indices, and
//! measures on colorings.
//!
//! Particle indices are 0-based throughout the API. The string forms used
//! in reports are 1-based to match the usual mathematical notation: the
//! coloring `(1,2,2)` prints as `"122"` and the partition `{{1,3},{2}}`
//! prints as `"{1,3}{2}"`.
//!
//! Measures on colorings are dense vectors indexed by [`Coloring::lex_index`],
//! i.e. in increasing lexicographic order with position 0 most significant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Result, SbmError};

/// Largest particle count handled by the dense `2^n` machinery.
pub const N_MAX: usize = 12;

pub(crate) fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(argument("particle count must be at least 1"));
    }
    if n > N_MAX {
        return Err(SbmError::Size { n, max: N_MAX });
    }
    Ok(())
}

/// One of the two types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    One,
    Two,
}

impl Color {
    pub fn flip(self) -> Self {
        match self {
            Color::One => Color::Two,
            Color::Two => Color::One,
        }
    }

    /// `1` or `2`.
    pub fn as_u8(self) -> u8 {
        match self {
            Color::One => 1,
            Color::Two => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Color::One),
            2 => Ok(Color::Two),
            _ => Err(argument(format!("color must be 1 or 2, got {v}"))),
        }
    }

    /// Index into a two-element array (`One -> 0`, `Two -> 1`).
    pub fn slot(self) -> usize {
        match self {
            Color::One => 0,
            Color::Two => 1,
        }
    }
}

/// An element of `{1,2}^n`, stored as a bitmask (bit set = color 2) whose
/// value is exactly the lexicographic index.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coloring {
    n: u8,
    bits: u16,
}

impl Coloring {
    pub fn new(colors: &[Color]) -> Result<Self> {
        check_size(colors.len())?;
        let n = colors.len();
        let mut bits = 0u16;
        for (i, c) in colors.iter().enumerate() {
            if *c == Color::Two {
                bits |= 1 << (n - 1 - i);
            }
        }
        Ok(Coloring { n: n as u8, bits })
    }

    /// Build from entries in `{1,2}`.
    pub fn from_digits(digits: &[u8]) -> Result<Self> {
        let colors = digits
            .iter()
            .map(|d| Color::from_u8(*d))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&colors)
    }

    pub fn uniform(n: usize, color: Color) -> Result<Self> {
        Self::new(&vec![color; n])
    }

    /// `(1,2,1,2,...)`.
    pub fn alternating(n: usize) -> Result<Self> {
        let colors: Vec<Color> = (0..n)
            .map(|i| if i % 2 == 0 { Color::One } else { Color::Two })
            .collect();
        Self::new(&colors)
    }

    /// Inverse of [`Coloring::lex_index`].
    pub fn from_index(n: usize, index: usize) -> Result<Self> {
        check_size(n)?;
        if index >= 1 << n {
            return Err(argument(format!("index {index} out of range for n = {n}")));
        }
        Ok(Coloring {
            n: n as u8,
            bits: index as u16,
        })
    }

    /// All `2^n` colorings in lexicographic order.
    pub fn all(n: usize) -> Result<impl Iterator<Item = Coloring>> {
        check_size(n)?;
        Ok((0..1usize << n).map(move |k| Coloring {
            n: n as u8,
            bits: k as u16,
        }))
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn lex_index(&self) -> usize {
        self.bits as usize
    }

    pub fn get(&self, i: usize) -> Color {
        debug_assert!(i < self.len());
        if self.bits >> (self.len() - 1 - i) & 1 == 1 {
            Color::Two
        } else {
            Color::One
        }
    }

    pub fn colors(&self) -> Vec<Color> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// The coloring with position `i` switched to the other color.
    pub fn flip_at(&self, i: usize) -> Result<Coloring> {
        if i >= self.len() {
            return Err(argument(format!(
                "flip index {i} out of range for a coloring of {} particles",
                self.len()
            )));
        }
        Ok(self.flipped(i))
    }

    #[inline]
    pub(crate) fn flipped(&self, i: usize) -> Coloring {
        Coloring {
            n: self.n,
            bits: self.bits ^ (1 << (self.len() - 1 - i)),
        }
    }

    pub fn count_color(&self, color: Color) -> usize {
        let twos = self.bits.count_ones() as usize;
        match color {
            Color::Two => twos,
            Color::One => self.len() - twos,
        }
    }

    /// Entries at the positions of `block`, in increasing position order.
    pub fn restrict(&self, block: &[usize]) -> Result<Coloring> {
        if block.is_empty() {
            return Err(argument("cannot restrict a coloring to an empty block"));
        }
        let mut positions = block.to_vec();
        positions.sort_unstable();
        positions.dedup();
        if positions.len() != block.len() {
            return Err(argument("block contains repeated positions"));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.len()) {
            return Err(argument(format!(
                "block position {bad} out of range for n = {}",
                self.len()
            )));
        }
        let colors: Vec<Color> = positions.iter().map(|&p| self.get(p)).collect();
        Coloring::new(&colors)
    }

    /// The coloring that is constant `c_k` on block `k` of `partition`.
    pub fn lift(partition: &SetPartition, block_colors: &Coloring) -> Result<Coloring> {
        if block_colors.len() != partition.num_blocks() {
            return Err(argument(format!(
                "block coloring has length {} but the partition has {} blocks",
                block_colors.len(),
                partition.num_blocks()
            )));
        }
        Ok(partition.lift_unchecked(block_colors.bits as usize))
    }

    /// Number of unordered pairs `{i,j}` inside a common block with `m_i != m_j`.
    pub fn discordant_pairs(&self, partition: &SetPartition) -> usize {
        partition
            .blocks()
            .iter()
            .map(|b| {
                let twos = b.iter().filter(|&&i| self.get(i) == Color::Two).count();
                twos * (b.len() - twos)
            })
            .sum()
    }
}

impl fmt::Debug for Coloring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coloring({self})")
    }
}

impl fmt::Display for Coloring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            write!(f, "{}", self.get(i).as_u8())?;
        }
        Ok(())
    }
}

impl FromStr for Coloring {
    type Err = SbmError;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, ',' | ' ' | '(' | ')'))
            .map(|c| match c {
                '1' => Ok(1u8),
                '2' => Ok(2u8),
                other => Err(SbmError::Parse(format!("invalid color character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Coloring::from_digits(&digits)
    }
}

impl Serialize for Coloring {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Coloring {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A partition of `{0,..,n-1}` with blocks sorted internally and ordered by
/// their smallest element.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SetPartition {
    n: usize,
    blocks: Vec<Vec<usize>>,
}

impl SetPartition {
    pub fn new(n: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        check_size(n)?;
        let mut seen = vec![false; n];
        let mut blocks: Vec<Vec<usize>> = blocks
            .into_iter()
            .map(|mut b| {
                b.sort_unstable();
                b
            })
            .collect();
        for b in &blocks {
            if b.is_empty() {
                return Err(argument("partition blocks must be nonempty"));
            }
            for &i in b {
                if i >= n {
                    return Err(argument(format!("element {i} out of range for n = {n}")));
                }
                if seen[i] {
                    return Err(argument(format!("element {i} appears in two blocks")));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(argument(format!("element {missing} is not covered")));
        }
        blocks.sort_unstable_by_key(|b| b[0]);
        Ok(SetPartition { n, blocks })
    }

    pub fn singletons(n: usize) -> Result<Self> {
        Self::new(n, (0..n).map(|i| vec![i]).collect())
    }

    /// The one-block partition `{[n]}`.
    pub fn full(n: usize) -> Result<Self> {
        Self::new(n, vec![(0..n).collect()])
    }

    /// Singletons except for the pair `{i, j}`.
    pub fn pair(n: usize, i: usize, j: usize) -> Result<Self> {
        if i == j {
            return Err(argument("pair needs two distinct elements"));
        }
        let mut blocks = vec![vec![i, j]];
        blocks.extend((0..n).filter(|&k| k != i && k != j).map(|k| vec![k]));
        Self::new(n, blocks)
    }

    /// Partition into consecutive intervals of the given sizes.
    pub fn intervals(sizes: &[usize]) -> Result<Self> {
        let n = sizes.iter().sum();
        let mut start = 0;
        let mut blocks = Vec::with_capacity(sizes.len());
        for &s in sizes {
            blocks.push((start..start + s).collect());
            start += s;
        }
        Self::new(n, blocks)
    }

    /// `i ~ j` iff `positions[i] == positions[j]`.
    pub fn from_positions<P: PartialEq>(positions: &[P]) -> Result<Self> {
        let n = positions.len();
        check_size(n)?;
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut reps: Vec<usize> = Vec::new();
        for (i, p) in positions.iter().enumerate() {
            match reps.iter().position(|&r| positions[r] == *p) {
                Some(k) => blocks[k].push(i),
                None => {
                    reps.push(i);
                    blocks.push(vec![i]);
                }
            }
        }
        // Blocks are created in order of their smallest element already.
        Ok(SetPartition { n, blocks })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_singletons(&self) -> bool {
        self.blocks.len() == self.n
    }

    pub fn largest_block(&self) -> usize {
        self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Whether every block consists of consecutive integers.
    pub fn is_interval(&self) -> bool {
        let mut next = 0;
        for b in &self.blocks {
            for (k, &i) in b.iter().enumerate() {
                if i != next + k {
                    return false;
                }
            }
            next += b.len();
        }
        true
    }

    pub fn same_block(&self, i: usize, j: usize) -> bool {
        self.blocks.iter().any(|b| b.contains(&i) && b.contains(&j))
    }

    /// Coloring equal to bit `k` of `block_bits` (lex order over blocks) on block `k`.
    pub(crate) fn lift_unchecked(&self, block_bits: usize) -> Coloring {
        let k = self.blocks.len();
        let mut bits = 0u16;
        for (b, block) in self.blocks.iter().enumerate() {
            if block_bits >> (k - 1 - b) & 1 == 1 {
                for &i in block {
                    bits |= 1 << (self.n - 1 - i);
                }
            }
        }
        Coloring {
            n: self.n as u8,
            bits,
        }
    }
}

impl fmt::Debug for SetPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SetPartition({self})")
    }
}

impl fmt::Display for SetPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let items: Vec<String> = b.iter().map(|i| (i + 1).to_string()).collect();
            write!(f, "{{{}}}", items.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for SetPartition {
    type Err = SbmError;

    /// Parses the 1-based report form, e.g. `"{1,3}{2}"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut rest = s.trim();
        while !rest.is_empty() {
            let open = rest
                .strip_prefix('{')
                .ok_or_else(|| SbmError::Parse(format!("expected '{{' in {s:?}")))?;
            let close = open
                .find('}')
                .ok_or_else(|| SbmError::Parse(format!("unterminated block in {s:?}")))?;
            let block = open[..close]
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&v| v >= 1)
                        .map(|v| v - 1)
                        .ok_or_else(|| SbmError::Parse(format!("bad element {t:?} in {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(block);
            rest = open[close + 1..].trim_start();
        }
        let n = blocks.iter().map(Vec::len).sum();
        SetPartition::new(n, blocks)
    }
}

impl Serialize for SetPartition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SetPartition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A nonnegative vector over the `2^n` colorings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorMeasure {
    n: usize,
    values: Vec<f64>,
}

impl ColorMeasure {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        check_size(n)?;
        if values.len() != 1 << n {
            return Err(argument(format!(
                "measure on {n} particles needs {} values, got {}",
                1usize << n,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(argument(format!("measure values must be finite and >= 0, got {v}")));
        }
        Ok(ColorMeasure { n, values })
    }

    pub fn zero(n: usize) -> Result<Self> {
        check_size(n)?;
        Ok(ColorMeasure {
            n,
            values: vec![0.0; 1 << n],
        })
    }

    pub fn delta(c: Coloring) -> Self {
        let n = c.len();
        let mut values = vec![0.0; 1 << n];
        values[c.lex_index()] = 1.0;
        ColorMeasure { n, values }
    }

    pub(crate) fn from_raw(n: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), 1 << n);
        ColorMeasure { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, c: &Coloring) -> f64 {
        self.values[c.lex_index()]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &ColorMeasure) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Componentwise `self <= bound + tol`.
    pub fn dominated_by(&self, bound: &[f64], tol: f64) -> bool {
        self.values.len() == bound.len()
            && self.values.iter().zip(bound).all(|(v, b)| *v <= b + tol)
    }

    /// Sum of `M(b) * weight(b)` over all colorings `b`.
    pub fn pair_with(&self, mut weight: impl FnMut(Coloring) -> f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, v)| {
                let c = Coloring {
                    n: self.n as u8,
                    bits: k as u16,
                };
                v * weight(c)
            })
            .sum()
    }
}
