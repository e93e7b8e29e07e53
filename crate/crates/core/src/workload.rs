//! Deterministic test payloads and block decompositions.
//!
//! Every element value is a pure function of (seed, step, variable, global
//! index), so a reader can verify any selection without talking to the
//! writer.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BlockExtent, GlobalDims, VariableDef};

/// Bytes per generated element (little-endian u64).
pub const ELEMENT_SIZE: u32 = 8;
pub const ELEMENT_TYPE: &str = "u64";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// FNV-1a over a byte string.
pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

pub fn element(seed: u64, step: u64, variable: &str, index: u64) -> u64 {
    let k = splitmix64(seed ^ splitmix64(step ^ splitmix64(name_hash(variable))));
    splitmix64(k ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn variable(name: &str, shape: &GlobalDims) -> VariableDef {
    VariableDef::new(name, ELEMENT_SIZE, ELEMENT_TYPE, shape.clone()).expect("generated variables are valid")
}

/// Row-major global linear index of each element of `extent`, in order.
fn for_each_index(shape: &[u64], extent: &BlockExtent, mut f: impl FnMut(u64)) {
    let nd = shape.len();
    if extent.count.contains(&0) {
        return;
    }
    let mut idx = extent.start.clone();
    loop {
        let lin = idx.iter().zip(shape).fold(0u64, |acc, (&i, &n)| acc * n + i);
        f(lin);
        let mut d = nd;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extent.start[d] + extent.count[d] {
                break;
            }
            idx[d] = extent.start[d];
        }
    }
}

/// The bytes of `extent` of `variable` at `step`, row-major within the
/// extent. Serves both as a writer payload and as the reader's oracle.
pub fn fill(seed: u64, step: u64, variable: &str, shape: &GlobalDims, extent: &BlockExtent) -> Vec<u8> {
    let mut out = Vec::with_capacity(extent.element_count().unwrap_or(0) as usize * ELEMENT_SIZE as usize);
    for_each_index(shape.as_slice(), extent, |i| {
        out.extend_from_slice(&element(seed, step, variable, i).to_le_bytes());
    });
    out
}

/// How a global array is cut into per-rank blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decomposition {
    /// Contiguous slabs along the first dimension, one per rank.
    Striped,
    /// A near-square grid over the first two dimensions.
    Blocked,
    /// Random axis-aligned cuts, tiles dealt to ranks at random.
    Random(u64),
}

impl FromStr for Decomposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "striped" => Ok(Decomposition::Striped),
            "blocked" => Ok(Decomposition::Blocked),
            _ => s
                .strip_prefix("random:")
                .and_then(|v| v.parse().ok())
                .map(Decomposition::Random)
                .ok_or_else(|| {
                    Error::InvalidParam(format!(
                        "decomposition {s:?}: expected striped, blocked or random:<seed>"
                    ))
                }),
        }
    }
}

impl fmt::Display for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decomposition::Striped => f.write_str("striped"),
            Decomposition::Blocked => f.write_str("blocked"),
            Decomposition::Random(s) => write!(f, "random:{s}"),
        }
    }
}

/// Splits `n` into `parts` contiguous (start, count) runs, skipping empties.
fn split(n: u64, parts: u64) -> Vec<(u64, u64)> {
    (0..parts)
        .map(|i| (n * i / parts, n * (i + 1) / parts - n * i / parts))
        .collect()
}

impl Decomposition {
    /// Blocks owned by every rank; together they tile `shape` exactly.
    pub fn tiles(&self, shape: &GlobalDims, ranks: usize) -> Vec<Vec<BlockExtent>> {
        let dims = shape.as_slice();
        let mut out = vec![Vec::new(); ranks];
        match self {
            Decomposition::Striped => {
                for (r, (s, c)) in split(dims[0], ranks as u64).into_iter().enumerate() {
                    if c > 0 {
                        let mut e = BlockExtent::whole(shape);
                        e.start[0] = s;
                        e.count[0] = c;
                        out[r].push(e);
                    }
                }
            }
            Decomposition::Blocked => {
                let r = ranks as u64;
                let (px, py) = if dims.len() < 2 {
                    (r, 1)
                } else {
                    let px = (1..=r)
                        .filter(|p| r.is_multiple_of(*p) && p * p <= r)
                        .max()
                        .unwrap_or(1);
                    (r / px, px)
                };
                let mut rank = 0;
                for (sx, cx) in split(dims[0], px) {
                    let ys = if dims.len() < 2 {
                        vec![(0, 0)]
                    } else {
                        split(dims[1], py)
                    };
                    for (sy, cy) in ys {
                        let mut e = BlockExtent::whole(shape);
                        e.start[0] = sx;
                        e.count[0] = cx;
                        if dims.len() >= 2 {
                            e.start[1] = sy;
                            e.count[1] = cy;
                        }
                        if e.count.iter().all(|&c| c > 0) {
                            out[rank].push(e);
                        }
                        rank += 1;
                    }
                }
            }
            Decomposition::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let target = ranks * rng.gen_range(1..=2);
                let mut tiles = random_tiling(&mut rng, shape, target);
                tiles.shuffle(&mut rng);
                for (i, t) in tiles.into_iter().enumerate() {
                    let r = if i < ranks { i } else { rng.gen_range(0..ranks) };
                    out[r].push(t);
                }
            }
        }
        out
    }
}

/// Cuts the whole array into up to `target` boxes by repeated random
/// axis-aligned splits.
pub fn random_tiling(rng: &mut impl Rng, shape: &GlobalDims, target: usize) -> Vec<BlockExtent> {
    let mut tiles = vec![BlockExtent::whole(shape)];
    while tiles.len() < target {
        let splittable: Vec<usize> = (0..tiles.len())
            .filter(|&i| tiles[i].count.iter().any(|&c| c > 1))
            .collect();
        let Some(&i) = splittable.choose(rng) else {
            break;
        };
        let t = tiles.swap_remove(i);
        let dims: Vec<usize> = (0..t.ndims()).filter(|&d| t.count[d] > 1).collect();
        let d = *dims.choose(rng).unwrap();
        let cut = rng.gen_range(1..t.count[d]);
        let mut a = t.clone();
        let mut b = t;
        a.count[d] = cut;
        b.start[d] += cut;
        b.count[d] -= cut;
        tiles.push(a);
        tiles.push(b);
    }
    tiles
}

/// Parses `256x256` style shapes.
pub fn parse_shape(s: &str) -> Result<GlobalDims> {
    let dims = s
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidParam(format!("shape {s:?}: bad dimension {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(Error::InvalidParam(format!("shape {s:?}: dimensions must be positive")));
    }
    GlobalDims::new(dims)
}

/// Parses `start:count,start:count` selections, one pair per dimension.
pub fn parse_selection(s: &str) -> Result<BlockExtent> {
    let mut start = Vec::new();
    let mut count = Vec::new();
    for part in s.split(',') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| Error::InvalidParam(format!("selection {s:?}: expected start:count per dimension")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidParam(format!("selection {s:?}: bad number {v:?}")))
        };
        start.push(parse(a)?);
        count.push(parse(b)?);
    }
    Ok(BlockExtent::new(start, count))
}
