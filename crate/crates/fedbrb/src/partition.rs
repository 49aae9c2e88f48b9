//! Channel-selection schemes and block arithmetic.
//!
//! Four ways to pick sub-model channels per layer: fixed windows, rolling
//! windows, random subsets, and block-wise rolling over a grid of tiles
//! whose size is set by the smallest client ratio in the system.
//!
//! Selections are generated per width boundary (see `neural::ModelArch`)
//! so that layer l's output channels are always layer l+1's input channels.
//! For the block scheme, consecutive partitionable boundaries advance at
//! different rates (one cycles per round, the next once per full cycle),
//! which makes the (out, in) block position of every square tensor sweep
//! all grid cells in exactly grid-size rounds instead of staying on the
//! diagonal the way shared rolling windows do.

use rand::Rng;
use thiserror::Error;

use crate::neural::{ModelArch, Params};
use crate::tensor::{ChannelSelection, TensorError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid size letter '{0}' (expected a..e)")]
    InvalidLetter(char),
    #[error("invalid log2 denominator {0} (expected 0..=4)")]
    InvalidLog2(u32),
    #[error("width {width} not divisible by {denom}")]
    NonDivisible { width: usize, denom: usize },
    #[error("selection count {count} exceeds total {total}")]
    CountExceedsTotal { count: usize, total: usize },
    #[error("block index {index} out of range 1..={blocks}")]
    BlockIndexOutOfRange { index: usize, blocks: usize },
    #[error("client ratio {client} is smaller than the minimum ratio {min}")]
    RatioBelowMinimum { client: f64, min: f64 },
    #[error("grid of {rows}x{cols} blocks does not align with tile side {tile}")]
    TileMisaligned { rows: usize, cols: usize, tile: usize },
    #[error("spec does not match parameters: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Partitioning ratio restricted to reciprocal powers of two,
/// 1/1 down to 1/16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    log2_denominator: u32,
}

impl Ratio {
    pub const MAX_LOG2: u32 = 4;

    pub fn from_log2(log2_denominator: u32) -> Result<Self, PartitionError> {
        if log2_denominator > Self::MAX_LOG2 {
            return Err(PartitionError::InvalidLog2(log2_denominator));
        }
        Ok(Self { log2_denominator })
    }

    /// Size letters: a -> 1, b -> 1/2, c -> 1/4, d -> 1/8, e -> 1/16.
    pub fn from_letter(letter: char) -> Result<Self, PartitionError> {
        let k = match letter {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            'd' => 3,
            'e' => 4,
            other => return Err(PartitionError::InvalidLetter(other)),
        };
        Ok(Self { log2_denominator: k })
    }

    pub fn letter(&self) -> char {
        ['a', 'b', 'c', 'd', 'e'][self.log2_denominator as usize]
    }

    pub fn value(&self) -> f64 {
        1.0 / self.denominator() as f64
    }

    pub fn denominator(&self) -> usize {
        1usize << self.log2_denominator
    }

    pub fn is_full(&self) -> bool {
        self.log2_denominator == 0
    }

    /// `width * ratio`, requiring exact divisibility.
    pub fn scale(&self, width: usize) -> Result<usize, PartitionError> {
        let denom = self.denominator();
        if width % denom != 0 {
            return Err(PartitionError::NonDivisible { width, denom });
        }
        Ok(width / denom)
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    /// Ordered by value: 1/16 < ... < 1.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.log2_denominator.cmp(&self.log2_denominator)
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

/// Which channel-selection scheme generates the sub-models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Random,
    Fixed,
    Rolling,
    BlockRolling,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Random => "feddropout",
            SchemeKind::Fixed => "heterofl",
            SchemeKind::Rolling => "fedrolex",
            SchemeKind::BlockRolling => "fedbrb",
        }
    }
}

/// Block layout of one parameter tensor: block channel sizes and grid dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub block_out: usize,
    pub block_in: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn blocks(&self) -> usize {
        self.rows * self.cols
    }
}

/// Grid with `block_out = M * min_ratio`, `block_in = N * min_ratio`.
pub fn block_grid(m: usize, n: usize, min_ratio: Ratio) -> Result<BlockGrid, PartitionError> {
    let block_out = min_ratio.scale(m)?;
    let block_in = min_ratio.scale(n)?;
    Ok(BlockGrid { block_out, block_in, rows: m / block_out, cols: n / block_in })
}

/// Placement of a single block: 1-based grid coordinates plus half-open
/// channel ranges on both dims.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlacement {
    pub x: usize,
    pub y: usize,
    pub out_range: std::ops::Range<usize>,
    pub in_range: std::ops::Range<usize>,
}

/// Placement of the i-th block (1-based, raster order: left to right, top
/// to bottom).
pub fn block_placement(i: usize, grid: &BlockGrid) -> Result<BlockPlacement, PartitionError> {
    let blocks = grid.blocks();
    if i == 0 || i > blocks {
        return Err(PartitionError::BlockIndexOutOfRange { index: i, blocks });
    }
    let x = (i - 1) / grid.cols + 1;
    let y = (i - 1) % grid.cols + 1;
    Ok(BlockPlacement {
        x,
        y,
        out_range: (x - 1) * grid.block_out..x * grid.block_out,
        in_range: (y - 1) * grid.block_in..y * grid.block_in,
    })
}

/// Continuous selection with a fixed start: `[0, count)`.
pub fn fixed_sequence(total: usize, count: usize) -> Result<Vec<usize>, PartitionError> {
    if count > total {
        return Err(PartitionError::CountExceedsTotal { count, total });
    }
    Ok((0..count).collect())
}

/// Contiguous wraparound window starting at `round mod total`.
pub fn rolling_sequence(
    total: usize,
    count: usize,
    round: u64,
) -> Result<Vec<usize>, PartitionError> {
    if count > total {
        return Err(PartitionError::CountExceedsTotal { count, total });
    }
    let start = (round % total as u64) as usize;
    Ok((0..count).map(|j| (start + j) % total).collect())
}

/// `count` distinct indices sampled uniformly without replacement, sorted
/// ascending. Deterministic for a given rng state.
pub fn random_sequence(
    total: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, PartitionError> {
    if count > total {
        return Err(PartitionError::CountExceedsTotal { count, total });
    }
    let mut picked = rand::seq::index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Starting block of the tile assigned to a client of `client_ratio` at the
/// given round. The tile spans `t x t` blocks with `t = client_ratio /
/// min_ratio`; tiles advance in raster order over tile-aligned positions,
/// wrapping around, so min-ratio clients visit block `(round mod
/// rows*cols) + 1`.
pub fn brb_block_index(
    round: u64,
    grid: &BlockGrid,
    client_ratio: Ratio,
    min_ratio: Ratio,
) -> Result<BlockPlacement, PartitionError> {
    if client_ratio < min_ratio {
        return Err(PartitionError::RatioBelowMinimum {
            client: client_ratio.value(),
            min: min_ratio.value(),
        });
    }
    let t = min_ratio.denominator() / client_ratio.denominator();
    if grid.rows % t != 0 || grid.cols % t != 0 {
        return Err(PartitionError::TileMisaligned { rows: grid.rows, cols: grid.cols, tile: t });
    }
    let tile_rows = grid.rows / t;
    let tile_cols = grid.cols / t;
    let p = (round % (tile_rows * tile_cols) as u64) as usize;
    let tx = p / tile_cols;
    let ty = p % tile_cols;
    let start = (tx * t) * grid.cols + ty * t + 1;
    block_placement(start, grid)
}

/// Per-round, per-client sub-model description: one channel selection per
/// trainable layer, all chained layers consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModelSpec {
    pub ratio: Ratio,
    pub scheme: SchemeKind,
    pub round: u64,
    /// `(trainable layer ordinal, selection)` in layer order. Dense layers
    /// after a flatten carry spatially expanded `in_indices`.
    pub layers: Vec<(usize, ChannelSelection)>,
    /// Raw channel selection per width boundary (`None` = taken whole).
    boundary_sel: Vec<Option<Vec<usize>>>,
}

impl SubModelSpec {
    pub fn boundary_selection(&self, boundary: usize) -> Option<&[usize]> {
        self.boundary_sel[boundary].as_deref()
    }
}

/// Tile position schedule for the block scheme. Boundaries alternate
/// between a fast index (cycles every `positions` rounds) and a slow one
/// (advances once per full fast cycle), so the (out, in) position pair of
/// any tensor between consecutive partitionable boundaries enumerates the
/// whole `positions x positions` tile grid bijectively.
fn brb_boundary_position(round: u64, positions: usize, ordinal: usize) -> usize {
    let p = round % (positions * positions) as u64;
    if ordinal % 2 == 0 {
        (p % positions as u64) as usize
    } else {
        (p / positions as u64) as usize
    }
}

/// Builds the per-layer channel selections for one client.
///
/// Partitionable boundaries must be divisible by the minimum-ratio
/// denominator (the block size) and by the client-ratio denominator.
/// Non-partitionable dims are taken whole. Full-width selections are
/// canonicalized to identity order so a ratio-1 spec extracts a
/// bit-identical copy.
pub fn build_submodel_spec(
    arch: &ModelArch,
    scheme: SchemeKind,
    ratio: Ratio,
    min_ratio: Ratio,
    round: u64,
    rng: &mut impl Rng,
) -> Result<SubModelSpec, PartitionError> {
    if ratio < min_ratio {
        return Err(PartitionError::RatioBelowMinimum {
            client: ratio.value(),
            min: min_ratio.value(),
        });
    }

    let mut boundary_sel: Vec<Option<Vec<usize>>> = Vec::with_capacity(arch.boundaries().len());
    for (b, boundary) in arch.boundaries().iter().enumerate() {
        if !boundary.partitionable {
            boundary_sel.push(None);
            continue;
        }
        let w = boundary.width;
        min_ratio.scale(w)?; // block size must divide the width
        let count = ratio.scale(w)?;
        let sel = if count == w {
            (0..w).collect()
        } else {
            match scheme {
                SchemeKind::Fixed => fixed_sequence(w, count)?,
                SchemeKind::Rolling => rolling_sequence(w, count, round)?,
                SchemeKind::Random => random_sequence(w, count, rng)?,
                SchemeKind::BlockRolling => {
                    let ordinal = arch.partitionable_ordinal(b).expect("partitionable");
                    let positions = ratio.denominator();
                    let pos = brb_boundary_position(round, positions, ordinal);
                    let channels_per_pos = w / positions;
                    (pos * channels_per_pos..(pos + 1) * channels_per_pos).collect()
                }
            }
        };
        boundary_sel.push(Some(sel));
    }

    let layers = arch
        .trainable_layers()
        .iter()
        .enumerate()
        .map(|(ordinal, t)| {
            let out_w = arch.boundaries()[t.out_boundary].width;
            let out_indices = match &boundary_sel[t.out_boundary] {
                Some(sel) => sel.clone(),
                None => (0..out_w).collect(),
            };
            let in_indices = match &boundary_sel[t.in_boundary] {
                Some(sel) => expand_footprint(sel, t.in_footprint),
                None => Vec::new(), // whole dim
            };
            (ordinal, ChannelSelection::new(out_indices, in_indices))
        })
        .collect();

    Ok(SubModelSpec { ratio, scheme, round, layers, boundary_sel })
}

/// Maps channel indices to flat positions when each channel spans
/// `footprint` consecutive columns (dense layers after a flatten).
pub fn expand_footprint(channels: &[usize], footprint: usize) -> Vec<usize> {
    if footprint == 1 {
        return channels.to_vec();
    }
    let mut out = Vec::with_capacity(channels.len() * footprint);
    for &c in channels {
        out.extend(c * footprint..(c + 1) * footprint);
    }
    out
}

/// Gathers every layer tensor of `global` by its selection; result shapes
/// equal the shrunken architecture's shapes.
pub fn extract_submodel(global: &Params, spec: &SubModelSpec) -> Result<Params, PartitionError> {
    if global.layers.len() != spec.layers.len() {
        return Err(PartitionError::SpecMismatch(format!(
            "spec has {} layers, params have {}",
            spec.layers.len(),
            global.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(global.layers.len());
    for (lp, (_, sel)) in global.layers.iter().zip(&spec.layers) {
        let weight = lp.weight.gather_channels(sel)?;
        let bias = lp.bias.gather_channels(&ChannelSelection::rows(sel.out_indices.clone()))?;
        layers.push(crate::neural::LayerParams { weight, bias });
    }
    Ok(Params { layers })
}
