//! Tracks which global parameters have been gradient-trained (primary) or
//! merely touched (broadcast copies) over rounds, and predicts how many
//! rounds each scheme needs to traverse a layer once.
//!
//! Two masks are kept per tensor rather than one: broadcast only copies
//! scaled deltas, so counting it as "trained" would overstate coverage.
//! Only tensors with at least one partitionable dim are tracked; the rest
//! are trivially covered by any update.

use crate::aggregate::{ContributionKind, CoverageEvents};
use crate::neural::{tensor_shapes, ModelArch};
use crate::partition::{build_submodel_spec, PartitionError, Ratio, SchemeKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which of the two masks to query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Primary,
    Touched,
}

/// Boolean coverage state of one weight tensor.
#[derive(Debug, Clone)]
pub struct TensorCoverage {
    /// Trainable layer ordinal this tensor belongs to.
    pub layer: usize,
    pub shape: Vec<usize>,
    primary: Vec<bool>,
    touched: Vec<bool>,
    /// Number of rounds executed when the primary mask saturated.
    pub first_full_primary: Option<u64>,
    pub first_full_touched: Option<u64>,
}

impl TensorCoverage {
    fn cells(&self) -> usize {
        self.primary.len()
    }

    pub fn untrained_fraction(&self, kind: MaskKind) -> f64 {
        let mask = match kind {
            MaskKind::Primary => &self.primary,
            MaskKind::Touched => &self.touched,
        };
        mask.iter().filter(|&&b| !b).count() as f64 / mask.len() as f64
    }

    pub fn covered_count(&self, kind: MaskKind) -> usize {
        let mask = match kind {
            MaskKind::Primary => &self.primary,
            MaskKind::Touched => &self.touched,
        };
        mask.iter().filter(|&&b| b).count()
    }
}

/// Coverage masks for every partitionable weight tensor of a model.
#[derive(Debug, Clone)]
pub struct CoverageMask {
    pub tensors: Vec<TensorCoverage>,
    /// trainable layer ordinal -> slot in `tensors`
    slot_of_layer: Vec<Option<usize>>,
}

impl CoverageMask {
    pub fn new(arch: &ModelArch) -> Self {
        let mut tensors = Vec::new();
        let mut slot_of_layer = Vec::new();
        for (ordinal, t) in arch.trainable_layers().iter().enumerate() {
            let partitionable = arch.boundaries()[t.in_boundary].partitionable
                || arch.boundaries()[t.out_boundary].partitionable;
            if partitionable {
                let (shape, _) = tensor_shapes(arch, t);
                let cells = shape.iter().product();
                slot_of_layer.push(Some(tensors.len()));
                tensors.push(TensorCoverage {
                    layer: ordinal,
                    shape,
                    primary: vec![false; cells],
                    touched: vec![false; cells],
                    first_full_primary: None,
                    first_full_touched: None,
                });
            } else {
                slot_of_layer.push(None);
            }
        }
        Self { tensors, slot_of_layer }
    }

    /// Applies one aggregation step's placements. `rounds_executed` is the
    /// number of rounds run so far including this one; it stamps the
    /// first-full markers.
    pub fn record(
        &mut self,
        events: &CoverageEvents,
        rounds_executed: u64,
    ) -> Result<(), PartitionError> {
        for ev in &events.events {
            let Some(slot) = self.slot_of_layer.get(ev.layer).copied().flatten() else {
                continue;
            };
            let tc = &mut self.tensors[slot];
            let d0 = tc.shape[0];
            let d1 = if tc.shape.len() >= 2 { tc.shape[1] } else { 1 };
            let trailing: usize =
                if tc.shape.len() > 2 { tc.shape[2..].iter().product() } else { 1 };
            let whole_in: Vec<usize>;
            let in_idx: &[usize] = if ev.selection.in_indices.is_empty() {
                whole_in = (0..d1).collect();
                &whole_in
            } else {
                &ev.selection.in_indices
            };
            for &o in &ev.selection.out_indices {
                if o >= d0 {
                    return Err(PartitionError::SpecMismatch(format!(
                        "coverage event out index {o} exceeds dim {d0}"
                    )));
                }
                for &i in in_idx {
                    if i >= d1 {
                        return Err(PartitionError::SpecMismatch(format!(
                            "coverage event in index {i} exceeds dim {d1}"
                        )));
                    }
                    let base = (o * d1 + i) * trailing;
                    for k in 0..trailing {
                        tc.touched[base + k] = true;
                        if ev.kind == ContributionKind::Primary {
                            tc.primary[base + k] = true;
                        }
                    }
                }
            }
        }
        for tc in &mut self.tensors {
            if tc.first_full_primary.is_none() && tc.primary.iter().all(|&b| b) {
                tc.first_full_primary = Some(rounds_executed);
            }
            if tc.first_full_touched.is_none() && tc.touched.iter().all(|&b| b) {
                tc.first_full_touched = Some(rounds_executed);
            }
        }
        Ok(())
    }

    /// Untrained fraction across all tracked tensors.
    pub fn untrained_fraction(&self, kind: MaskKind) -> f64 {
        let total: usize = self.tensors.iter().map(|t| t.cells()).sum();
        if total == 0 {
            return 0.0;
        }
        let uncovered: usize = self.tensors.iter().map(|t| t.cells() - t.covered_count(kind)).sum();
        uncovered as f64 / total as f64
    }
}

/// Analytic rounds-to-full-primary-coverage for a square tensor with both
/// dims partitionable, under a single-size client population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraversalPrediction {
    /// Saturates at exactly this many rounds.
    Rounds(u64),
    /// Never saturates no matter how many rounds run.
    Never,
    /// No deterministic bound (random selection).
    Stochastic,
}

impl std::fmt::Display for TraversalPrediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TraversalPrediction::Rounds(r) => write!(f, "{r}"),
            TraversalPrediction::Never => write!(f, "never"),
            TraversalPrediction::Stochastic => write!(f, "stochastic"),
        }
    }
}

/// Predicted rounds to full primary coverage of a square partitionable
/// tensor: block rolling needs (tile positions)^2 rounds, fixed windows
/// and shared-start rolling windows never get there below ratio 1.
pub fn traversal_rounds(scheme: SchemeKind, ratio: Ratio) -> TraversalPrediction {
    match scheme {
        SchemeKind::BlockRolling => {
            // tile positions per boundary = ratio denominator
            let m = ratio.denominator() as u64;
            TraversalPrediction::Rounds(m * m)
        }
        SchemeKind::Fixed | SchemeKind::Rolling => {
            if ratio.is_full() {
                TraversalPrediction::Rounds(1)
            } else {
                TraversalPrediction::Never
            }
        }
        SchemeKind::Random => TraversalPrediction::Stochastic,
    }
}

/// Selection-only simulation: runs the scheme for up to `max_rounds`
/// rounds on a single-size population and records primary placements.
/// No training happens; this is what the coverage table is built from.
pub fn simulate_selection_coverage(
    arch: &ModelArch,
    scheme: SchemeKind,
    ratio: Ratio,
    min_ratio: Ratio,
    max_rounds: u64,
    seed: u64,
) -> Result<CoverageMask, PartitionError> {
    let mut mask = CoverageMask::new(arch);
    for round in 0..max_rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ round.wrapping_mul(0x9e3779b97f4a7c15));
        let spec = build_submodel_spec(arch, scheme, ratio, min_ratio, round, &mut rng)?;
        let events = CoverageEvents {
            events: spec
                .layers
                .iter()
                .map(|(layer, sel)| crate::aggregate::PlacementEvent {
                    layer: *layer,
                    selection: sel.clone(),
                    kind: ContributionKind::Primary,
                })
                .collect(),
            empty_round: false,
        };
        mask.record(&events, round + 1)?;
        if mask.tensors.iter().all(|t| t.first_full_primary.is_some()) {
            break;
        }
    }
    Ok(mask)
}
