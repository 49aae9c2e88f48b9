//! Server-side fusion of client updates.
//!
//! Every parameter receives the weighted mean of all contributions touching
//! it: primary overlays carry weight 1, broadcast copies carry the policy's
//! beta. Parameters nobody touched stay bit-identical. Broadcast pushes a
//! trained tile's delta to every other same-shaped tile position of the
//! tensor, which is what lets small sub-models move the whole global model
//! each round instead of waiting for the rolling schedule to reach it.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::neural::{ModelArch, Params, TrainableLayer};
use crate::partition::{PartitionError, Ratio, SubModelSpec};
use crate::tensor::{ChannelSelection, Tensor, TensorError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AggregateError {
    #[error("beta {0} outside [0,1)")]
    InvalidBeta(f64),
    #[error("update has {got} layer deltas, model has {expected}")]
    LayerCountMismatch { expected: usize, got: usize },
    #[error("sample count must be >= 1")]
    ZeroSampleCount,
    #[error("selection is not tile-aligned: {0}")]
    NonAligned(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A trained sub-model delta positioned by its spec.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub spec: SubModelSpec,
    /// Per-layer `local-after - distributed-before`, sub-model shaped.
    pub delta: Params,
    pub sample_count: usize,
}

/// How updates combine at the server.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPolicy {
    /// Broadcast contribution weight, in [0,1).
    pub beta: f64,
    pub broadcast_enabled: bool,
    /// Ratios whose updates are dropped before aggregation.
    pub exclude_ratios: BTreeSet<Ratio>,
    /// Weight contributions by client sample counts (off by default:
    /// uniform client weights).
    pub sample_weighting: bool,
}

impl AggregationPolicy {
    /// Positional overlay averaging only.
    pub fn plain() -> Self {
        Self {
            beta: 0.0,
            broadcast_enabled: false,
            exclude_ratios: BTreeSet::new(),
            sample_weighting: false,
        }
    }

    /// Overlay averaging plus weighted broadcast.
    pub fn weighted_broadcast(beta: f64) -> Self {
        Self { beta, broadcast_enabled: true, ..Self::plain() }
    }

    pub fn validate(&self) -> Result<(), AggregateError> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(AggregateError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// What kind of contribution touched a placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContributionKind {
    Primary,
    Broadcast,
}

/// One placement touched during aggregation, for the coverage tracker.
#[derive(Debug, Clone)]
pub struct PlacementEvent {
    /// Trainable layer ordinal.
    pub layer: usize,
    pub selection: ChannelSelection,
    pub kind: ContributionKind,
}

/// All placements of one aggregation step.
#[derive(Debug, Clone, Default)]
pub struct CoverageEvents {
    pub events: Vec<PlacementEvent>,
    /// True when every update was excluded and the global model was
    /// returned unchanged.
    pub empty_round: bool,
}

/// Elementwise `after - before` for every layer tensor.
pub fn compute_delta(after: &Params, before: &Params) -> Result<Params, AggregateError> {
    if after.layers.len() != before.layers.len() {
        return Err(AggregateError::LayerCountMismatch {
            expected: before.layers.len(),
            got: after.layers.len(),
        });
    }
    let layers = after
        .layers
        .iter()
        .zip(&before.layers)
        .map(|(a, b)| {
            Ok(crate::neural::LayerParams {
                weight: a.weight.add_scaled(&b.weight, -1.0)?,
                bias: a.bias.add_scaled(&b.bias, -1.0)?,
            })
        })
        .collect::<Result<_, TensorError>>()?;
    Ok(Params { layers })
}

/// Tile position info for one dimension of a layer tensor.
struct DimTiles {
    /// Number of tile-aligned positions (1 when the dim is taken whole).
    positions: usize,
    /// Channels per position.
    span: usize,
    /// The update's position index.
    primary: usize,
}

/// Decomposes a selection into its tile position on one dim; errors when the
/// selection is not a contiguous aligned tile.
fn dim_tiles(
    indices: &[usize],
    width: usize,
    footprint: usize,
    partitionable: bool,
) -> Result<DimTiles, AggregateError> {
    if !partitionable || indices.is_empty() {
        return Ok(DimTiles { positions: 1, span: width, primary: 0 });
    }
    let span_flat = indices.len();
    if span_flat % footprint != 0 {
        return Err(AggregateError::NonAligned(format!(
            "selection of {span_flat} not a multiple of footprint {footprint}"
        )));
    }
    let span = span_flat / footprint;
    let start_flat = indices[0];
    for (k, &idx) in indices.iter().enumerate() {
        if idx != start_flat + k {
            return Err(AggregateError::NonAligned(format!(
                "selection not contiguous at offset {k}"
            )));
        }
    }
    if start_flat % footprint != 0 {
        return Err(AggregateError::NonAligned("selection not channel-aligned".into()));
    }
    let start = start_flat / footprint;
    if width % span != 0 || start % span != 0 {
        return Err(AggregateError::NonAligned(format!(
            "tile of {span} channels at {start} not aligned in width {width}"
        )));
    }
    Ok(DimTiles { positions: width / span, span, primary: start / span })
}

/// All tile-aligned placements of the update's tile shape except its own,
/// for the given trainable layer. Counts: `(m_out * m_in) - 1` where `m_*`
/// is the per-dim position count (1 on dims taken whole).
pub fn broadcast_targets(
    arch: &ModelArch,
    spec: &SubModelSpec,
    layer: usize,
) -> Result<Vec<ChannelSelection>, AggregateError> {
    let t = &arch.trainable_layers()[layer];
    let (_, sel) = &spec.layers[layer];
    let (out_tiles, in_tiles) = layer_tiles(arch, t, sel)?;

    let mut targets = Vec::with_capacity(out_tiles.positions * in_tiles.positions - 1);
    for po in 0..out_tiles.positions {
        for pi in 0..in_tiles.positions {
            if po == out_tiles.primary && pi == in_tiles.primary {
                continue;
            }
            let out_indices: Vec<usize> = if out_tiles.positions == 1 {
                sel.out_indices.clone()
            } else {
                (po * out_tiles.span..(po + 1) * out_tiles.span).collect()
            };
            let in_indices: Vec<usize> = if in_tiles.positions == 1 {
                sel.in_indices.clone()
            } else {
                let chans: Vec<usize> = (pi * in_tiles.span..(pi + 1) * in_tiles.span).collect();
                crate::partition::expand_footprint(&chans, t.in_footprint)
            };
            targets.push(ChannelSelection::new(out_indices, in_indices));
        }
    }
    Ok(targets)
}

fn layer_tiles(
    arch: &ModelArch,
    t: &TrainableLayer,
    sel: &ChannelSelection,
) -> Result<(DimTiles, DimTiles), AggregateError> {
    let out_b = &arch.boundaries()[t.out_boundary];
    let in_b = &arch.boundaries()[t.in_boundary];
    let out_tiles = dim_tiles(&sel.out_indices, out_b.width, 1, out_b.partitionable)?;
    let in_tiles = dim_tiles(&sel.in_indices, in_b.width, t.in_footprint, in_b.partitionable)?;
    Ok((out_tiles, in_tiles))
}

/// Applies one aggregation step: per parameter, the new value is
/// `old + (sum of w_c * delta_c) / (sum of w_c)` over all contributions
/// touching it, with primary weight 1 and broadcast weight beta.
/// Untouched parameters are returned bit-identical.
pub fn aggregate_round(
    global: &Params,
    arch: &ModelArch,
    updates: &[ClientUpdate],
    policy: &AggregationPolicy,
) -> Result<(Params, CoverageEvents), AggregateError> {
    policy.validate()?;
    let kept: Vec<&ClientUpdate> =
        updates.iter().filter(|u| !policy.exclude_ratios.contains(&u.spec.ratio)).collect();
    if kept.is_empty() {
        return Ok((global.clone(), CoverageEvents { events: Vec::new(), empty_round: true }));
    }
    for u in &kept {
        if u.delta.layers.len() != global.layers.len() {
            return Err(AggregateError::LayerCountMismatch {
                expected: global.layers.len(),
                got: u.delta.layers.len(),
            });
        }
        if u.sample_count == 0 {
            return Err(AggregateError::ZeroSampleCount);
        }
    }

    let broadcast = policy.broadcast_enabled && policy.beta > 0.0;
    let mut events = Vec::new();
    let mut new_layers = Vec::with_capacity(global.layers.len());

    for (layer, gp) in global.layers.iter().enumerate() {
        let mut w_dsum = gp.weight.zeros_like();
        let mut w_wsum = gp.weight.zeros_like();
        let mut b_dsum = gp.bias.zeros_like();
        let mut b_wsum = gp.bias.zeros_like();

        for u in &kept {
            let (_, sel) = &u.spec.layers[layer];
            let bias_sel = ChannelSelection::rows(sel.out_indices.clone());
            let d = &u.delta.layers[layer];
            let w = if policy.sample_weighting { u.sample_count as f64 } else { 1.0 };

            w_dsum = w_dsum.scatter_add_channels(sel, &d.weight, w)?;
            w_wsum = w_wsum.scatter_add_channels(sel, &ones_like(&d.weight), w)?;
            b_dsum = b_dsum.scatter_add_channels(&bias_sel, &d.bias, w)?;
            b_wsum = b_wsum.scatter_add_channels(&bias_sel, &ones_like(&d.bias), w)?;
            events.push(PlacementEvent {
                layer,
                selection: sel.clone(),
                kind: ContributionKind::Primary,
            });

            if broadcast {
                let bw = policy.beta * w;
                for target in broadcast_targets(arch, &u.spec, layer)? {
                    w_dsum = w_dsum.scatter_add_channels(&target, &d.weight, bw)?;
                    w_wsum = w_wsum.scatter_add_channels(&target, &ones_like(&d.weight), bw)?;
                    // bias follows the out-dim placement only when it moved
                    if target.out_indices != sel.out_indices {
                        let tb = ChannelSelection::rows(target.out_indices.clone());
                        b_dsum = b_dsum.scatter_add_channels(&tb, &d.bias, bw)?;
                        b_wsum = b_wsum.scatter_add_channels(&tb, &ones_like(&d.bias), bw)?;
                    }
                    events.push(PlacementEvent {
                        layer,
                        selection: target,
                        kind: ContributionKind::Broadcast,
                    });
                }
            }
        }

        new_layers.push(crate::neural::LayerParams {
            weight: apply_weighted_mean(&gp.weight, &w_dsum, &w_wsum),
            bias: apply_weighted_mean(&gp.bias, &b_dsum, &b_wsum),
        });
    }

    Ok((Params { layers: new_layers }, CoverageEvents { events, empty_round: false }))
}

fn ones_like(t: &Tensor) -> Tensor {
    Tensor::filled(t.shape(), 1.0).unwrap()
}

/// `old + dsum/wsum` where `wsum > 0`; bit-identical elsewhere.
fn apply_weighted_mean(old: &Tensor, dsum: &Tensor, wsum: &Tensor) -> Tensor {
    let data: Vec<f64> = old
        .data()
        .iter()
        .zip(dsum.data())
        .zip(wsum.data())
        .map(|((&o, &d), &w)| if w > 0.0 { o + d / w } else { o })
        .collect();
    Tensor::from_vec(old.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ModelArch;
    use crate::partition::{build_submodel_spec, SchemeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn r(letter: char) -> Ratio {
        Ratio::from_letter(letter).unwrap()
    }

    /// Chain with two square hidden tensors of the given width.
    fn square_chain(width: usize) -> ModelArch {
        ModelArch::dense_chain(3, &[width, width, width], 2).unwrap()
    }

    fn const_delta(arch: &ModelArch, spec: &SubModelSpec, value: f64) -> Params {
        let shrunk = Params::zeros(&arch.shrink(spec.ratio).unwrap());
        Params {
            layers: shrunk
                .layers
                .iter()
                .map(|l| crate::neural::LayerParams {
                    weight: Tensor::filled(l.weight.shape(), value).unwrap(),
                    bias: Tensor::filled(l.bias.shape(), value).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn compute_delta_examples() {
        let arch = square_chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Params::init(&arch, &mut rng);
        // after == before -> all-zero delta
        let d = compute_delta(&p, &p).unwrap();
        assert!(d.layers.iter().all(|l| l.weight.data().iter().all(|&v| v == 0.0)));

        // single-cell subtraction
        let a1 = ModelArch::dense_chain(1, &[], 1).unwrap();
        let mut after = Params::zeros(&a1);
        let mut before = Params::zeros(&a1);
        after.layers[0].weight = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        before.layers[0].weight = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let d = compute_delta(&after, &before).unwrap();
        assert_eq!(d.layers[0].weight.data(), &[1.0]);

        // adding the same constant to both sides leaves the delta unchanged
        let shift = |p: &Params| Params {
            layers: p
                .layers
                .iter()
                .map(|l| crate::neural::LayerParams {
                    weight: l.weight.add_scaled(&ones_like(&l.weight), 3.25).unwrap(),
                    bias: l.bias.add_scaled(&ones_like(&l.bias), 3.25).unwrap(),
                })
                .collect(),
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let q = Params::init(&arch, &mut rng2);
        let d1 = compute_delta(&q, &p).unwrap();
        let d2 = compute_delta(&shift(&q), &shift(&p)).unwrap();
        for (a, b) in d1.layers.iter().zip(&d2.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_target_counts() {
        // min ratio 1/4: a min client broadcasts to the other 15 block
        // positions of a square tensor, a 1/2 client to the other 3
        // quadrants, a full client nowhere.
        let arch = square_chain(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let min = r('c');
        for (letter, expected) in [('c', 15), ('b', 3), ('a', 0)] {
            let spec =
                build_submodel_spec(&arch, SchemeKind::BlockRolling, r(letter), min, 2, &mut rng)
                    .unwrap();
            // layer 1 is square hidden-to-hidden
            let targets = broadcast_targets(&arch, &spec, 1).unwrap();
            assert_eq!(targets.len(), expected, "ratio {letter}");
        }
    }

    #[test]
    fn single_dim_layer_broadcasts_along_that_dim_only() {
        // first layer has a non-partitionable input boundary
        let arch = square_chain(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, r('c'), r('c'), 0, &mut rng)
                .unwrap();
        let targets = broadcast_targets(&arch, &spec, 0).unwrap();
        assert_eq!(targets.len(), 3); // 4 out positions - 1
        for t in &targets {
            assert!(t.in_indices.is_empty()); // in dim stays whole
        }
    }

    #[test]
    fn full_overlay_is_plain_delta_addition() {
        let arch = square_chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let global = Params::init(&arch, &mut rng);
        let spec =
            build_submodel_spec(&arch, SchemeKind::Fixed, r('a'), r('a'), 0, &mut rng).unwrap();
        let delta = const_delta(&arch, &spec, 0.125);
        let update = ClientUpdate { spec, delta, sample_count: 10 };
        let (out, events) =
            aggregate_round(&global, &arch, &[update], &AggregationPolicy::plain()).unwrap();
        assert!(!events.empty_round);
        for (o, g) in out.layers.iter().zip(&global.layers) {
            for (a, b) in o.weight.data().iter().zip(g.weight.data()) {
                assert!((a - (b + 0.125)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn primary_plus_broadcast_weighted_mean() {
        // One parameter region touched by a primary contribution of 1.0 and
        // a broadcast contribution of 0.4 at beta 0.5:
        // increment = (1*1.0 + 0.5*0.4) / 1.5 = 0.8.
        let arch = square_chain(2); // 2x2 grids with 1-channel blocks
        let global = Params::zeros(&arch);
        let min = r('b');
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // round 0: both boundaries at position 0 -> primary at (0, 0)
        let spec1 =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, min, min, 0, &mut rng).unwrap();
        // round 3: both boundaries at position 1 -> primary at (1, 1)
        let spec2 =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, min, min, 3, &mut rng).unwrap();
        let u1 =
            ClientUpdate { delta: const_delta(&arch, &spec1, 1.0), spec: spec1, sample_count: 1 };
        let u2 =
            ClientUpdate { delta: const_delta(&arch, &spec2, 0.4), spec: spec2, sample_count: 1 };
        let policy = AggregationPolicy::weighted_broadcast(0.5);
        let (out, _) = aggregate_round(&global, &arch, &[u1, u2], &policy).unwrap();
        // square hidden tensor is layer 1; cell (0,0) got primary 1.0 from
        // u1 and broadcast 0.4 from u2
        let cell = out.layers[1].weight.at2(0, 0);
        assert!((cell - 0.8).abs() < 1e-12, "got {cell}");
    }

    #[test]
    fn same_block_updates_average_and_leave_rest_untouched() {
        let arch = square_chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let global = Params::init(&arch, &mut rng);
        let min = r('b');
        let mk = |value: f64, rng: &mut ChaCha8Rng| {
            let spec =
                build_submodel_spec(&arch, SchemeKind::BlockRolling, min, min, 1, rng).unwrap();
            ClientUpdate { delta: const_delta(&arch, &spec, value), spec, sample_count: 1 }
        };
        let u1 = mk(0.2, &mut rng);
        let u2 = mk(0.6, &mut rng);
        let sel = u1.spec.layers[1].1.clone();
        let (out, _) =
            aggregate_round(&global, &arch, &[u1, u2], &AggregationPolicy::plain()).unwrap();
        let w = 4usize; // hidden width
        for o in 0..w {
            for i in 0..w {
                let before = global.layers[1].weight.at2(o, i);
                let now = out.layers[1].weight.at2(o, i);
                if sel.out_indices.contains(&o) && sel.in_indices.contains(&i) {
                    assert!((now - (before + 0.4)).abs() < 1e-12); // (0.2+0.6)/2
                } else {
                    assert_eq!(now.to_bits(), before.to_bits()); // untouched
                }
            }
        }
    }

    #[test]
    fn beta_zero_equals_broadcast_disabled() {
        let arch = square_chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let global = Params::init(&arch, &mut rng);
        let min = r('b');
        let spec =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, min, min, 2, &mut rng).unwrap();
        let u = ClientUpdate { delta: const_delta(&arch, &spec, 0.3), spec, sample_count: 4 };
        let (with_zero_beta, ev1) = aggregate_round(
            &global,
            &arch,
            &[u.clone()],
            &AggregationPolicy::weighted_broadcast(0.0),
        )
        .unwrap();
        let (disabled, ev2) =
            aggregate_round(&global, &arch, &[u], &AggregationPolicy::plain()).unwrap();
        assert_eq!(with_zero_beta, disabled);
        // zero coverage credit: no broadcast events either way
        assert!(ev1.events.iter().all(|e| e.kind == ContributionKind::Primary));
        assert_eq!(ev1.events.len(), ev2.events.len());
    }

    #[test]
    fn excluded_ratios_have_no_effect() {
        let arch = square_chain(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let global = Params::init(&arch, &mut rng);
        let min = r('e');
        let big =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, r('c'), min, 1, &mut rng)
                .unwrap();
        let small =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, r('e'), min, 1, &mut rng)
                .unwrap();
        let u_big =
            ClientUpdate { delta: const_delta(&arch, &big, 0.5), spec: big, sample_count: 1 };
        let u_small =
            ClientUpdate { delta: const_delta(&arch, &small, 9.0), spec: small, sample_count: 1 };

        let mut policy = AggregationPolicy::plain();
        policy.exclude_ratios.insert(r('e'));
        let (with_small, _) =
            aggregate_round(&global, &arch, &[u_big.clone(), u_small], &policy).unwrap();
        let (without_small, _) = aggregate_round(&global, &arch, &[u_big], &policy).unwrap();
        assert_eq!(with_small, without_small);
    }

    #[test]
    fn all_excluded_returns_global_unchanged_with_warning() {
        let arch = square_chain(16);
        let global = Params::zeros(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, r('e'), r('e'), 0, &mut rng)
                .unwrap();
        let u = ClientUpdate { delta: const_delta(&arch, &spec, 1.0), spec, sample_count: 1 };
        let mut policy = AggregationPolicy::plain();
        policy.exclude_ratios.insert(r('e'));
        let (out, events) = aggregate_round(&global, &arch, &[u], &policy).unwrap();
        assert_eq!(out, global);
        assert!(events.empty_round);
    }

    #[test]
    fn scale_equivariance() {
        let arch = square_chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let global = Params::zeros(&arch);
        let min = r('b');
        let spec =
            build_submodel_spec(&arch, SchemeKind::BlockRolling, min, min, 1, &mut rng).unwrap();
        let u1 = ClientUpdate {
            delta: const_delta(&arch, &spec, 0.7),
            spec: spec.clone(),
            sample_count: 1,
        };
        let u3 = ClientUpdate { delta: const_delta(&arch, &spec, 2.1), spec, sample_count: 1 };
        let policy = AggregationPolicy::weighted_broadcast(0.4);
        let (a, _) = aggregate_round(&global, &arch, &[u1], &policy).unwrap();
        let (b, _) = aggregate_round(&global, &arch, &[u3], &policy).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weight.data().iter().zip(lb.weight.data()) {
                assert!((x * 3.0 - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rolling_spec_with_broadcast_is_rejected_as_non_aligned() {
        let arch = square_chain(4);
        let global = Params::zeros(&arch);
        let min = r('b');
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // round 1 rolling window [1,2] is not tile-aligned
        let spec =
            build_submodel_spec(&arch, SchemeKind::Rolling, min, min, 1, &mut rng).unwrap();
        let u = ClientUpdate { delta: const_delta(&arch, &spec, 1.0), spec, sample_count: 1 };
        let err = aggregate_round(
            &global,
            &arch,
            &[u],
            &AggregationPolicy::weighted_broadcast(0.5),
        );
        assert!(matches!(err, Err(AggregateError::NonAligned(_))));
    }
}
