//! The orchestration loop: client sampling, size assignment, sub-model
//! distribution, local training, aggregation, learning-rate schedule and
//! evaluation.
//!
//! Rounds are strictly sequential; within a round client training tasks are
//! independent and run in parallel. Determinism is preserved by deriving a
//! dedicated rng stream from (run seed, purpose, client id, round) for every
//! random decision and by folding results in client order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{
    aggregate_round, compute_delta, AggregateError, AggregationPolicy, ClientUpdate,
};
use crate::coverage::{CoverageMask, MaskKind};
use crate::data::{partition_iid, partition_noniid, DataError, Dataset, PartitionPlan};
use crate::neural::{
    evaluate, local_train, ModelArch, NeuralError, Params, TrainConfig,
};
use crate::partition::{
    build_submodel_spec, extract_submodel, PartitionError, Ratio, SchemeKind, SubModelSpec,
};

#[derive(Error, Debug)]
pub enum FederationError {
    #[error("invalid distribution string '{input}': {reason}")]
    BadDistribution { input: String, reason: String },
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Client size distribution: sampling weight per size letter a..e.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeDistribution {
    weights: [u32; 5],
    source: String,
}

impl SizeDistribution {
    /// Parses strings like `a0-b1-c1-d1-e1`; omitted letters default to
    /// weight 0. Letters must be distinct and at least one weight positive.
    pub fn parse(s: &str) -> Result<Self, FederationError> {
        let bad = |reason: &str| FederationError::BadDistribution {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let mut weights = [0u32; 5];
        let mut seen = [false; 5];
        if s.trim().is_empty() {
            return Err(bad("empty string"));
        }
        for token in s.split('-') {
            let mut chars = token.chars();
            let letter = chars.next().ok_or_else(|| bad("empty token"))?;
            let idx = match letter {
                'a'..='e' => letter as usize - 'a' as usize,
                _ => return Err(bad(&format!("letter '{letter}' outside a..e"))),
            };
            let digits = chars.as_str();
            if digits.is_empty() {
                return Err(bad(&format!("token '{token}' missing weight")));
            }
            let weight: u32 = digits
                .parse()
                .map_err(|_| bad(&format!("token '{token}' has non-numeric weight")))?;
            if seen[idx] {
                return Err(bad(&format!("duplicate letter '{letter}'")));
            }
            seen[idx] = true;
            weights[idx] = weight;
        }
        if weights.iter().all(|&w| w == 0) {
            return Err(bad("all weights are zero"));
        }
        Ok(Self { weights, source: s.to_string() })
    }

    pub fn weight(&self, letter: char) -> u32 {
        self.weights[letter as usize - 'a' as usize]
    }

    /// Small-to-large mode: no full-size sub-models in the system.
    pub fn is_small_to_large(&self) -> bool {
        self.weights[0] == 0
    }

    /// Ratios with positive weight, smallest value first.
    pub fn support(&self) -> Vec<Ratio> {
        (0..5)
            .rev()
            .filter(|&i| self.weights[i] > 0)
            .map(|i| Ratio::from_log2(i as u32).unwrap())
            .collect()
    }

    /// The smallest ratio in the support (the paper's min{R}).
    pub fn min_ratio(&self) -> Ratio {
        self.support()[0]
    }

    /// Weighted sample.
    pub fn sample(&self, rng: &mut impl Rng) -> Ratio {
        let total: u32 = self.weights.iter().sum();
        let mut pick = rng.gen_range(0..total);
        for (i, &w) in self.weights.iter().enumerate() {
            if pick < w {
                return Ratio::from_log2(i as u32).unwrap();
            }
            pick -= w;
        }
        unreachable!("weights sum checked positive")
    }
}

impl std::fmt::Display for SizeDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.source)
    }
}

/// Whether clients re-sample their size every round or keep one size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Dynamic,
    Fixed,
}

/// Step decay: `lr(round) = initial * factor^(round / interval)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub decay_interval: u64,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, initial: f64, round: u64) -> f64 {
        initial * self.decay_factor.powi((round / self.decay_interval) as i32)
    }
}

/// How the training set is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSpec {
    Iid,
    NonIid { labels_per_client: usize },
}

/// Everything one federated run needs.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub arch: ModelArch,
    pub num_clients: usize,
    pub selected_fraction: f64,
    pub rounds: u64,
    pub distribution: SizeDistribution,
    pub setting: Setting,
    pub scheme: SchemeKind,
    pub policy: AggregationPolicy,
    pub train: TrainConfig,
    pub lr_schedule: LrSchedule,
    pub split: SplitSpec,
    pub seed: u64,
    /// Evaluate every this many rounds (the final round always evaluates).
    pub eval_every: u64,
    /// Cap on test examples per periodic evaluation (0 = all); the final
    /// evaluation always uses the whole test set.
    pub eval_subset: usize,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.num_clients == 0 {
            return Err(FederationError::InvalidConfig("num_clients must be >= 1".into()));
        }
        if !(self.selected_fraction > 0.0 && self.selected_fraction <= 1.0) {
            return Err(FederationError::InvalidConfig(
                "selected_fraction must be in (0, 1]".into(),
            ));
        }
        if !(self.lr_schedule.decay_factor > 0.0 && self.lr_schedule.decay_factor <= 1.0) {
            return Err(FederationError::InvalidConfig("decay_factor must be in (0, 1]".into()));
        }
        if self.lr_schedule.decay_interval == 0 {
            return Err(FederationError::InvalidConfig("decay_interval must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(FederationError::InvalidConfig("eval_every must be >= 1".into()));
        }
        self.train.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn selected_per_round(&self) -> usize {
        ((self.selected_fraction * self.num_clients as f64).ceil() as usize)
            .clamp(1, self.num_clients)
    }
}

/// One client's fixed state across the run.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<usize>,
    /// Assigned once in the fixed setting, `None` in dynamic.
    pub fixed_ratio: Option<Ratio>,
}

/// Per-round metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Most recent evaluation result as of this round.
    pub test_accuracy: f64,
    pub untrained_fraction_primary: f64,
    pub untrained_fraction_touched: f64,
}

/// Full run outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundRecord>,
    pub final_accuracy: f64,
    /// Small-to-large guard violations observed (must stay 0).
    pub small_to_large_violations: u64,
}

// rng stream tags
const STREAM_PARTITION: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_SIZES: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_SPEC: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent seed for one (purpose, client, round) stream of a run.
fn stream_seed(seed: u64, tag: u64, client: u64, round: u64) -> u64 {
    splitmix(seed ^ splitmix(tag) ^ splitmix(client.wrapping_mul(0x51_7c_c1_b7_27_22_0a_95))
        ^ splitmix(round.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// In-flight state of a federated run, advanced one round at a time.
pub struct FederationRun<'a> {
    pub cfg: &'a FederationConfig,
    train_set: &'a Dataset,
    test_set: &'a Dataset,
    pub global: Params,
    pub clients: Vec<ClientState>,
    pub coverage: CoverageMask,
    pub records: Vec<RoundRecord>,
    pub violations: u64,
    pub min_ratio: Ratio,
    last_accuracy: f64,
}

impl<'a> FederationRun<'a> {
    pub fn new(
        cfg: &'a FederationConfig,
        train_set: &'a Dataset,
        test_set: &'a Dataset,
    ) -> Result<Self, FederationError> {
        cfg.validate()?;
        let plan = derive_plan(cfg, train_set)?;
        let mut sizes_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_SIZES, u64::MAX, 0));
        let clients = (0..cfg.num_clients)
            .map(|id| ClientState {
                id,
                shard: plan.client_indices[id].clone(),
                fixed_ratio: match cfg.setting {
                    Setting::Fixed => Some(cfg.distribution.sample(&mut sizes_rng)),
                    Setting::Dynamic => None,
                },
            })
            .collect();
        let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_INIT, 0, 0));
        let global = Params::init(&cfg.arch, &mut init_rng);
        let coverage = CoverageMask::new(&cfg.arch);
        let min_ratio = cfg.distribution.min_ratio();
        let mut run = Self {
            cfg,
            train_set,
            test_set,
            global,
            clients,
            coverage,
            records: Vec::new(),
            violations: 0,
            min_ratio,
            last_accuracy: 0.0,
        };
        run.last_accuracy = run.evaluate_subset()?;
        Ok(run)
    }

    /// Uniform sample of `selected_per_round()` distinct clients.
    pub fn select_clients(&self, round: u64) -> Vec<usize> {
        let k = self.cfg.selected_per_round();
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, STREAM_SELECT, 0, round));
        rand::seq::index::sample(&mut rng, self.cfg.num_clients, k).into_vec()
    }

    /// Ratio per selected client: re-sampled each round in the dynamic
    /// setting, the client's initial draw in the fixed setting.
    pub fn assign_sizes(&self, selected: &[usize], round: u64) -> Vec<Ratio> {
        match self.cfg.setting {
            Setting::Fixed => selected
                .iter()
                .map(|&c| self.clients[c].fixed_ratio.expect("fixed setting assigns ratios"))
                .collect(),
            Setting::Dynamic => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, STREAM_SIZES, 0, round));
                selected.iter().map(|_| self.cfg.distribution.sample(&mut rng)).collect()
            }
        }
    }

    /// Executes one full round: select, size, distribute, train, aggregate,
    /// record coverage and metrics.
    pub fn run_round(&mut self, round: u64) -> Result<(), FederationError> {
        let lr = self.cfg.lr_schedule.lr_at(self.cfg.train.learning_rate, round);
        let train_cfg = TrainConfig { learning_rate: lr, ..self.cfg.train.clone() };

        let selected = self.select_clients(round);
        let ratios = self.assign_sizes(&selected, round);

        struct Trained {
            update: ClientUpdate,
            loss: f64,
        }

        let jobs: Vec<(usize, Ratio)> =
            selected.iter().copied().zip(ratios.iter().copied()).collect();
        let results: Vec<Result<Option<Trained>, FederationError>> = jobs
            .par_iter()
            .map(|&(client, ratio)| {
                let state = &self.clients[client];
                if state.shard.is_empty() {
                    return Ok(None);
                }
                let spec = self.build_spec(client, ratio, round)?;
                let sub_params = extract_submodel(&self.global, &spec)?;
                let sub_arch = self.cfg.arch.shrink(ratio)?;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    self.cfg.seed,
                    STREAM_TRAIN,
                    client as u64,
                    round,
                ));
                let outcome = local_train(
                    &sub_params,
                    &sub_arch,
                    &self.train_set.images,
                    &self.train_set.labels,
                    &state.shard,
                    &train_cfg,
                    &mut rng,
                )?;
                let delta = compute_delta(&outcome.params, &sub_params)?;
                Ok(Some(Trained {
                    update: ClientUpdate { spec, delta, sample_count: state.shard.len() },
                    loss: outcome.mean_loss,
                }))
            })
            .collect();

        let mut updates = Vec::with_capacity(jobs.len());
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        for res in results {
            if let Some(t) = res? {
                loss_sum += t.loss;
                trained += 1;
                updates.push(t.update);
            }
        }

        if self.cfg.distribution.is_small_to_large() {
            for u in &updates {
                self.violations += count_guard_violations(&self.cfg.arch, &u.spec);
            }
        }

        let (new_global, events) =
            aggregate_round(&self.global, &self.cfg.arch, &updates, &self.cfg.policy)?;
        self.global = new_global;
        self.coverage.record(&events, round + 1)?;

        let is_last = round + 1 == self.cfg.rounds;
        if is_last {
            self.last_accuracy = self.evaluate_full()?;
        } else if (round + 1) % self.cfg.eval_every == 0 {
            self.last_accuracy = self.evaluate_subset()?;
        }

        self.records.push(RoundRecord {
            round,
            lr,
            train_loss: if trained > 0 { loss_sum / trained as f64 } else { 0.0 },
            test_accuracy: self.last_accuracy,
            untrained_fraction_primary: self.coverage.untrained_fraction(MaskKind::Primary),
            untrained_fraction_touched: self.coverage.untrained_fraction(MaskKind::Touched),
        });
        Ok(())
    }

    fn build_spec(
        &self,
        client: usize,
        ratio: Ratio,
        round: u64,
    ) -> Result<SubModelSpec, PartitionError> {
        // random selections re-sample per round only in the dynamic setting
        let spec_round = match self.cfg.setting {
            Setting::Dynamic => round,
            Setting::Fixed => 0,
        };
        let rng_round = if self.cfg.scheme == SchemeKind::Random { spec_round } else { round };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.cfg.seed,
            STREAM_SPEC,
            client as u64,
            rng_round,
        ));
        build_submodel_spec(&self.cfg.arch, self.cfg.scheme, ratio, self.min_ratio, round, &mut rng)
    }

    fn eval_indices(&self, full: bool) -> Vec<usize> {
        let n = self.test_set.len();
        let cap = if full || self.cfg.eval_subset == 0 { n } else { self.cfg.eval_subset.min(n) };
        (0..cap).collect()
    }

    fn evaluate_subset(&self) -> Result<f64, FederationError> {
        Ok(evaluate(
            &self.global,
            &self.cfg.arch,
            &self.test_set.images,
            &self.test_set.labels,
            &self.eval_indices(false),
        )?)
    }

    fn evaluate_full(&self) -> Result<f64, FederationError> {
        Ok(evaluate(
            &self.global,
            &self.cfg.arch,
            &self.test_set.images,
            &self.test_set.labels,
            &self.eval_indices(true),
        )?)
    }
}

/// Eq. (1) check: a sub-model must be strictly smaller than the global
/// model on some partitionable dim of every layer that has one.
fn count_guard_violations(arch: &ModelArch, spec: &SubModelSpec) -> u64 {
    let mut violations = 0;
    for (t, (_, sel)) in arch.trainable_layers().iter().zip(&spec.layers) {
        let out_b = &arch.boundaries()[t.out_boundary];
        let in_b = &arch.boundaries()[t.in_boundary];
        let mut has_partitionable = false;
        let mut strictly_smaller = false;
        if out_b.partitionable {
            has_partitionable = true;
            strictly_smaller |= sel.out_indices.len() < out_b.width;
        }
        if in_b.partitionable {
            has_partitionable = true;
            let flat = in_b.width * t.in_footprint;
            strictly_smaller |= !sel.in_indices.is_empty() && sel.in_indices.len() < flat;
        }
        if has_partitionable && !strictly_smaller {
            violations += 1;
        }
    }
    violations
}

fn derive_plan(
    cfg: &FederationConfig,
    train_set: &Dataset,
) -> Result<PartitionPlan, FederationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_PARTITION, 0, 0));
    let plan = match cfg.split {
        SplitSpec::Iid => partition_iid(train_set, cfg.num_clients, &mut rng)?,
        SplitSpec::NonIid { labels_per_client } => {
            partition_noniid(train_set, cfg.num_clients, labels_per_client, &mut rng)?
        }
    };
    Ok(plan)
}

/// Runs the configured number of rounds and returns the report.
/// Deterministic for a given config and seed.
pub fn run(
    cfg: &FederationConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<RunReport, FederationError> {
    let mut state = FederationRun::new(cfg, train_set, test_set)?;
    let initial_accuracy = state.last_accuracy;
    for round in 0..cfg.rounds {
        state.run_round(round)?;
    }
    let final_accuracy =
        state.records.last().map_or(initial_accuracy, |r| r.test_accuracy);
    Ok(RunReport {
        initial_accuracy,
        rounds: state.records,
        final_accuracy,
        small_to_large_violations: state.violations,
    })
}
