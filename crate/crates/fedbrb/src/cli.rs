//! Experiment runner commands: grid execution with CSV metrics and a
//! summary, a selection-only coverage table, and the gradient checker.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{parse_scheme, ConfigError, ExperimentConfig, Overrides};
use crate::coverage::{simulate_selection_coverage, traversal_rounds};
use crate::data::{load_mnist_idx, synthetic_classes, Dataset};
use crate::federation::{run, RunReport, Setting};
use crate::neural::{gradcheck_suite, GradCheckReport};
use crate::partition::SchemeKind;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// One cell of the run grid.
#[derive(Debug, Clone)]
struct RunJob {
    label: String,
    scheme: SchemeKind,
    distribution: String,
    seed: u64,
    broadcast: bool,
}

impl RunJob {
    fn run_id(&self, setting: Setting) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.label,
            self.distribution,
            setting_name(setting),
            self.seed
        )
    }
}

fn setting_name(s: Setting) -> &'static str {
    match s {
        Setting::Dynamic => "dynamic",
        Setting::Fixed => "fixed",
    }
}

/// Everything `cmd_run` wrote, for tests and callers.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_csv: String,
    pub summary: String,
}

/// Loads (train, test) per the config's data section: IDX files or
/// synthetic clusters, subsetting and normalization applied.
pub fn prepare_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    match cfg.data.source.as_str() {
        "mnist" => {
            let load = |imgs: &Path, labs: &Path| {
                load_mnist_idx(imgs, labs).map_err(|e| CliError::Runtime(e.to_string()))
            };
            let mut train = load(&cfg.data.images, &cfg.data.labels)?;
            let mut test = load(&cfg.data.test_images, &cfg.data.test_labels)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.shuffle_seed);
            if cfg.data.subset > 0 {
                train = train.subsample(cfg.data.subset, &mut rng);
            }
            if cfg.data.test_subset > 0 {
                test = test.subsample(cfg.data.test_subset, &mut rng);
            }
            Ok((
                train.normalize(cfg.data.normalize_mean, cfg.data.normalize_std),
                test.normalize(cfg.data.normalize_mean, cfg.data.normalize_std),
            ))
        }
        "synthetic" => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.shuffle_seed);
            let train = synthetic_classes(
                cfg.data.synthetic_classes,
                cfg.data.synthetic_per_class,
                cfg.data.synthetic_dim,
                cfg.data.synthetic_separation,
                &mut rng,
            );
            let test = synthetic_classes(
                cfg.data.synthetic_classes,
                cfg.data.synthetic_test_per_class,
                cfg.data.synthetic_dim,
                cfg.data.synthetic_separation,
                &mut rng,
            );
            Ok((train, test))
        }
        other => Err(CliError::Usage(format!("data.source '{other}' is not mnist|synthetic"))),
    }
}

fn build_jobs(cfg: &ExperimentConfig) -> Result<Vec<RunJob>, CliError> {
    let mut jobs = Vec::new();
    for distribution in &cfg.experiment.distributions {
        for scheme_name in &cfg.experiment.schemes {
            let scheme = parse_scheme(scheme_name)?;
            for &seed in &cfg.experiment.seeds {
                jobs.push(RunJob {
                    label: scheme_name.clone(),
                    scheme,
                    distribution: distribution.clone(),
                    seed,
                    broadcast: true,
                });
                if cfg.federation.broadcast_ablation && scheme == SchemeKind::BlockRolling {
                    jobs.push(RunJob {
                        label: format!("{scheme_name}_nowb"),
                        scheme,
                        distribution: distribution.clone(),
                        seed,
                        broadcast: false,
                    });
                }
            }
        }
    }
    Ok(jobs)
}

/// Executes the full run grid and writes `metrics.csv`, `summary.txt` and
/// `config_echo.toml` into the output directory.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunArtifacts, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;

    let (train, test) = prepare_datasets(&cfg)?;
    let jobs = build_jobs(&cfg)?;

    let reports: Vec<(RunJob, RunReport)> = jobs
        .par_iter()
        .map(|job| {
            let fed = cfg
                .build_federation_config(job.scheme, &job.distribution, job.seed, job.broadcast)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let report =
                run(&fed, &train, &test).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((job.clone(), report))
        })
        .collect::<Result<_, CliError>>()?;

    let metrics_csv = render_metrics_csv(&cfg, &reports);
    let summary = render_summary(&cfg, &reports);

    let out_dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let write = |name: &str, contents: &str| {
        std::fs::write(out_dir.join(name), contents).map_err(|e| {
            CliError::Runtime(format!("cannot write {}: {e}", out_dir.join(name).display()))
        })
    };
    write("metrics.csv", &metrics_csv)?;
    write("summary.txt", &summary)?;
    write("config_echo.toml", &cfg.echo_toml())?;

    Ok(RunArtifacts { out_dir, metrics_csv, summary })
}

const CSV_HEADER: &str = "run_id,scheme,distribution,setting,seed,round,lr,train_loss,\
                          test_accuracy,untrained_fraction_primary,untrained_fraction_touched";

fn render_metrics_csv(cfg: &ExperimentConfig, reports: &[(RunJob, RunReport)]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (job, report) in reports {
        let run_id = job.run_id(cfg.experiment.setting);
        for row in &report.rounds {
            // Display of f64 is the shortest representation that parses
            // back to the same bits, so the CSV round-trips exactly.
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                run_id,
                job.label,
                job.distribution,
                setting_name(cfg.experiment.setting),
                job.seed,
                row.round,
                row.lr,
                row.train_loss,
                row.test_accuracy,
                row.untrained_fraction_primary,
                row.untrained_fraction_touched,
            )
            .expect("string write");
        }
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn render_summary(cfg: &ExperimentConfig, reports: &[(RunJob, RunReport)]) -> String {
    let mut out = String::new();
    writeln!(out, "final-round accuracy, mean +- stddev over seeds").expect("write");

    // group by (label, distribution) preserving first-seen order
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    let mut violations = 0u64;
    for (job, report) in reports {
        violations += report.small_to_large_violations;
        let key = (job.label.clone(), job.distribution.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, accs)) => accs.push(report.final_accuracy),
            None => groups.push((key, vec![report.final_accuracy])),
        }
    }
    for ((label, distribution), accs) in &groups {
        let (mean, std) = mean_std(accs);
        writeln!(
            out,
            "scheme={label} distribution={distribution} setting={}: {mean:.4} +- {std:.4} ({} seeds)",
            setting_name(cfg.experiment.setting),
            accs.len()
        )
        .expect("write");
    }

    // broadcast-on vs broadcast-off deltas when the ablation ran
    for ((label, distribution), accs) in &groups {
        if let Some(base) = label.strip_suffix("_nowb") {
            let on = groups
                .iter()
                .find(|((l, d), _)| l == base && d == distribution)
                .map(|(_, a)| mean_std(a).0);
            if let Some(on) = on {
                let off = mean_std(accs).0;
                writeln!(
                    out,
                    "broadcast effect ({base} minus {base}_nowb) distribution={distribution}: {:+.4}",
                    on - off
                )
                .expect("write");
            }
        }
    }

    writeln!(out, "small-to-large guard violations: {violations}").expect("write");
    out
}

/// Selection-only coverage table: first round of full primary coverage per
/// partitionable layer, next to the analytic prediction.
pub fn cmd_coverage(config_path: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    let arch = cfg.build_arch()?;

    let mut out = String::new();
    writeln!(out, "selection-only coverage: first full primary round per layer").expect("write");
    writeln!(out, "scheme,distribution,layer,shape,first_full,predicted").expect("write");
    for distribution in &cfg.experiment.distributions {
        let dist = crate::federation::SizeDistribution::parse(distribution)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let min_ratio = dist.min_ratio();
        let n = min_ratio.denominator() as u64;
        let max_width = arch
            .boundaries()
            .iter()
            .filter(|b| b.partitionable)
            .map(|b| b.width as u64)
            .max()
            .unwrap_or(1);
        let budget = 4 * (n * n).max(max_width);
        for scheme_name in &cfg.experiment.schemes {
            let scheme = parse_scheme(scheme_name)?;
            let mask = simulate_selection_coverage(
                &arch,
                scheme,
                min_ratio,
                min_ratio,
                budget,
                cfg.experiment.seeds[0],
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            for tc in &mask.tensors {
                let square = is_square_partitionable(&arch, tc.layer);
                let predicted = if square {
                    traversal_rounds(scheme, min_ratio).to_string()
                } else {
                    "-".to_string()
                };
                let first = match tc.first_full_primary {
                    Some(r) => r.to_string(),
                    None => "never".to_string(),
                };
                writeln!(
                    out,
                    "{scheme_name},{distribution},{},{:?},{first},{predicted}",
                    tc.layer, tc.shape
                )
                .expect("write");
            }
        }
    }

    let out_dir = overrides.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("coverage.csv"), &out)
        .map_err(|e| CliError::Runtime(format!("cannot write coverage.csv: {e}")))?;
    Ok(out)
}

fn is_square_partitionable(arch: &crate::neural::ModelArch, layer: usize) -> bool {
    let t = &arch.trainable_layers()[layer];
    let out_b = &arch.boundaries()[t.out_boundary];
    let in_b = &arch.boundaries()[t.in_boundary];
    out_b.partitionable && in_b.partitionable && out_b.width == in_b.width
}

/// Finite-difference gradient suite; `Ok` iff the worst relative error is
/// below the tolerance.
pub fn cmd_gradcheck(seed: u64) -> Result<GradCheckReport, CliError> {
    let report = gradcheck_suite(seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(report)
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {} at layer {} ({}), tolerance {}",
            report.max_rel_error, report.worst_layer, report.worst_kind, GRADCHECK_TOLERANCE
        )))
    }
}
