//! Leave-house-out cross-validation and the robustness studies built on it.
//!
//! Every fold holds out one house. Training features come from the final two
//! grid periods of each remaining recording, expanded by phase sliding; the
//! trainer carves validation houses out of them. The held-out house is scored
//! by the pairwise ensemble under one or more evaluation variants (voting
//! rule, label-space restriction, test phase), so a single set of trained
//! networks can serve several reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::ensemble::{self, Ensemble, FeatureSet, TrainedEnsemble, Voting};
use crate::error::{Error, Result};
use crate::metrics::{ClassMetrics, ConfusionMatrix};
use crate::mlp::TrainOptions;
use crate::signal::{self, FeatureVector};

/// How a held-out recording turns into confusion-matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestScoring {
    /// One entry per recording: the label most windows voted for.
    #[default]
    PerMeasurement,
    /// One entry per window.
    PerWindow,
}

impl std::str::FromStr for TestScoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measurement" | "per_measurement" => Ok(TestScoring::PerMeasurement),
            "window" | "per_window" => Ok(TestScoring::PerWindow),
            other => Err(Error::domain(format!("unknown scoring mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Sliding step between extracted windows, in samples.
    pub epsilon: usize,
    pub voting: Voting,
    /// Share of the training houses kept in every fold.
    pub train_fraction: f64,
    /// Decimate the corpus to this rate before cross-validating.
    pub target_sample_rate_hz: Option<f64>,
    /// Score each test recording on the single window starting here.
    pub phase_shift_tau: Option<usize>,
    /// Restrict every fold to the held-out house's own categories.
    pub prior_knowledge: bool,
    pub scoring: TestScoring,
    pub seed: u64,
    pub train_opts: TrainOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            epsilon: 10,
            voting: Voting::Weighted,
            train_fraction: 1.0,
            target_sample_rate_hz: None,
            phase_shift_tau: None,
            prior_knowledge: false,
            scoring: TestScoring::PerMeasurement,
            seed: 0,
            train_opts: TrainOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 1 {
            return Err(Error::domain("epsilon must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::domain(format!(
                "train fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        self.train_opts.validate()
    }

    fn variant(&self) -> EvalVariant {
        EvalVariant {
            voting: self.voting,
            prior_knowledge: self.prior_knowledge,
            phase_shift_tau: self.phase_shift_tau,
            scoring: self.scoring,
        }
    }
}

/// Evaluation settings that do not affect training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalVariant {
    pub voting: Voting,
    pub prior_knowledge: bool,
    pub phase_shift_tau: Option<usize>,
    pub scoring: TestScoring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub confusion: ConfusionMatrix,
    pub alpha: Option<f64>,
    /// Labels the fold's predictions were drawn from.
    pub label_space: Vec<String>,
    pub train_houses: Vec<i64>,
    pub validation_houses: Vec<i64>,
    /// Pairs trained without a held-out validation house.
    pub validation_fallbacks: usize,
    pub ties: u64,
    pub aggregation_ties: u64,
    /// No training or validation feature came from the held-out house.
    pub leakage_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmittedPair {
    pub house: i64,
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub house: i64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: ExperimentConfig,
    pub variant: EvalVariant,
    pub sample_rate_hz: f64,
    pub period_len: usize,
    pub label_space: Vec<String>,
    pub per_house: BTreeMap<i64, FoldReport>,
    pub aggregate: ConfusionMatrix,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    /// Window votes where the winning total was shared.
    pub tie_count: u64,
    /// Recordings whose window majority was shared.
    pub aggregation_ties: u64,
    pub omitted_pairs: Vec<OmittedPair>,
    pub skipped_folds: Vec<SkippedFold>,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-house and per-category tables.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let v = &self.variant;
        let _ = writeln!(
            out,
            "voting {}  scoring {:?}  prior knowledge {}  rate {} Hz  d {}",
            v.voting, v.scoring, v.prior_knowledge, self.sample_rate_hz, self.period_len
        );
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>6}", "house", "samples", "alpha", "ties");
        for (house, fold) in &self.per_house {
            let alpha = fold.alpha.map_or_else(|| "-".into(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:>8} {:>8} {:>8} {:>6}",
                house,
                fold.confusion.total(),
                alpha,
                fold.ties
            );
        }
        for s in &self.skipped_folds {
            let _ = writeln!(out, "{:>8} skipped: {}", s.house, s.reason);
        }
        out.push('\n');
        out.push_str(&self.aggregate.render_table());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    TrainingSize,
    SamplingFrequency,
    PhaseShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    pub report: CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedValue {
    pub x: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub study: Study,
    pub points: Vec<SweepPoint>,
    pub rejected: Vec<RejectedValue>,
}

impl SweepReport {
    /// `x,alpha,kappa` rows; undefined scores are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,alpha,kappa\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.x, fmt(p.alpha), fmt(p.kappa));
        }
        out
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(23);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the fold holding out `house`.
pub fn fold_seed(seed: u64, house: i64) -> u64 {
    mix(seed, house as u64)
}

/// Decimates the corpus when the config asks for a lower rate.
pub fn prepare_dataset(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Dataset> {
    let Some(target) = cfg.target_sample_rate_hz else {
        return Ok(ds.clone());
    };
    let rates: BTreeSet<u64> = ds.measurements.iter().map(|m| m.sample_rate_hz.to_bits()).collect();
    let mut plans = BTreeMap::new();
    for bits in rates {
        let fs = f64::from_bits(bits);
        if fs == target {
            continue;
        }
        plans.insert(bits, signal::design_decimation(fs, target)?);
    }
    ds.try_map(|m| match plans.get(&m.sample_rate_hz.to_bits()) {
        Some(plan) => signal::apply_decimation(m, plan),
        None => Ok(m.clone()),
    })
}

fn common_period(ds: &Dataset) -> Result<usize> {
    let periods: BTreeSet<usize> = ds.measurements.iter().map(|m| m.period_len()).collect();
    match periods.len() {
        0 => Err(Error::domain("empty dataset")),
        1 => Ok(*periods.first().unwrap()),
        _ => Err(Error::domain(format!(
            "recordings disagree on samples per period: {periods:?}"
        ))),
    }
}

/// Phase-slid windows over the final two periods of every recording.
fn steady_state_features(ds: &Dataset, epsilon: usize, d: usize) -> Result<Vec<Vec<FeatureVector>>> {
    ds.measurements
        .par_iter()
        .map(|m| {
            let tau0 = signal::steady_state_window(m, d)?;
            signal::expand_measurement(m, tau0, epsilon, d)
        })
        .collect()
}

struct FoldModel {
    trained: TrainedEnsemble,
    train_houses: Vec<i64>,
    validation_houses: Vec<i64>,
    leakage_free: bool,
}

fn train_fold(
    ds: &Dataset,
    windows: &[Vec<FeatureVector>],
    house: i64,
    cfg: &ExperimentConfig,
) -> Result<Skippable<FoldModel>> {
    let seed = fold_seed(cfg.seed, house);
    let (train_ds, _) = ds.partition_by_house(house)?;
    let kept: BTreeSet<i64> = train_ds
        .subsample_houses(cfg.train_fraction, seed)?
        .houses()
        .into_iter()
        .collect();
    if cfg.train_fraction < 1.0 && kept.len() < 2 {
        return Ok(Err(format!(
            "only {} training house(s) left at fraction {}",
            kept.len(),
            cfg.train_fraction
        )));
    }
    let features: Vec<FeatureVector> = ds
        .measurements
        .iter()
        .zip(windows)
        .filter(|(m, _)| kept.contains(&m.house_id))
        .flat_map(|(_, w)| w.iter().filter(|f| !f.degenerate).cloned())
        .collect();
    let set = FeatureSet::from_features(&features)?;
    let present = set.labels.iter().collect::<BTreeSet<_>>().len();
    if present < 2 {
        return Ok(Err(format!("{present} class(es) present in training data")));
    }
    let opts = TrainOptions {
        seed,
        ..cfg.train_opts.clone()
    };
    let trained = ensemble::train_ensemble(&set, &ds.label_space, &opts)?;
    let validation_houses: BTreeSet<i64> = trained
        .ensemble
        .models()
        .values()
        .filter_map(|m| m.meta.as_ref())
        .flat_map(|m| m.validation_houses.iter().copied())
        .collect();
    let leakage_free = !set.houses.contains(&house) && !validation_houses.contains(&house) && !kept.contains(&house);
    Ok(Ok(FoldModel {
        trained,
        train_houses: kept.into_iter().collect(),
        validation_houses: validation_houses.into_iter().collect(),
        leakage_free,
    }))
}

/// A fold's trained model (or skip reason) and one evaluation per variant.
type FoldRun = (i64, Skippable<FoldModel>, Vec<Option<Skippable<FoldEval>>>);

/// `Err` carries the reason a fold was skipped.
type Skippable<T> = std::result::Result<T, String>;

struct FoldEval {
    confusion: ConfusionMatrix,
    label_space: Vec<String>,
    ties: u64,
    aggregation_ties: u64,
    warnings: Vec<String>,
}

fn evaluate_fold(
    ds: &Dataset,
    windows: &[Vec<FeatureVector>],
    house: i64,
    d: usize,
    ens: &Ensemble,
    variant: &EvalVariant,
) -> Result<Skippable<FoldEval>> {
    let restricted;
    let ens = if variant.prior_knowledge {
        let inventory = ds.house_inventory(house);
        if inventory.len() < 2 {
            return Ok(Err(format!(
                "house inventory has {} categor(ies); restriction needs two",
                inventory.len()
            )));
        }
        restricted = ens.restrict_labels(&inventory)?;
        &restricted
    } else {
        ens
    };
    let full_index = |label: &str| ds.label_space.iter().position(|l| l == label).expect("label in dataset");
    let mut confusion = ConfusionMatrix::new(ds.label_space.clone());
    let mut ties = 0;
    let mut aggregation_ties = 0;
    let mut warnings = Vec::new();

    for (m, w) in ds.measurements.iter().zip(windows).filter(|(m, _)| m.house_id == house) {
        let single;
        let test: &[FeatureVector] = match variant.phase_shift_tau {
            Some(tau) => match signal::build_feature(m, tau, d) {
                Ok(f) => {
                    single = [f];
                    &single
                }
                Err(e) => {
                    warnings.push(format!(
                        "house {house} appliance {}: skipped at phase {tau}: {e}",
                        m.appliance_id
                    ));
                    continue;
                }
            },
            None => w,
        };
        if test.is_empty() {
            continue;
        }
        let verdict = ens.classify_windows(test, variant.voting)?;
        ties += verdict.window_ties as u64;
        let truth = full_index(&m.category);
        match variant.scoring {
            TestScoring::PerWindow => {
                for &w in &verdict.window_winners {
                    confusion.add_index(truth, full_index(&ens.label_space()[w]));
                }
            }
            TestScoring::PerMeasurement => {
                aggregation_ties += verdict.prediction.tie as u64;
                confusion.add_index(truth, full_index(&verdict.prediction.label));
            }
        }
    }
    Ok(Ok(FoldEval {
        confusion,
        label_space: ens.label_space().to_vec(),
        ties,
        aggregation_ties,
        warnings,
    }))
}

/// Runs leave-house-out cross-validation once and scores every fold under each
/// of `variants`. Training depends only on `cfg`'s epsilon, train fraction,
/// target rate, seed and train options.
pub fn cross_validate(ds: &Dataset, cfg: &ExperimentConfig, variants: &[EvalVariant]) -> Result<Vec<CvReport>> {
    cfg.validate()?;
    let ds = prepare_dataset(ds, cfg)?;
    let houses = ds.houses();
    if houses.len() < 2 {
        return Err(Error::domain(format!(
            "leave-house-out needs at least two houses, found {}",
            houses.len()
        )));
    }
    let d = common_period(&ds)?;
    let windows = steady_state_features(&ds, cfg.epsilon, d)?;

    let folds: Vec<FoldRun> = houses
        .par_iter()
        .map(|&house| {
            let model = train_fold(&ds, &windows, house, cfg)?;
            let evals = match &model {
                Ok(fm) => variants
                    .iter()
                    .map(|v| evaluate_fold(&ds, &windows, house, d, &fm.trained.ensemble, v).map(Some))
                    .collect::<Result<Vec<_>>>()?,
                Err(_) => variants.iter().map(|_| None).collect(),
            };
            Ok((house, model, evals))
        })
        .collect::<Result<Vec<_>>>()?;

    let sample_rate_hz = ds.measurements[0].sample_rate_hz;
    let mut reports = Vec::with_capacity(variants.len());
    for (k, variant) in variants.iter().enumerate() {
        let mut aggregate = ConfusionMatrix::new(ds.label_space.clone());
        let mut per_house = BTreeMap::new();
        let mut skipped_folds = Vec::new();
        let mut omitted_pairs = Vec::new();
        let mut warnings = Vec::new();
        let (mut tie_count, mut aggregation_ties) = (0, 0);
        for (house, model, evals) in &folds {
            let fm = match model {
                Ok(fm) => fm,
                Err(reason) => {
                    skipped_folds.push(SkippedFold {
                        house: *house,
                        reason: reason.clone(),
                    });
                    continue;
                }
            };
            let eval = match evals[k].as_ref().expect("evaluated fold") {
                Ok(e) => e,
                Err(reason) => {
                    skipped_folds.push(SkippedFold {
                        house: *house,
                        reason: reason.clone(),
                    });
                    continue;
                }
            };
            omitted_pairs.extend(fm.trained.omitted.iter().map(|(a, b)| OmittedPair {
                house: *house,
                first: a.clone(),
                second: b.clone(),
            }));
            warnings.extend(eval.warnings.iter().cloned());
            aggregate.merge(&eval.confusion)?;
            tie_count += eval.ties;
            aggregation_ties += eval.aggregation_ties;
            per_house.insert(
                *house,
                FoldReport {
                    confusion: eval.confusion.clone(),
                    alpha: eval.confusion.accuracy().ok(),
                    label_space: eval.label_space.clone(),
                    train_houses: fm.train_houses.clone(),
                    validation_houses: fm.validation_houses.clone(),
                    validation_fallbacks: fm.trained.pairs.iter().filter(|p| p.validation_fallback).count(),
                    ties: eval.ties,
                    aggregation_ties: eval.aggregation_ties,
                    leakage_free: fm.leakage_free,
                },
            );
        }
        for s in &skipped_folds {
            log::warn!("fold for house {} skipped: {}", s.house, s.reason);
        }
        let mut config = cfg.clone();
        config.voting = variant.voting;
        config.prior_knowledge = variant.prior_knowledge;
        config.phase_shift_tau = variant.phase_shift_tau;
        config.scoring = variant.scoring;
        reports.push(CvReport {
            config,
            variant: *variant,
            sample_rate_hz,
            period_len: d,
            label_space: ds.label_space.clone(),
            alpha: aggregate.accuracy().ok(),
            kappa: aggregate.cohens_kappa(),
            per_class: aggregate.all_classes(),
            aggregate,
            per_house,
            tie_count,
            aggregation_ties,
            omitted_pairs,
            skipped_folds,
            warnings,
        });
    }
    Ok(reports)
}

/// One fold per house, scored with the settings in `cfg`.
pub fn leave_house_out(ds: &Dataset, cfg: &ExperimentConfig) -> Result<CvReport> {
    let mut reports = cross_validate(ds, cfg, &[cfg.variant()])?;
    Ok(reports.remove(0))
}

/// Cross-validation with every fold confined to the held-out house's own
/// categories.
pub fn run_with_prior_knowledge(ds: &Dataset, cfg: &ExperimentConfig) -> Result<CvReport> {
    leave_house_out(
        ds,
        &ExperimentConfig {
            prior_knowledge: true,
            ..cfg.clone()
        },
    )
}

/// Unrestricted and restricted reports from the same trained folds.
pub fn compare_prior_knowledge(ds: &Dataset, cfg: &ExperimentConfig) -> Result<(CvReport, CvReport)> {
    let open = EvalVariant {
        prior_knowledge: false,
        ..cfg.variant()
    };
    let known = EvalVariant {
        prior_knowledge: true,
        ..cfg.variant()
    };
    let mut r = cross_validate(ds, cfg, &[open, known])?;
    let restricted = r.pop().unwrap();
    Ok((r.pop().unwrap(), restricted))
}

fn point(x: f64, report: CvReport) -> SweepPoint {
    SweepPoint {
        x,
        alpha: report.alpha,
        kappa: report.kappa,
        report,
    }
}

/// Cross-validation with each fold's training houses subsampled to `r`.
pub fn study_training_size(ds: &Dataset, cfg: &ExperimentConfig, r_values: &[f64]) -> Result<SweepReport> {
    let mut points = Vec::new();
    let mut rejected = Vec::new();
    for &r in r_values {
        if !(r > 0.0 && r <= 1.0) {
            rejected.push(RejectedValue {
                x: r,
                reason: format!("fraction {r} outside (0, 1]"),
            });
            continue;
        }
        let report = leave_house_out(
            ds,
            &ExperimentConfig {
                train_fraction: r,
                ..cfg.clone()
            },
        )?;
        points.push(point(r, report));
    }
    Ok(SweepReport {
        study: Study::TrainingSize,
        points,
        rejected,
    })
}

/// Checks that `rate` can be reached from every recording's rate and leaves a
/// whole number of samples per period.
fn check_rate(ds: &Dataset, rate: f64) -> Skippable<()> {
    let mut seen = BTreeSet::new();
    for m in &ds.measurements {
        if !seen.insert((m.sample_rate_hz.to_bits(), m.grid_freq_hz.to_bits())) {
            continue;
        }
        if rate > m.sample_rate_hz {
            return Err(format!("{rate} Hz exceeds the native {} Hz", m.sample_rate_hz));
        }
        if let Err(e) = signal::samples_per_period(rate, m.grid_freq_hz) {
            return Err(e.to_string());
        }
        if rate < m.sample_rate_hz {
            if let Err(e) = signal::design_decimation(m.sample_rate_hz, rate) {
                return Err(e.to_string());
            }
        }
    }
    Ok(())
}

/// Cross-validation after decimating the corpus to each rate. The native rate
/// runs undecimated.
pub fn study_sampling_freq(ds: &Dataset, cfg: &ExperimentConfig, rates: &[f64]) -> Result<SweepReport> {
    let mut points = Vec::new();
    let mut rejected = Vec::new();
    for &rate in rates {
        if let Err(reason) = check_rate(ds, rate) {
            log::warn!("sampling rate {rate} Hz rejected: {reason}");
            rejected.push(RejectedValue { x: rate, reason });
            continue;
        }
        let report = leave_house_out(
            ds,
            &ExperimentConfig {
                target_sample_rate_hz: Some(rate),
                ..cfg.clone()
            },
        )?;
        points.push(point(rate, report));
    }
    Ok(SweepReport {
        study: Study::SamplingFrequency,
        points,
        rejected,
    })
}

/// Scores each test recording on the single window starting at each `tau`.
/// Training is shared by all phases.
pub fn study_phase_shift(ds: &Dataset, cfg: &ExperimentConfig, taus: &[usize]) -> Result<SweepReport> {
    let variants: Vec<EvalVariant> = taus
        .iter()
        .map(|&tau| EvalVariant {
            phase_shift_tau: Some(tau),
            ..cfg.variant()
        })
        .collect();
    let reports = if variants.is_empty() {
        Vec::new()
    } else {
        cross_validate(ds, cfg, &variants)?
    };
    Ok(SweepReport {
        study: Study::PhaseShift,
        points: taus
            .iter()
            .zip(reports)
            .map(|(&tau, r)| point(tau as f64, r))
            .collect(),
        rejected: Vec::new(),
    })
}
