use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use applid::dataio::{self, Dataset, MeasurementMeta, MetadataEntry, METADATA_FILE};
use applid::ensemble::{self, FeatureSet, Voting};
use applid::harness::{self, ExperimentConfig, Study, SweepReport};
use applid::signal;
use applid::synth::{self, SynthSpec};

use crate::manifest::{digest, Invocation, RunManifest, RUN_FILE};
use crate::{Command, StudyKind, VotingArg};

/// Conditions worth reporting that did not stop the run.
#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
}

pub fn run(command: Command) -> Result<Outcome> {
    let invocation = match command {
        Command::Rerun(args) => {
            let recorded = RunManifest::read(&args.manifest)?;
            let mut inv = recorded.invocation;
            if let (Some(expected), Some(input)) = (&recorded.input_digest, inv.input()) {
                let actual = digest(input)?;
                ensure!(
                    &actual == expected,
                    "input {} changed since the recorded run (digest {actual}, recorded {expected})",
                    input.display()
                );
            }
            if let Some(out) = args.out {
                inv.set_out_dir(out);
            }
            inv
        }
        other => invocation_from(other),
    };
    execute(invocation)
}

fn invocation_from(command: Command) -> Invocation {
    match command {
        Command::Synth(a) => Invocation::Synth {
            spec: SynthSpec {
                houses: a.houses,
                instances_per_house: a.instances,
                periods: a.periods,
                sample_rate_hz: a.sample_rate,
                grid_freq_hz: a.grid_freq,
                noise_sigma: a.noise,
                category_presence: a.presence,
                seed: a.seed,
                ..SynthSpec::default()
            },
            out: a.out,
        },
        Command::Crossval(a) => Invocation::Crossval {
            config: a.exp.config(),
            data: a.exp.data,
            out: a.out,
        },
        Command::Study(a) => Invocation::Study {
            study: match a.kind {
                StudyKind::Size => Study::TrainingSize,
                StudyKind::Freq => Study::SamplingFrequency,
                StudyKind::Phase => Study::PhaseShift,
            },
            values: a.values,
            config: a.exp.config(),
            data: a.exp.data,
            out: a.out,
        },
        Command::Train(a) => Invocation::Train {
            epsilon: a.train.epsilon,
            target_sample_rate_hz: a.train.target_rate,
            train_opts: a.train.train_options(),
            data: a.data,
            out: a.out,
        },
        Command::Predict(a) => Invocation::Predict {
            model: a.model,
            input: a.input,
            sample_rate_hz: a.sample_rate,
            grid_freq_hz: a.grid_freq,
            voting: match a.voting {
                VotingArg::Weighted => Voting::Weighted,
                VotingArg::Majority => Voting::Majority,
            },
            out: a.out,
        },
        Command::Rerun(_) => unreachable!("resolved by the caller"),
    }
}

fn write_text(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load(data: &Path, manifest: &mut RunManifest) -> Result<Dataset> {
    ensure!(data.is_dir(), "corpus directory {} not found", data.display());
    manifest.input_digest = Some(digest(data)?);
    dataio::load_corpus(data).with_context(|| format!("loading corpus {}", data.display()))
}

fn record_fold_seeds(ds: &Dataset, seed: u64, manifest: &mut RunManifest) {
    manifest.seeds.insert("experiment".into(), seed);
    for h in ds.houses() {
        manifest.seeds.insert(format!("fold_house_{h}"), harness::fold_seed(seed, h));
    }
}

fn execute(inv: Invocation) -> Result<Outcome> {
    let start = Instant::now();
    let mut manifest = RunManifest::new(inv.clone());
    let mut outcome = Outcome::default();
    if let Some(out) = inv.out_dir() {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }

    match &inv {
        Invocation::Synth { spec, out } => {
            manifest.seeds.insert("synth".into(), spec.seed);
            let ds = synth::generate(spec)?;
            let written = dataio::write_corpus(&ds, out)?;
            manifest.outputs = written
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect();
            manifest.input_digest = Some(digest(out)?);
            println!("wrote {} recordings from {} houses to {}", ds.len(), ds.houses().len(), out.display());
        }
        Invocation::Crossval { data, config, out } => {
            let ds = load(data, &mut manifest)?;
            manifest.timings_s.insert("load".into(), start.elapsed().as_secs_f64());
            record_fold_seeds(&ds, config.seed, &mut manifest);
            let t = Instant::now();
            let report = harness::leave_house_out(&ds, config)?;
            manifest.timings_s.insert("crossval".into(), t.elapsed().as_secs_f64());
            let summary = report.summary_table();
            write_text(out, "report.json", &report.to_json()?, &mut manifest)?;
            write_text(out, "summary.txt", &summary, &mut manifest)?;
            print!("{summary}");
            outcome.warnings.extend(report.warnings.iter().cloned());
            outcome
                .warnings
                .extend(report.skipped_folds.iter().map(|s| format!("fold for house {} skipped: {}", s.house, s.reason)));
        }
        Invocation::Study {
            study,
            values,
            data,
            config,
            out,
        } => {
            let ds = load(data, &mut manifest)?;
            record_fold_seeds(&ds, config.seed, &mut manifest);
            let t = Instant::now();
            let sweep = run_study(&ds, *study, values, config)?;
            manifest.timings_s.insert("study".into(), t.elapsed().as_secs_f64());
            let csv = sweep.to_csv();
            write_text(out, "sweep.csv", &csv, &mut manifest)?;
            write_text(out, "sweep.json", &json(&sweep)?, &mut manifest)?;
            print!("{csv}");
            for r in &sweep.rejected {
                outcome.warnings.push(format!("value {} rejected: {}", r.x, r.reason));
            }
            for p in &sweep.points {
                outcome.warnings.extend(p.report.warnings.iter().cloned());
                outcome.warnings.extend(
                    p.report
                        .skipped_folds
                        .iter()
                        .map(|s| format!("x = {}: fold for house {} skipped: {}", p.x, s.house, s.reason)),
                );
            }
        }
        Invocation::Train {
            data,
            epsilon,
            target_sample_rate_hz,
            train_opts,
            out,
        } => {
            let ds = load(data, &mut manifest)?;
            manifest.seeds.insert("train".into(), train_opts.seed);
            let cfg = ExperimentConfig {
                epsilon: *epsilon,
                target_sample_rate_hz: *target_sample_rate_hz,
                train_opts: train_opts.clone(),
                ..ExperimentConfig::default()
            };
            cfg.validate()?;
            let ds = harness::prepare_dataset(&ds, &cfg)?;
            let mut features = Vec::new();
            for m in &ds.measurements {
                let d = m.period_len();
                let tau0 = signal::steady_state_window(m, d)?;
                features.extend(signal::expand_measurement(m, tau0, *epsilon, d)?.into_iter().filter(|f| !f.degenerate));
            }
            let set = FeatureSet::from_features(&features)?;
            let t = Instant::now();
            let trained = ensemble::train_ensemble(&set, &ds.label_space, train_opts)?;
            manifest.timings_s.insert("train".into(), t.elapsed().as_secs_f64());
            ensemble::save_ensemble(&trained.ensemble, out)?;
            let mut files: Vec<String> = fs::read_dir(out)?
                .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
                .filter(|n| n != RUN_FILE)
                .collect();
            files.sort();
            manifest.outputs = files;
            for (a, b) in &trained.omitted {
                outcome.warnings.push(format!("pair {a}/{b} omitted: a class has no training data"));
            }
            println!(
                "trained {} networks on {} windows from {} recordings; model in {}",
                trained.ensemble.models().len(),
                set.len(),
                ds.len(),
                out.display()
            );
        }
        Invocation::Predict {
            model,
            input,
            sample_rate_hz,
            grid_freq_hz,
            voting,
            out,
        } => {
            manifest.input_digest = Some(digest(input)?);
            let rows = predict(model, input, *sample_rate_hz, *grid_freq_hz, *voting)?;
            for r in &rows {
                let truth = r.true_label.as_deref().map_or(String::new(), |t| format!("  (true: {t})"));
                let tie = if r.tie { "  [tie]" } else { "" };
                println!("{}\t{}{truth}{tie}", r.file, r.label);
            }
            if rows.iter().any(|r| r.true_label.is_some()) {
                let correct = rows.iter().filter(|r| r.true_label.as_ref() == Some(&r.label)).count();
                println!("accuracy {correct}/{}", rows.len());
            }
            if let Some(out) = out {
                write_text(out, "predictions.json", &json(&rows)?, &mut manifest)?;
            }
        }
    }

    manifest.timings_s.insert("total".into(), start.elapsed().as_secs_f64());
    if let Some(out) = inv.out_dir() {
        manifest.write(out)?;
    }
    Ok(outcome)
}

fn run_study(ds: &Dataset, study: Study, values: &[f64], config: &ExperimentConfig) -> Result<SweepReport> {
    Ok(match study {
        Study::TrainingSize => harness::study_training_size(ds, config, values)?,
        Study::SamplingFrequency => harness::study_sampling_freq(ds, config, values)?,
        Study::PhaseShift => {
            let mut taus = Vec::with_capacity(values.len());
            for &v in values {
                if v < 0.0 || v.fract() != 0.0 {
                    bail!("phase offsets must be whole sample indices, got {v}");
                }
                taus.push(v as usize);
            }
            harness::study_phase_shift(ds, config, &taus)?
        }
    })
}

#[derive(Debug, Serialize)]
struct PredictionRow {
    file: String,
    label: String,
    true_label: Option<String>,
    windows: usize,
    tie: bool,
}

/// Epsilon and rate the model was trained with, from its run manifest.
fn training_setup(model: &Path) -> Result<(usize, Option<f64>)> {
    let path = model.join(RUN_FILE);
    if !path.is_file() {
        return Ok((ExperimentConfig::default().epsilon, None));
    }
    match RunManifest::read(&path)?.invocation {
        Invocation::Train {
            epsilon,
            target_sample_rate_hz,
            ..
        } => Ok((epsilon, target_sample_rate_hz)),
        _ => bail!("{} does not describe a training run", path.display()),
    }
}

fn predict(
    model: &Path,
    input: &Path,
    sample_rate_hz: Option<f64>,
    grid_freq_hz: Option<f64>,
    voting: Voting,
) -> Result<Vec<PredictionRow>> {
    let ens = ensemble::load_ensemble(model).with_context(|| format!("loading model {}", model.display()))?;
    let (epsilon, target) = training_setup(model)?;

    let (ds, names, labelled): (Dataset, Vec<String>, bool) = if input.join(METADATA_FILE).is_file() {
        let ds = dataio::load_corpus(input)?;
        let entries: Vec<MetadataEntry> = serde_json::from_str(&fs::read_to_string(input.join(METADATA_FILE))?)?;
        (ds, entries.into_iter().map(|e| e.file).collect(), true)
    } else {
        let (Some(fs_hz), Some(fg_hz)) = (sample_rate_hz, grid_freq_hz) else {
            bail!("a single recording needs --sample-rate and --grid-freq");
        };
        let meta = MeasurementMeta {
            house_id: 0,
            category: "unknown".into(),
            appliance_id: 0,
        };
        let m = dataio::load_measurement(input, meta, fs_hz, fg_hz)?;
        let name = input.file_name().map_or_else(|| input.display().to_string(), |n| n.to_string_lossy().into_owned());
        (Dataset::from_measurements(vec![m]), vec![name], false)
    };
    let cfg = ExperimentConfig {
        target_sample_rate_hz: target,
        ..ExperimentConfig::default()
    };
    let ds = harness::prepare_dataset(&ds, &cfg)?;

    let mut rows = Vec::with_capacity(ds.len());
    for (m, file) in ds.measurements.iter().zip(names) {
        let d = m.period_len();
        ensure!(
            2 * d == ens.input_dim(),
            "{file}: {d} samples per period after resampling, model expects {}",
            ens.input_dim() / 2
        );
        let tau0 = signal::steady_state_window(m, d)?;
        let windows = signal::expand_measurement(m, tau0, epsilon, d)?;
        let verdict = ens.classify_windows(&windows, voting)?;
        rows.push(PredictionRow {
            file,
            label: verdict.prediction.label,
            true_label: labelled.then(|| m.category.clone()),
            windows: windows.len(),
            tie: verdict.prediction.tie,
        });
    }
    Ok(rows)
}
