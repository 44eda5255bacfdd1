//! One-vs-one ensemble of binary networks with confidence-weighted and
//! majority voting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{self, Batch, ModelMetadata, Network, TrainOptions};
use crate::signal::FeatureVector;

/// Feature rows with their labels and source houses.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<String>,
    pub houses: Vec<i64>,
}

impl FeatureSet {
    pub fn from_features(features: &[FeatureVector]) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.values.len());
        let mut inputs = Array2::zeros((features.len(), dim));
        for (mut row, f) in inputs.axis_iter_mut(Axis(0)).zip(features) {
            if f.values.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: f.values.len(),
                });
            }
            row.assign(&ndarray::ArrayView1::from(&f.values[..]));
        }
        Ok(FeatureSet {
            inputs,
            labels: features.iter().map(|f| f.label.clone()).collect(),
            houses: features.iter().map(|f| f.house_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn count(&self, label: &str) -> usize {
        self.labels.iter().filter(|l| *l == label).count()
    }
}

/// Training data for one class pair, first class targeted as `[1, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSubset {
    pub batch: Batch,
    pub houses: Vec<i64>,
}

/// Rows labelled `first` or `second`, in their original order.
pub fn pairwise_subset(set: &FeatureSet, first: &str, second: &str) -> Result<PairSubset> {
    if first == second {
        return Err(Error::domain(format!("pair needs two distinct classes, got `{first}` twice")));
    }
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (i, l) in set.labels.iter().enumerate() {
        if l == first {
            rows.push(i);
            classes.push(0);
        } else if l == second {
            rows.push(i);
            classes.push(1);
        }
    }
    for (label, class) in [(first, 0), (second, 1)] {
        if !classes.contains(&class) {
            return Err(Error::EmptyClass(label.to_string()));
        }
    }
    let mut targets = Array2::zeros((rows.len(), 2));
    for (i, &c) in classes.iter().enumerate() {
        targets[[i, c]] = 1.0;
    }
    Ok(PairSubset {
        batch: Batch::new(set.inputs.select(Axis(0), &rows), targets)?,
        houses: rows.iter().map(|&i| set.houses[i]).collect(),
    })
}

/// Trained network for one unordered class pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    pub network: Network,
    pub meta: Option<ModelMetadata>,
}

/// Pairwise networks over an ordered label space. Keys are label-space
/// indices `(i, j)` with `i < j`; a network's first output scores label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    label_space: Vec<String>,
    input_dim: usize,
    models: BTreeMap<(usize, usize), PairModel>,
}

/// Pair `(i, j)`, `i < j`, of an `m`-label space in enumeration order.
pub fn pair_index(i: usize, j: usize, m: usize) -> usize {
    debug_assert!(i < j && j < m);
    i * (2 * m - i - 1) / 2 + (j - i - 1)
}

pub fn all_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j)))
}

impl Ensemble {
    pub fn new(
        label_space: Vec<String>,
        input_dim: usize,
        models: BTreeMap<(usize, usize), PairModel>,
    ) -> Result<Self> {
        let m = label_space.len();
        if m < 2 {
            return Err(Error::domain("an ensemble needs at least two labels"));
        }
        if label_space.iter().collect::<BTreeSet<_>>().len() != m {
            return Err(Error::domain("label space contains duplicates"));
        }
        for (&(i, j), model) in &models {
            if !(i < j && j < m) {
                return Err(Error::domain(format!("invalid pair key ({i}, {j}) for {m} labels")));
            }
            if model.network.input_dim() != input_dim {
                return Err(Error::Dimension {
                    expected: input_dim,
                    got: model.network.input_dim(),
                });
            }
        }
        Ok(Ensemble {
            label_space,
            input_dim,
            models,
        })
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn models(&self) -> &BTreeMap<(usize, usize), PairModel> {
        &self.models
    }

    pub fn network(&self, i: usize, j: usize) -> Option<&Network> {
        self.models.get(&(i, j)).map(|m| &m.network)
    }

    /// Label pairs without a trained network; their votes count as zero.
    pub fn omitted_pairs(&self) -> Vec<(String, String)> {
        all_pairs(self.label_space.len())
            .filter(|k| !self.models.contains_key(k))
            .map(|(i, j)| (self.label_space[i].clone(), self.label_space[j].clone()))
            .collect()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.label_space
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Pairwise scores for one input.
    pub fn score(&self, x: &[f64]) -> Result<ScoreTable> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut table = ScoreTable::empty(self.label_space.len());
        for (&(i, j), model) in &self.models {
            let p = model.network.forward(x)?;
            table.set(i, j, p[0]);
        }
        Ok(table)
    }

    /// Pairwise scores for every row of `inputs`.
    pub fn score_batch(&self, inputs: ArrayView2<f64>) -> Result<Vec<ScoreTable>> {
        if inputs.ncols() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: inputs.ncols(),
            });
        }
        let mut tables = vec![ScoreTable::empty(self.label_space.len()); inputs.nrows()];
        for (&(i, j), model) in &self.models {
            let p = model.network.forward_batch(inputs)?;
            for (table, row) in tables.iter_mut().zip(p.axis_iter(Axis(0))) {
                table.set(i, j, row[0]);
            }
        }
        Ok(tables)
    }

    /// Votes on every window, then takes the label most windows chose.
    /// Shared window counts go to the earliest label and set `tie`.
    pub fn classify_windows(&self, windows: &[FeatureVector], rule: Voting) -> Result<WindowVerdict> {
        if windows.is_empty() {
            return Err(Error::domain("no windows to classify"));
        }
        let mut inputs = Array2::zeros((windows.len(), self.input_dim));
        for (mut row, f) in inputs.axis_iter_mut(Axis(0)).zip(windows) {
            if f.values.len() != self.input_dim {
                return Err(Error::Dimension {
                    expected: self.input_dim,
                    got: f.values.len(),
                });
            }
            row.assign(&ndarray::ArrayView1::from(&f.values[..]));
        }
        let votes: Vec<Vote> = self.score_batch(inputs.view())?.iter().map(|t| t.vote(rule)).collect();
        let mut counts = vec![0.0; self.label_space.len()];
        for v in &votes {
            counts[v.winner] += 1.0;
        }
        let overall = argmax_first(&counts);
        Ok(WindowVerdict {
            prediction: self.prediction(overall),
            window_winners: votes.iter().map(|v| v.winner).collect(),
            window_ties: votes.iter().filter(|v| v.tie).count(),
        })
    }

    pub fn predict_weighted(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.prediction(self.score(x)?.vote_weighted()))
    }

    pub fn predict_majority(&self, x: &[f64]) -> Result<Prediction> {
        Ok(self.prediction(self.score(x)?.vote_majority()))
    }

    pub fn predict(&self, x: &[f64], rule: Voting) -> Result<Prediction> {
        Ok(self.prediction(self.score(x)?.vote(rule)))
    }

    pub fn prediction(&self, vote: Vote) -> Prediction {
        Prediction {
            label: self.label_space[vote.winner].clone(),
            index: vote.winner,
            tie: vote.tie,
        }
    }

    /// Sub-ensemble over `allowed`, keeping label-space order and only the
    /// pairs whose classes are both allowed.
    pub fn restrict_labels(&self, allowed: &[String]) -> Result<Ensemble> {
        for a in allowed {
            self.label_index(a)?;
        }
        let keep: Vec<usize> = (0..self.label_space.len())
            .filter(|&i| allowed.contains(&self.label_space[i]))
            .collect();
        if keep.len() < 2 {
            return Err(Error::domain(format!(
                "restricted label space needs at least two labels, got {}",
                keep.len()
            )));
        }
        let mut models = BTreeMap::new();
        for (new_i, &old_i) in keep.iter().enumerate() {
            for (new_j, &old_j) in keep.iter().enumerate().skip(new_i + 1) {
                if let Some(m) = self.models.get(&(old_i, old_j)) {
                    models.insert((new_i, new_j), m.clone());
                }
            }
        }
        Ensemble::new(
            keep.iter().map(|&i| self.label_space[i].clone()).collect(),
            self.input_dim,
            models,
        )
    }
}

/// Which voting rule turns a score table into a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Voting {
    /// Sum of each class's pairwise scores.
    #[default]
    Weighted,
    /// Number of pairwise comparisons won.
    Majority,
}

impl std::fmt::Display for Voting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Voting::Weighted => write!(f, "weighted"),
            Voting::Majority => write!(f, "majority"),
        }
    }
}

impl std::str::FromStr for Voting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Voting::Weighted),
            "majority" => Ok(Voting::Majority),
            other => Err(Error::domain(format!("unknown voting rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub winner: usize,
    /// Another class reached the same total.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub label: String,
    pub index: usize,
    pub tie: bool,
}

/// Outcome of [`Ensemble::classify_windows`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowVerdict {
    /// Label most windows voted for; `tie` marks a shared window count.
    pub prediction: Prediction,
    pub window_winners: Vec<usize>,
    /// Windows whose own vote was tied.
    pub window_ties: usize,
}

/// Scores `p(i over j)` for every ordered pair with a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    m: usize,
    entries: Vec<Option<f64>>,
}

fn argmax_first(totals: &[f64]) -> Vote {
    let mut winner = 0;
    for (k, &t) in totals.iter().enumerate().skip(1) {
        if t > totals[winner] {
            winner = k;
        }
    }
    let tie = totals
        .iter()
        .enumerate()
        .any(|(k, &t)| k != winner && t == totals[winner]);
    Vote { winner, tie }
}

impl ScoreTable {
    pub fn empty(m: usize) -> Self {
        ScoreTable {
            m,
            entries: vec![None; m * m],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.m
    }

    /// Stores `p(i over j) = p` and derives `p(j over i) = 1 - p`.
    pub fn set(&mut self, i: usize, j: usize, p: f64) {
        assert!(i != j && i < self.m && j < self.m, "invalid pair ({i}, {j})");
        self.entries[i * self.m + j] = Some(p);
        self.entries[j * self.m + i] = Some(1.0 - p);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.m + j]
    }

    /// Per-class sums of pairwise scores.
    pub fn weighted_totals(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..self.m).filter(|&j| j != i).filter_map(|j| self.get(i, j)).sum())
            .collect()
    }

    /// Per-class counts of pairwise wins (strictly larger score).
    pub fn majority_totals(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                (0..self.m)
                    .filter(|&j| j != i)
                    .filter(|&j| match (self.get(i, j), self.get(j, i)) {
                        (Some(a), Some(b)) => a > b,
                        _ => false,
                    })
                    .count() as f64
            })
            .collect()
    }

    pub fn vote_weighted(&self) -> Vote {
        argmax_first(&self.weighted_totals())
    }

    pub fn vote_majority(&self) -> Vote {
        argmax_first(&self.majority_totals())
    }

    pub fn vote(&self, rule: Voting) -> Vote {
        match rule {
            Voting::Weighted => self.vote_weighted(),
            Voting::Majority => self.vote_majority(),
        }
    }

    /// Table over a subset of classes given by ascending indices.
    pub fn restrict(&self, keep: &[usize]) -> ScoreTable {
        let mut out = ScoreTable::empty(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                if a != b {
                    out.entries[a * keep.len() + b] = self.get(i, j);
                }
            }
        }
        out
    }
}

/// Bookkeeping for one trained pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub first: String,
    pub second: String,
    pub seed: u64,
    /// No house could be held out, so training data doubled as validation data.
    pub validation_fallback: bool,
}

/// Result of [`train_ensemble`].
#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    pub ensemble: Ensemble,
    pub pairs: Vec<PairReport>,
    pub omitted: Vec<(String, String)>,
}

/// Trains one network per unordered label pair. Pair `k` (enumeration order
/// `i < j`) uses seed `opts.seed ^ k`. Pairs lacking data for either class are
/// left out.
pub fn train_ensemble(
    train: &FeatureSet,
    label_space: &[String],
    opts: &TrainOptions,
) -> Result<TrainedEnsemble> {
    opts.validate()?;
    let m = label_space.len();
    if m < 2 {
        return Err(Error::domain("need at least two labels to train an ensemble"));
    }
    if train.is_empty() {
        return Err(Error::domain("no training features"));
    }
    let dim = train.dim();
    let pairs: Vec<(usize, usize)> = all_pairs(m).collect();
    let results: Vec<Result<Option<(PairModel, PairReport)>>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let seed = opts.seed ^ pair_index(i, j, m) as u64;
            let (first, second) = (&label_space[i], &label_space[j]);
            let subset = match pairwise_subset(train, first, second) {
                Ok(s) => s,
                Err(Error::EmptyClass(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let split = mlp::split_by_building(&subset.houses, opts.validation_fraction, seed);
            let train_part = subset.batch.select(&split.train);
            let has_both = |b: &Batch| {
                let col = b.targets.column(0);
                col.iter().any(|&t| t == 1.0) && col.iter().any(|&t| t == 0.0)
            };
            let fallback = split.validation.is_empty() || !has_both(&train_part);
            let (train_batch, val_batch, val_houses) = if fallback {
                (subset.batch.clone(), subset.batch.clone(), Vec::new())
            } else {
                (train_part, subset.batch.select(&split.validation), split.validation_houses)
            };
            let init = mlp::init_network(dim, opts.hidden_units, seed);
            let pair_opts = TrainOptions {
                seed,
                ..opts.clone()
            };
            let outcome = mlp::train(&init, &train_batch, &val_batch, &pair_opts)?;
            let meta = ModelMetadata {
                positive_label: first.clone(),
                negative_label: second.clone(),
                seed,
                train_samples: train_batch.len(),
                validation_samples: if fallback { 0 } else { val_batch.len() },
                validation_houses: val_houses,
                best_validation_loss: outcome.best_validation_loss,
                iterations: outcome.iterations,
                diverged_restarts: outcome.diverged_restarts,
            };
            Ok(Some((
                PairModel {
                    network: outcome.network,
                    meta: Some(meta),
                },
                PairReport {
                    first: first.clone(),
                    second: second.clone(),
                    seed,
                    validation_fallback: fallback,
                },
            )))
        })
        .collect();

    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    for (key, r) in pairs.iter().zip(results) {
        if let Some((model, report)) = r? {
            models.insert(*key, model);
            reports.push(report);
        }
    }
    let ensemble = Ensemble::new(label_space.to_vec(), dim, models)?;
    let omitted = ensemble.omitted_pairs();
    Ok(TrainedEnsemble {
        ensemble,
        pairs: reports,
        omitted,
    })
}

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestPair {
    first: String,
    second: String,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    label_space: Vec<String>,
    input_dim: usize,
    pairs: Vec<ManifestPair>,
    omitted: Vec<(String, String)>,
}

/// Writes `manifest.json` plus one model file (and sidecar) per pair.
pub fn save_ensemble(ens: &Ensemble, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::new();
    for (&(i, j), model) in &ens.models {
        let file = format!("pair_{i:02}_{j:02}.net");
        mlp::save_network(&model.network, model.meta.as_ref(), &dir.join(&file))?;
        pairs.push(ManifestPair {
            first: ens.label_space[i].clone(),
            second: ens.label_space[j].clone(),
            file,
        });
    }
    let manifest = Manifest {
        label_space: ens.label_space.clone(),
        input_dim: ens.input_dim,
        pairs,
        omitted: ens.omitted_pairs(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let index = |l: &str| {
        manifest
            .label_space
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::UnknownLabel(l.to_string()))
    };
    let mut models = BTreeMap::new();
    for p in &manifest.pairs {
        let (i, j) = (index(&p.first)?, index(&p.second)?);
        if i >= j {
            return Err(Error::Format(format!("pair `{}`/`{}` out of label order", p.first, p.second)));
        }
        let model_path = dir.join(&p.file);
        let network = mlp::load_network(&model_path)?;
        let side = mlp::sidecar_path(&model_path);
        let meta = match fs::read_to_string(&side) {
            Ok(t) => Some(serde_json::from_str(&t)?),
            Err(_) => None,
        };
        models.insert((i, j), PairModel { network, meta });
    }
    Ensemble::new(manifest.label_space, manifest.input_dim, models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn table(m: usize, scores: &[((usize, usize), f64)]) -> ScoreTable {
        let mut t = ScoreTable::empty(m);
        for &((i, j), p) in scores {
            t.set(i, j, p);
        }
        t
    }

    /// Single-hidden-unit net whose first output probability is constant `p`.
    fn constant_net(dim: usize, p: f64) -> Network {
        let mut net = Network::zeros(dim, 1);
        let logit = (p / (1.0 - p)).ln();
        net.b2[0] = logit / 2.0;
        net.b2[1] = -logit / 2.0;
        net
    }

    fn constant_ensemble(m: usize, scores: &[((usize, usize), f64)]) -> Ensemble {
        let models = scores
            .iter()
            .map(|&(k, p)| {
                (
                    k,
                    PairModel {
                        network: constant_net(3, p),
                        meta: None,
                    },
                )
            })
            .collect();
        let names: Vec<String> = (0..m).map(|i| format!("L{i}")).collect();
        Ensemble::new(names, 3, models).unwrap()
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(all_pairs(11).count(), 55);
        assert_eq!(all_pairs(10).count(), 45);
        for (k, (i, j)) in all_pairs(7).enumerate() {
            assert_eq!(pair_index(i, j, 7), k);
        }
    }

    #[test]
    fn weighted_example() {
        let t = table(3, &[((0, 1), 0.9), ((0, 2), 0.8), ((1, 2), 0.6)]);
        let sums = t.weighted_totals();
        assert!((sums[0] - 1.7).abs() < 1e-12);
        assert!((sums[1] - 0.7).abs() < 1e-12);
        assert!((sums[2] - 0.6).abs() < 1e-12);
        assert_eq!(t.vote_weighted(), Vote { winner: 0, tie: false });
    }

    #[test]
    fn rules_can_disagree() {
        let t = table(3, &[((0, 1), 0.51), ((0, 2), 0.52), ((1, 2), 0.99)]);
        assert_eq!(t.majority_totals(), vec![2.0, 1.0, 0.0]);
        assert_eq!(t.vote_majority().winner, 0);
        // A: 0.51 + 0.52 = 1.03, B: 0.49 + 0.99 = 1.48, C: 0.48 + 0.01 = 0.49
        assert_eq!(t.vote_weighted().winner, 1);
    }

    #[test]
    fn full_tie_goes_to_first_label() {
        let t = table(4, &all_pairs(4).map(|k| (k, 0.5)).collect::<Vec<_>>());
        assert_eq!(t.vote_weighted(), Vote { winner: 0, tie: true });
        assert_eq!(t.majority_totals(), vec![0.0; 4]);
        assert_eq!(t.vote_majority(), Vote { winner: 0, tie: true });
    }

    #[test]
    fn symmetric_nets_give_half_scores() {
        let models = all_pairs(3)
            .map(|k| {
                (
                    k,
                    PairModel {
                        network: Network::zeros(4, 2),
                        meta: None,
                    },
                )
            })
            .collect();
        let ens = Ensemble::new(labels(&["A", "B", "C"]), 4, models).unwrap();
        let t = ens.score(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for (i, j) in all_pairs(3) {
            assert_eq!(t.get(i, j), Some(0.5));
            assert_eq!(t.get(j, i), Some(0.5));
        }
        let total: f64 = t.weighted_totals().iter().sum();
        assert_eq!(total, 3.0);
        assert_eq!(ens.predict_weighted(&[0.0; 4]).unwrap().label, "A");
    }

    #[test]
    fn table_matches_individual_networks() {
        let mut models = BTreeMap::new();
        for (k, key) in all_pairs(3).enumerate() {
            models.insert(
                key,
                PairModel {
                    network: mlp::init_network(5, 3, k as u64 + 10),
                    meta: None,
                },
            );
        }
        let ens = Ensemble::new(labels(&["A", "B", "C"]), 5, models).unwrap();
        let x = [0.3, -0.2, 0.9, -1.0, 0.0];
        let t = ens.score(&x).unwrap();
        let batch = ens.score_batch(ndarray::Array2::from_shape_vec((1, 5), x.to_vec()).unwrap().view()).unwrap();
        for (i, j) in all_pairs(3) {
            let p = ens.network(i, j).unwrap().forward(&x).unwrap();
            assert_eq!(t.get(i, j), Some(p[0]));
            assert!((t.get(j, i).unwrap() - p[1]).abs() < 1e-15);
            assert!((batch[0].get(i, j).unwrap() - p[0]).abs() < 1e-12);
            assert_eq!(t.get(i, j).unwrap() + t.get(j, i).unwrap(), 1.0);
        }
        assert!(ens.score(&x[..4]).is_err());
    }

    #[test]
    fn two_label_collapse() {
        let mut models = BTreeMap::new();
        models.insert(
            (0, 1),
            PairModel {
                network: mlp::init_network(4, 3, 5),
                meta: None,
            },
        );
        let ens = Ensemble::new(labels(&["A", "B"]), 4, models).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = ens.network(0, 1).unwrap().forward(&x).unwrap();
            let expected = usize::from(p[1] > p[0]);
            assert_eq!(ens.predict_weighted(&x).unwrap().index, expected);
            assert_eq!(ens.predict_majority(&x).unwrap().index, expected);
        }
    }

    #[test]
    fn restriction_drops_pairs() {
        let names: Vec<String> = (0..11).map(|i| format!("C{i}")).collect();
        let models = all_pairs(11)
            .map(|k| {
                (
                    k,
                    PairModel {
                        network: Network::zeros(2, 1),
                        meta: None,
                    },
                )
            })
            .collect();
        let ens = Ensemble::new(names.clone(), 2, models).unwrap();
        let without_first: Vec<String> = names[1..].to_vec();
        let r = ens.restrict_labels(&without_first).unwrap();
        assert_eq!(r.models().len(), 45);
        assert_eq!(r.label_space(), &names[1..]);
        assert_eq!(ens.restrict_labels(&names).unwrap(), ens);
        assert!(ens.restrict_labels(&names[..1]).is_err());
        assert!(ens.restrict_labels(&labels(&["C1", "nope"])).is_err());
    }

    #[test]
    fn restricted_predictions_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<_> = all_pairs(6).map(|k| (k, rng.random_range(0.01..0.99))).collect();
        let ens = constant_ensemble(6, &scores);
        let allowed = labels(&["L1", "L3", "L4"]);
        let r = ens.restrict_labels(&allowed).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            for rule in [Voting::Weighted, Voting::Majority] {
                assert!(allowed.contains(&r.predict(&x, rule).unwrap().label));
            }
        }
    }

    #[test]
    fn omitted_pairs_contribute_nothing() {
        let ens = constant_ensemble(3, &[((0, 1), 0.3), ((1, 2), 0.8)]);
        assert_eq!(ens.omitted_pairs(), vec![("L0".to_string(), "L2".to_string())]);
        let t = ens.score(&[0.0; 3]).unwrap();
        assert_eq!(t.get(0, 2), None);
        let sums = t.weighted_totals();
        assert!((sums[0] - 0.3).abs() < 1e-12);
        assert!((sums[1] - 1.5).abs() < 1e-12);
        assert_eq!(ens.predict_weighted(&[0.0; 3]).unwrap().label, "L1");
    }

    #[test]
    fn window_majority_and_ties() {
        // p(L0 over L1) rises with the first input
        let mut net = Network::zeros(2, 1);
        net.w1[[0, 0]] = 1.0;
        net.w2[[0, 0]] = 5.0;
        net.w2[[1, 0]] = -5.0;
        let models = BTreeMap::from([((0, 1), PairModel { network: net, meta: None })]);
        let ens = Ensemble::new(labels(&["L0", "L1"]), 2, models).unwrap();
        let windows = |signs: &[f64]| -> Vec<FeatureVector> {
            signs
                .iter()
                .map(|&s| FeatureVector {
                    values: vec![s, 0.0],
                    label: "L0".into(),
                    house_id: 1,
                    origin_tau: 0,
                    degenerate: false,
                })
                .collect()
        };

        let v = ens.classify_windows(&windows(&[1.0, 1.0, -1.0, 1.0, -1.0]), Voting::Weighted).unwrap();
        assert_eq!((v.prediction.label.as_str(), v.prediction.tie), ("L0", false));
        assert_eq!(v.window_winners, vec![0, 0, 1, 0, 1]);

        let v = ens.classify_windows(&windows(&[-1.0, 1.0, -1.0, 1.0]), Voting::Majority).unwrap();
        assert_eq!((v.prediction.label.as_str(), v.prediction.tie), ("L0", true));

        let v = ens.classify_windows(&windows(&[-1.0, -0.5]), Voting::Weighted).unwrap();
        assert_eq!(v.prediction.label, "L1");

        // x = 0 scores exactly one half: a tied window vote
        let v = ens.classify_windows(&windows(&[0.0]), Voting::Weighted).unwrap();
        assert_eq!(v.window_ties, 1);

        assert!(ens.classify_windows(&[], Voting::Weighted).is_err());
        let mut wide = windows(&[1.0]);
        wide[0].values.push(0.0);
        assert!(matches!(
            ens.classify_windows(&wide, Voting::Weighted),
            Err(Error::Dimension { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn subset_counts_match_filter() {
        let features: Vec<FeatureVector> = ["A", "B", "C", "A", "C", "A", "B"]
            .iter()
            .enumerate()
            .map(|(k, l)| FeatureVector {
                values: vec![k as f64, 0.0],
                label: l.to_string(),
                house_id: k as i64 % 3,
                origin_tau: 0,
                degenerate: false,
            })
            .collect();
        let set = FeatureSet::from_features(&features).unwrap();
        let sub = pairwise_subset(&set, "A", "C").unwrap();
        let expected = features.iter().filter(|f| f.label == "A" || f.label == "C").count();
        assert_eq!(sub.batch.len(), expected);
        assert_eq!(sub.batch.len(), set.count("A") + set.count("C"));
        assert_eq!(sub.batch.targets.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(sub.batch.targets.row(1).to_vec(), vec![0.0, 1.0]);
        assert!(matches!(pairwise_subset(&set, "A", "Z"), Err(Error::EmptyClass(l)) if l == "Z"));
        assert!(pairwise_subset(&set, "A", "A").is_err());

        let two: Vec<FeatureVector> = features.iter().filter(|f| f.label != "C").cloned().collect();
        let two_set = FeatureSet::from_features(&two).unwrap();
        assert_eq!(pairwise_subset(&two_set, "A", "B").unwrap().batch.len(), two.len());
    }

    #[test]
    fn ensemble_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ens = constant_ensemble(4, &[((0, 1), 0.3), ((1, 2), 0.8), ((0, 3), 0.6)]);
        save_ensemble(&ens, dir.path()).unwrap();
        let back = load_ensemble(dir.path()).unwrap();
        assert_eq!(back, ens);
        assert_eq!(back.omitted_pairs().len(), 3);
    }
}
