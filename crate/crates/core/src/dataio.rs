//! Loading and partitioning of appliance recordings.
//!
//! A corpus on disk is a directory holding one headerless two-column CSV file
//! per recording (`current,voltage` per line) and a `metadata.json` index:
//!
//! ```json
//! [{"file": "1.csv", "house": 1, "category": "Fan", "appliance_id": 3, "fs": 30000.0, "fg": 60.0}]
//! ```
//!
//! `file` is relative to the directory holding the index. This index schema is
//! local to this crate; other corpora's metadata has to be converted into it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::samples_per_period;

pub const METADATA_FILE: &str = "metadata.json";

/// One steady-state recording of a single appliance.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub sample_rate_hz: f64,
    pub grid_freq_hz: f64,
    pub house_id: i64,
    pub category: String,
    pub appliance_id: i64,
}

/// Household, category and instance of a recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementMeta {
    pub house_id: i64,
    pub category: String,
    pub appliance_id: i64,
}

impl Measurement {
    /// Builds a measurement, checking channel lengths and the period length.
    pub fn new(
        current: Vec<f64>,
        voltage: Vec<f64>,
        sample_rate_hz: f64,
        grid_freq_hz: f64,
        meta: MeasurementMeta,
    ) -> Result<Self> {
        if current.len() != voltage.len() {
            return Err(Error::domain(format!(
                "current has {} samples but voltage has {}",
                current.len(),
                voltage.len()
            )));
        }
        let d = samples_per_period(sample_rate_hz, grid_freq_hz)?;
        if current.len() < 2 * d {
            return Err(Error::Length {
                len: current.len(),
                min: 2 * d,
            });
        }
        Ok(Measurement {
            current,
            voltage,
            sample_rate_hz,
            grid_freq_hz,
            house_id: meta.house_id,
            category: meta.category,
            appliance_id: meta.appliance_id,
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    /// Samples per grid period.
    pub fn period_len(&self) -> usize {
        // validated at construction
        samples_per_period(self.sample_rate_hz, self.grid_freq_hz).expect("validated period")
    }

    pub fn meta(&self) -> MeasurementMeta {
        MeasurementMeta {
            house_id: self.house_id,
            category: self.category.clone(),
            appliance_id: self.appliance_id,
        }
    }
}

/// Reads a headerless `current,voltage` CSV file.
pub fn load_measurement(
    csv_path: &Path,
    meta: MeasurementMeta,
    sample_rate_hz: f64,
    grid_freq_hz: f64,
) -> Result<Measurement> {
    let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut current = Vec::new();
    let mut voltage = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(csv_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line: line_no,
            msg,
        };
        let mut cols = line.split(',');
        let (Some(i_str), Some(v_str), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(format!("expected two columns, got `{line}`")));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("invalid number `{}`", s.trim())))
        };
        current.push(parse(i_str)?);
        voltage.push(parse(v_str)?);
    }
    Measurement::new(current, voltage, sample_rate_hz, grid_freq_hz, meta)
}

/// Writes both channels as `current,voltage` lines using the shortest
/// representation that parses back to the identical `f64`.
pub fn write_measurement(m: &Measurement, csv_path: &Path) -> Result<()> {
    let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = BufWriter::new(file);
    for (i, v) in m.current.iter().zip(&m.voltage) {
        writeln!(w, "{i},{v}").map_err(|e| Error::io(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))
}

/// One row of `metadata.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEntry {
    pub file: String,
    pub house: i64,
    pub category: String,
    pub appliance_id: i64,
    pub fs: f64,
    pub fg: f64,
}

/// A labelled collection of recordings with its ordered label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub measurements: Vec<Measurement>,
    pub label_space: Vec<String>,
}

impl Dataset {
    pub fn new(measurements: Vec<Measurement>, label_space: Vec<String>) -> Result<Self> {
        let distinct: BTreeSet<&String> = label_space.iter().collect();
        if distinct.len() != label_space.len() {
            return Err(Error::domain("label space contains duplicates"));
        }
        if let Some(m) = measurements
            .iter()
            .find(|m| !label_space.contains(&m.category))
        {
            return Err(Error::UnknownLabel(m.category.clone()));
        }
        Ok(Dataset {
            measurements,
            label_space,
        })
    }

    /// Label space is the sorted set of categories present.
    pub fn from_measurements(measurements: Vec<Measurement>) -> Self {
        let label_space = measurements
            .iter()
            .map(|m| m.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Dataset {
            measurements,
            label_space,
        }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Distinct house ids in ascending order.
    pub fn houses(&self) -> Vec<i64> {
        self.measurements
            .iter()
            .map(|m| m.house_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Categories recorded in one house, in label-space order.
    pub fn house_inventory(&self, house_id: i64) -> Vec<String> {
        let present: BTreeSet<&str> = self
            .measurements
            .iter()
            .filter(|m| m.house_id == house_id)
            .map(|m| m.category.as_str())
            .collect();
        self.label_space
            .iter()
            .filter(|l| present.contains(l.as_str()))
            .cloned()
            .collect()
    }

    /// Number of measurements per house.
    pub fn house_counts(&self) -> BTreeMap<i64, usize> {
        let mut counts = BTreeMap::new();
        for m in &self.measurements {
            *counts.entry(m.house_id).or_insert(0) += 1;
        }
        counts
    }

    fn with_measurements(&self, measurements: Vec<Measurement>) -> Dataset {
        Dataset {
            measurements,
            label_space: self.label_space.clone(),
        }
    }

    /// Splits into (everything else, `test_house`). Both halves keep the full
    /// label space. The training half may be empty.
    pub fn partition_by_house(&self, test_house: i64) -> Result<(Dataset, Dataset)> {
        if !self.measurements.iter().any(|m| m.house_id == test_house) {
            return Err(Error::HouseNotFound(test_house));
        }
        let (test, train): (Vec<_>, Vec<_>) = self
            .measurements
            .iter()
            .cloned()
            .partition(|m| m.house_id == test_house);
        Ok((self.with_measurements(train), self.with_measurements(test)))
    }

    /// Keeps `ceil(fraction * houses)` houses drawn uniformly without
    /// replacement. Measurement order is preserved.
    pub fn subsample_houses(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::domain(format!(
                "house fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let houses = self.houses();
        let keep = ((fraction * houses.len() as f64).ceil() as usize).min(houses.len());
        if keep == houses.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept: BTreeSet<i64> = index::sample(&mut rng, houses.len(), keep)
            .into_iter()
            .map(|i| houses[i])
            .collect();
        Ok(self.with_measurements(
            self.measurements
                .iter()
                .filter(|m| kept.contains(&m.house_id))
                .cloned()
                .collect(),
        ))
    }

    /// Applies `f` to every measurement, keeping the label space.
    pub fn try_map<F>(&self, f: F) -> Result<Dataset>
    where
        F: Fn(&Measurement) -> Result<Measurement> + Sync + Send,
    {
        use rayon::prelude::*;
        let measurements = self
            .measurements
            .par_iter()
            .map(f)
            .collect::<Result<Vec<_>>>()?;
        Ok(self.with_measurements(measurements))
    }
}

/// Loads every recording listed in `<dir>/metadata.json`.
pub fn load_corpus(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let entries: Vec<MetadataEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: index_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    use rayon::prelude::*;
    let measurements = entries
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let meta = MeasurementMeta {
                house_id: e.house,
                category: e.category.clone(),
                appliance_id: e.appliance_id,
            };
            load_measurement(&path, meta, e.fs, e.fg).map_err(|err| match err {
                err @ (Error::Parse { .. } | Error::Io { .. }) => err,
                other => Error::Parse {
                    path,
                    line: 0,
                    msg: other.to_string(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_measurements(measurements))
}

/// Writes a corpus as numbered CSV files plus `metadata.json`. Returns the
/// paths written, index last.
pub fn write_corpus(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    let mut written = Vec::with_capacity(ds.len() + 1);
    for (i, m) in ds.measurements.iter().enumerate() {
        let file = format!("{}.csv", i + 1);
        let path = dir.join(&file);
        write_measurement(m, &path)?;
        written.push(path);
        entries.push(MetadataEntry {
            file,
            house: m.house_id,
            category: m.category.clone(),
            appliance_id: m.appliance_id,
            fs: m.sample_rate_hz,
            fg: m.grid_freq_hz,
        });
    }
    let index_path = dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(&index_path, json + "\n").map_err(|e| Error::io(&index_path, e))?;
    written.push(index_path);
    Ok(written)
}
