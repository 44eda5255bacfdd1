//! Run manifests: what was run, on which bytes, with which seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use applid::dataio::{MetadataEntry, METADATA_FILE};
use applid::ensemble::Voting;
use applid::harness::{ExperimentConfig, Study};
use applid::mlp::TrainOptions;
use applid::synth::SynthSpec;

pub const RUN_FILE: &str = "run.json";

/// A fully resolved command line. Replaying it reproduces every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Synth {
        spec: SynthSpec,
        out: PathBuf,
    },
    Crossval {
        data: PathBuf,
        config: ExperimentConfig,
        out: PathBuf,
    },
    Study {
        study: Study,
        values: Vec<f64>,
        data: PathBuf,
        config: ExperimentConfig,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        epsilon: usize,
        target_sample_rate_hz: Option<f64>,
        train_opts: TrainOptions,
        out: PathBuf,
    },
    Predict {
        model: PathBuf,
        input: PathBuf,
        sample_rate_hz: Option<f64>,
        grid_freq_hz: Option<f64>,
        voting: Voting,
        out: Option<PathBuf>,
    },
}

impl Invocation {
    pub fn out_dir(&self) -> Option<&Path> {
        match self {
            Invocation::Synth { out, .. }
            | Invocation::Crossval { out, .. }
            | Invocation::Study { out, .. }
            | Invocation::Train { out, .. } => Some(out),
            Invocation::Predict { out, .. } => out.as_deref(),
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            Invocation::Synth { out, .. }
            | Invocation::Crossval { out, .. }
            | Invocation::Study { out, .. }
            | Invocation::Train { out, .. } => *out = dir,
            Invocation::Predict { out, .. } => *out = Some(dir),
        }
    }

    /// Directory or file whose bytes the run reads.
    pub fn input(&self) -> Option<&Path> {
        match self {
            Invocation::Synth { .. } => None,
            Invocation::Crossval { data, .. } | Invocation::Study { data, .. } | Invocation::Train { data, .. } => {
                Some(data)
            }
            Invocation::Predict { input, .. } => Some(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub invocation: Invocation,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the input corpus, recording or model.
    pub input_digest: Option<String>,
    pub outputs: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(invocation: Invocation) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            invocation,
            seeds: BTreeMap::new(),
            input_digest: None,
            outputs: Vec::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn feed_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(())
}

/// SHA-256 over a corpus (metadata plus listed recordings in order), a model
/// directory (every file, sorted by name), or a single file.
pub fn digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_file() {
        feed_file(&mut hasher, path)?;
    } else if path.join(METADATA_FILE).is_file() {
        let meta = path.join(METADATA_FILE);
        feed_file(&mut hasher, &meta)?;
        let entries: Vec<MetadataEntry> = serde_json::from_str(&fs::read_to_string(&meta)?)
            .with_context(|| format!("parsing {}", meta.display()))?;
        for e in entries {
            hasher.update(e.file.as_bytes());
            feed_file(&mut hasher, &path.join(&e.file))?;
        }
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_FILE));
        files.sort();
        for f in files {
            hasher.update(f.file_name().unwrap().to_string_lossy().as_bytes());
            feed_file(&mut hasher, &f)?;
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}
