//! Run-directory layout and file formats. See `docs/FORMATS.md`.
//!
//! ```text
//! <run>/config.toml             config snapshot
//! <run>/world.json              world document
//! <run>/corpus/biased.jsonl     image-free pretraining captions
//! <run>/corpus/sft.jsonl        grounded captions
//! <run>/checkpoints/base.ckpt   biased base policy
//! <run>/checkpoints/round_<r>.ckpt
//! <run>/pairs/round_<r>.jsonl   training pairs with their rejected images
//! <run>/stats/round_<r>.json    sifting counts and reference hashes
//! <run>/steps/round_<r>.csv     per-step losses
//! <run>/history.json            pretraining and warm-up NLL curves
//! <run>/metrics.csv
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::align::{RoundOutput, StepLog};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::MetricsRow;
use crate::objective::TrainingPair;
use crate::policy::{write_atomic, Context, PolicyParams};
use crate::sift::{PreferencePair, SiftStats};
use crate::world::{Caption, World};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub format_version: u32,
    pub world: World,
}

/// One line of a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub format_version: u32,
    pub seed: u64,
    pub round: usize,
    pub index: usize,
    #[serde(flatten)]
    pub pair: PreferencePair,
    /// Rejected-image features used in training.
    pub phi_tilde: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub format_version: u32,
    pub seed: u64,
    pub round: usize,
    pub sift: SiftStats,
    pub scoring_ref_hash: String,
    pub opt_ref_hash_before: String,
    pub opt_ref_hash_after: String,
    pub policy_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub format_version: u32,
    pub seed: u64,
    pub pretrain_nll: Vec<f64>,
    pub sft_nll: Vec<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).map_err(|e| Error::format(path, e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    write_json(
        path,
        &WorldFile {
            format_version: FORMAT_VERSION,
            world: world.clone(),
        },
    )
}

pub fn load_world(path: &Path) -> Result<World> {
    let file: WorldFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {}", file.format_version)));
    }
    Ok(file.world)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(MetricsRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricsRow::CSV_HEADER) {
        return Err(Error::format(path, "unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| MetricsRow::from_csv(l).ok_or_else(|| Error::format(path, format!("bad row {l:?}"))))
        .collect()
}

/// A run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn world_path(&self) -> PathBuf {
        self.root.join("world.json")
    }

    pub fn biased_corpus_path(&self) -> PathBuf {
        self.root.join("corpus").join("biased.jsonl")
    }

    pub fn sft_corpus_path(&self) -> PathBuf {
        self.root.join("corpus").join("sft.jsonl")
    }

    pub fn base_path(&self) -> PathBuf {
        self.root.join("checkpoints").join("base.ckpt")
    }

    pub fn checkpoint_path(&self, round: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("round_{round}.ckpt"))
    }

    pub fn pairs_path(&self, round: usize) -> PathBuf {
        self.root.join("pairs").join(format!("round_{round}.jsonl"))
    }

    pub fn stats_path(&self, round: usize) -> PathBuf {
        self.root.join("stats").join(format!("round_{round}.json"))
    }

    pub fn steps_path(&self, round: usize) -> PathBuf {
        self.root.join("steps").join(format!("round_{round}.csv"))
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn save_config(&self, cfg: &RunConfig) -> Result<()> {
        write_atomic(&self.config_path(), cfg.to_toml().as_bytes())
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn save_world(&self, world: &World) -> Result<()> {
        save_world(&self.world_path(), world)
    }

    pub fn load_world(&self) -> Result<World> {
        load_world(&self.world_path())
    }

    pub fn save_corpora(&self, world: &World, biased: &[Caption]) -> Result<()> {
        write_jsonl(&self.biased_corpus_path(), biased)?;
        write_jsonl(&self.sft_corpus_path(), &world.sft_corpus())
    }

    pub fn load_biased_corpus(&self) -> Result<Vec<Caption>> {
        read_jsonl(&self.biased_corpus_path())
    }

    pub fn load_checkpoint(&self, path: &Path, seed: u64) -> Result<PolicyParams> {
        let (p, stored) = PolicyParams::load(path)?;
        if stored != seed {
            return Err(Error::format(path, format!("checkpoint seed {stored} does not match run seed {seed}")));
        }
        Ok(p)
    }

    /// Checkpoints of rounds `0..n`.
    pub fn load_checkpoints(&self, n: usize, seed: u64) -> Result<Vec<PolicyParams>> {
        (0..n).map(|r| self.load_checkpoint(&self.checkpoint_path(r), seed)).collect()
    }

    pub fn save_history(&self, seed: u64, pretrain_nll: &[f64], sft_nll: &[f64]) -> Result<()> {
        write_json(
            &self.history_path(),
            &History {
                format_version: FORMAT_VERSION,
                seed,
                pretrain_nll: pretrain_nll.to_vec(),
                sft_nll: sft_nll.to_vec(),
            },
        )
    }

    pub fn load_history(&self) -> Result<History> {
        read_json(&self.history_path())
    }

    /// Writes the artifacts of a finished round (checkpoint, pairs, stats,
    /// step log).
    pub fn save_round(&self, seed: u64, out: &RoundOutput) -> Result<()> {
        let r = out.round;
        out.policy.save(&self.checkpoint_path(r), seed)?;
        let records: Vec<PairRecord> = out
            .pairs
            .iter()
            .zip(&out.training)
            .enumerate()
            .map(|(index, (pair, t))| PairRecord {
                format_version: FORMAT_VERSION,
                seed,
                round: r,
                index,
                pair: pair.clone(),
                phi_tilde: t.ctx_tilde.phi.clone(),
            })
            .collect();
        write_jsonl(&self.pairs_path(r), &records)?;
        write_json(
            &self.stats_path(r),
            &RoundStats {
                format_version: FORMAT_VERSION,
                seed,
                round: r,
                sift: out.stats,
                scoring_ref_hash: out.scoring_ref_hash.clone(),
                opt_ref_hash_before: out.opt_ref_hash_before.clone(),
                opt_ref_hash_after: out.opt_ref_hash_after.clone(),
                policy_hash: out.policy.content_hash(),
            },
        )?;
        let mut csv = String::from(StepLog::CSV_HEADER);
        csv.push('\n');
        for s in &out.steps {
            csv.push_str(&s.to_csv());
            csv.push('\n');
        }
        write_atomic(&self.steps_path(r), csv.as_bytes())
    }

    pub fn load_stats(&self, round: usize) -> Result<RoundStats> {
        read_json(&self.stats_path(round))
    }

    pub fn load_pairs(&self, round: usize) -> Result<Vec<PairRecord>> {
        read_jsonl(&self.pairs_path(round))
    }

    /// Rebuilds the stored training pairs of a round.
    pub fn load_training_pairs(&self, world: &World, round: usize) -> Result<Vec<TrainingPair>> {
        let path = self.pairs_path(round);
        self.load_pairs(round)?
            .into_iter()
            .map(|rec| {
                let image = world
                    .image(rec.pair.image_id)
                    .ok_or_else(|| Error::format(&path, format!("unknown image {}", rec.pair.image_id)))?;
                Ok(TrainingPair {
                    ctx: Context::new(image.phi.clone(), rec.pair.prompt_id),
                    ctx_tilde: Context::new(rec.phi_tilde, rec.pair.prompt_id),
                    chosen: rec.pair.chosen.tokens,
                    rejected: rec.pair.rejected.tokens,
                })
            })
            .collect()
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricsRow>> {
        read_metrics(&self.metrics_path())
    }

    /// Inserts or replaces the row of `row.round`; rows of later rounds are
    /// dropped because they no longer derive from the stored checkpoints.
    pub fn upsert_metrics(&self, row: MetricsRow) -> Result<()> {
        let path = self.metrics_path();
        let mut rows = if path.exists() { read_metrics(&path)? } else { Vec::new() };
        rows.retain(|r| r.round < row.round);
        rows.push(row);
        write_metrics(&path, &rows)
    }
}
