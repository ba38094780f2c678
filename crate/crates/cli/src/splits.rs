use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mimask_core::sudoku::{load_puzzles, PuzzleRecord};
use mimask_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SPLIT_FORMAT_VERSION: u32 = 1;

/// Train/val/test membership of a generated puzzle file, by content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub format_version: u32,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".splits.json");
    PathBuf::from(s)
}

pub fn puzzle_key(p: &PuzzleRecord) -> String {
    format!("{:016x}", p.content_hash())
}

impl SplitManifest {
    /// Shuffles the puzzles with `seed` and cuts val and test off the front.
    pub fn assign(puzzles: &[PuzzleRecord], val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&val_frac) || !(0.0..=1.0).contains(&test_frac) || val_frac + test_frac > 1.0 {
            return Err(Error::Usage(format!("split fractions {val_frac} + {test_frac} must lie in [0, 1]")).into());
        }
        let mut keys: Vec<String> = puzzles.iter().map(puzzle_key).collect();
        keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (val_frac * keys.len() as f64).round() as usize;
        let n_test = ((test_frac * keys.len() as f64).round() as usize).min(keys.len() - n_val);
        let train = keys.split_off(n_val + n_test);
        let val = keys.split_off(n_test);
        Ok(Self {
            format_version: SPLIT_FORMAT_VERSION,
            seed,
            train,
            val,
            test: keys,
        })
    }

    pub fn keys(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split {other:?}; expected train, val or test")).into()),
        }
    }
}

/// Loads a puzzle file, optionally keeping only one split. File order is
/// preserved.
pub fn load_data(path: &Path, split: Option<&str>) -> Result<Vec<PuzzleRecord>> {
    let puzzles = load_puzzles(path).with_context(|| format!("reading puzzles from {}", path.display()))?;
    let Some(split) = split else {
        return Ok(puzzles);
    };
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| {
        Error::Usage(format!(
            "split {split:?} requested but {} is unreadable: {e}",
            mpath.display()
        ))
    })?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(Error::Json)?;
    let keep: HashSet<&str> = manifest.keys(split)?.iter().map(String::as_str).collect();
    Ok(puzzles
        .into_iter()
        .filter(|p| keep.contains(puzzle_key(p).as_str()))
        .collect())
}
