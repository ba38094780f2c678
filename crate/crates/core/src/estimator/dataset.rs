use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, Error, Result};
use crate::mdm::{apply_forward_mask, DenoisingModel, NoiseSchedule, SequenceState};
use crate::mi::{ground_truth_with_base, MiMatrix};
use crate::nn::Tensor;
use crate::sudoku::PuzzleRecord;

/// One oracle-labelled training example for the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct MiExample {
    /// Noise level the context was drawn at.
    pub t: f64,
    /// `N x D` backbone hidden states of the masked context.
    pub hidden: Tensor,
    pub target: MiMatrix,
    /// Backbone evaluations the oracle spent on this example.
    pub oracle_nfe: u64,
}

impl MiExample {
    pub fn masked(&self) -> &[usize] {
        self.target.masked()
    }
}

/// Draws `samples_per_puzzle` noisy contexts per puzzle with
/// `t ~ U(t_range)` (clues stay pinned) and labels each with the oracle.
/// Example `k` uses its own RNG stream derived from `seed` and `k`.
pub fn build_mi_dataset<M: DenoisingModel>(
    model: &M,
    puzzles: &[PuzzleRecord],
    samples_per_puzzle: usize,
    t_range: (f64, f64),
    seed: u64,
) -> Result<Vec<MiExample>> {
    let (lo, hi) = t_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return usage_err(format!("t range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"));
    }
    let vocab = model.vocab_size() as u64;
    let mut out = Vec::with_capacity(puzzles.len() * samples_per_puzzle);
    for (p, puzzle) in puzzles.iter().enumerate() {
        let clean = SequenceState::clean_from_puzzle(puzzle);
        for s in 0..samples_per_puzzle {
            let k = (p * samples_per_puzzle + s) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let t = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let state = apply_forward_mask(&clean, NoiseSchedule::Linear, t, &mut rng)?;
            let (target, base) = ground_truth_with_base(model, &state)?;
            let m = state.masked_count() as u64;
            let oracle_nfe = if m >= 2 { 1 + m * vocab } else { 1 };
            out.push(MiExample {
                t,
                hidden: base.hidden,
                target,
                oracle_nfe,
            });
        }
    }
    Ok(out)
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// JSON sidecar describing a binary MI dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiDatasetMeta {
    pub format_version: u32,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub count: usize,
    /// Content hash of the backbone checkpoint that produced the data.
    pub mdm_hash: String,
    pub seed: u64,
    pub samples_per_puzzle: usize,
    pub t_range: (f64, f64),
    pub total_oracle_nfe: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Record layout (all little-endian): `u32` payload length, then `t: f64`,
/// `oracle_nfe: u64`, `n: u32`, `d: u32`, hidden `n*d` f64, masked bitmap
/// of `ceil(n/8)` bytes (bit `i % 8` of byte `i / 8`), target `n*n` f64.
pub fn write_example<W: Write>(w: &mut W, ex: &MiExample) -> Result<()> {
    let (n, d) = ex.hidden.dims2()?;
    if ex.target.n() != n {
        return shape_err("hidden rows and target size differ");
    }
    let mut buf = Vec::with_capacity(24 + 8 * (n * d + n * n) + n.div_ceil(8));
    buf.extend_from_slice(&ex.t.to_le_bytes());
    buf.extend_from_slice(&ex.oracle_nfe.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in ex.hidden.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut bitmap = vec![0u8; n.div_ceil(8)];
    for &i in ex.target.masked() {
        bitmap[i / 8] |= 1 << (i % 8);
    }
    buf.extend_from_slice(&bitmap);
    for v in ex.target.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let len = u32::try_from(buf.len()).map_err(|_| Error::Format("record too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format("truncated MI record".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let bytes = self.take(k.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_example<R: Read>(r: &mut R) -> Result<Option<MiExample>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated MI record".into()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let t = f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let oracle_nfe = c.u64()?;
    let n = c.u32()? as usize;
    let d = c.u32()? as usize;
    let hidden = c.f64s(n * d)?;
    let bitmap = c.take(n.div_ceil(8))?;
    let masked: Vec<usize> = (0..n).filter(|&i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
    let values = c.f64s(n * n)?;
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in MI record".into()));
    }
    let target = MiMatrix::from_raw(n, &values, &masked)?;
    if target.values() != values.as_slice() {
        return Err(Error::Format("stored target violates MI matrix invariants".into()));
    }
    Ok(Some(MiExample {
        t,
        hidden: Tensor::new(vec![n, d], hidden)?,
        target,
        oracle_nfe,
    }))
}

/// Writes the record stream to `path` and the sidecar next to it.
pub fn save_mi_dataset(path: &Path, examples: &[MiExample], meta: &MiDatasetMeta) -> Result<()> {
    if meta.count != examples.len() {
        return usage_err("sidecar count does not match the examples");
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        write_example(&mut w, ex)?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load_mi_dataset(path: &Path) -> Result<(Vec<MiExample>, MiDatasetMeta)> {
    let meta: MiDatasetMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            meta.format_version
        )));
    }
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::with_capacity(meta.count);
    while let Some(ex) = read_example(&mut r)? {
        if ex.hidden.shape() != [meta.seq_len, meta.hidden_dim] {
            return Err(Error::Format(format!(
                "record {} has shape {:?}",
                out.len(),
                ex.hidden.shape()
            )));
        }
        out.push(ex);
    }
    if out.len() != meta.count {
        return Err(Error::Format(format!(
            "sidecar says {} records, file has {}",
            meta.count,
            out.len()
        )));
    }
    Ok((out, meta))
}
