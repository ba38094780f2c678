//! Sudoku boards, puzzle generation, validation, and the line-oriented
//! dataset format (`<clues>,<solution>`, `#` comments).

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{usage_err, Error, Result};

/// A `b^2 x b^2` grid stored row-major; `0` marks an empty cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Board {
    box_size: usize,
    cells: Vec<u8>,
}

impl Board {
    pub fn empty(box_size: usize) -> Result<Self> {
        check_box_size(box_size)?;
        Ok(Self {
            box_size,
            cells: vec![0; box_size.pow(4)],
        })
    }

    pub fn from_cells(box_size: usize, cells: Vec<u8>) -> Result<Self> {
        check_box_size(box_size)?;
        let side = box_size * box_size;
        if cells.len() != side * side {
            return usage_err(format!("board needs {} cells, got {}", side * side, cells.len()));
        }
        if let Some(bad) = cells.iter().find(|&&c| c as usize > side) {
            return usage_err(format!("digit {bad} out of range 0..={side}"));
        }
        Ok(Self { box_size, cells })
    }

    pub fn box_size(&self) -> usize {
        self.box_size
    }

    /// Digits per row (`b^2`).
    pub fn side(&self) -> usize {
        self.box_size * self.box_size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, idx: usize) -> u8 {
        self.cells[idx]
    }

    pub fn set(&mut self, idx: usize, digit: u8) {
        self.cells[idx] = digit;
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|&c| c != 0)
    }

    pub fn empty_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 0).count()
    }

    /// Cell indices of every row, column, and box.
    pub fn units(&self) -> Vec<Vec<usize>> {
        units(self.box_size)
    }

    /// True iff no unit contains a repeated non-zero digit.
    pub fn is_consistent(&self) -> bool {
        self.units().iter().all(|unit| {
            let mut seen = 0u32;
            unit.iter().all(|&i| {
                let d = self.cells[i];
                if d == 0 {
                    return true;
                }
                let bit = 1u32 << d;
                let fresh = seen & bit == 0;
                seen |= bit;
                fresh
            })
        })
    }

    fn can_place(&self, idx: usize, digit: u8) -> bool {
        let side = self.side();
        let (r, c) = (idx / side, idx % side);
        let b = self.box_size;
        let (br, bc) = (r / b * b, c / b * b);
        for k in 0..side {
            if self.cells[r * side + k] == digit || self.cells[k * side + c] == digit {
                return false;
            }
            let (rr, cc) = (br + k / b, bc + k % b);
            if self.cells[rr * side + cc] == digit {
                return false;
            }
        }
        true
    }

    fn to_digit_string(&self) -> String {
        self.cells.iter().map(|&d| char::from(b'0' + d)).collect()
    }
}

impl fmt::Display for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = self.side();
        for r in 0..side {
            let row: Vec<String> = self.cells[r * side..(r + 1) * side]
                .iter()
                .map(|&d| if d == 0 { ".".to_string() } else { d.to_string() })
                .collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn check_box_size(b: usize) -> Result<()> {
    if b == 2 || b == 3 {
        Ok(())
    } else {
        usage_err(format!("box size must be 2 or 3, got {b}"))
    }
}

/// Rows, then columns, then boxes.
pub fn units(box_size: usize) -> Vec<Vec<usize>> {
    let side = box_size * box_size;
    let mut out = Vec::with_capacity(3 * side);
    for r in 0..side {
        out.push((0..side).map(|c| r * side + c).collect());
    }
    for c in 0..side {
        out.push((0..side).map(|r| r * side + c).collect());
    }
    for br in 0..box_size {
        for bc in 0..box_size {
            out.push(
                (0..side)
                    .map(|k| (br * box_size + k / box_size) * side + bc * box_size + k % box_size)
                    .collect(),
            );
        }
    }
    out
}

/// A puzzle and the complete grid it was punched from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PuzzleRecord {
    pub clues: Board,
    pub solution: Board,
}

impl PuzzleRecord {
    pub fn new(clues: Board, solution: Board) -> Result<Self> {
        if clues.box_size != solution.box_size {
            return usage_err("clues and solution have different box sizes");
        }
        if !solution.is_complete() || !solution.is_consistent() {
            return usage_err("solution is not a valid complete grid");
        }
        if let Some(i) = (0..clues.cells.len()).find(|&i| clues.cells[i] != 0 && clues.cells[i] != solution.cells[i]) {
            return usage_err(format!("clue at cell {i} disagrees with the solution"));
        }
        Ok(Self { clues, solution })
    }

    pub fn holes(&self) -> usize {
        self.clues.empty_count()
    }

    /// Stable identifier derived from the clue string.
    pub fn content_hash(&self) -> u64 {
        let digest = Sha256::digest(self.clues.to_digit_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Random complete grid by randomized backtracking; deterministic per seed.
pub fn generate_complete_grid(box_size: usize, seed: u64) -> Result<Board> {
    let mut board = Board::empty(box_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filled = fill(&mut board, 0, &mut rng);
    debug_assert!(filled);
    Ok(board)
}

fn fill(board: &mut Board, idx: usize, rng: &mut ChaCha8Rng) -> bool {
    if idx == board.cells.len() {
        return true;
    }
    let mut digits: Vec<u8> = (1..=board.side() as u8).collect();
    digits.shuffle(rng);
    for d in digits {
        if board.can_place(idx, d) {
            board.cells[idx] = d;
            if fill(board, idx + 1, rng) {
                return true;
            }
            board.cells[idx] = 0;
        }
    }
    false
}

/// Zeroes exactly `n_holes` cells chosen uniformly without replacement.
/// The resulting puzzle is not guaranteed to have a unique solution.
pub fn punch_holes(board: &Board, n_holes: usize, seed: u64) -> Result<PuzzleRecord> {
    let n = board.cells.len();
    if n_holes > n {
        return usage_err(format!("cannot punch {n_holes} holes in {n} cells"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clues = board.clone();
    for idx in rand::seq::index::sample(&mut rng, n, n_holes) {
        clues.cells[idx] = 0;
    }
    PuzzleRecord::new(clues, board.clone())
}

/// True iff `candidate` is a complete valid grid that agrees with every clue.
pub fn check_solution(puzzle: &PuzzleRecord, candidate: &Board) -> bool {
    candidate.box_size == puzzle.clues.box_size
        && candidate.is_complete()
        && candidate.is_consistent()
        && puzzle
            .clues
            .cells
            .iter()
            .zip(&candidate.cells)
            .all(|(&c, &x)| c == 0 || c == x)
}

fn box_size_for_len(len: usize) -> Option<usize> {
    match len {
        16 => Some(2),
        81 => Some(3),
        _ => None,
    }
}

/// Parses one `<clues>,<solution>` line; `line_no` is used in errors.
pub fn parse_puzzle_line(text: &str, line_no: usize) -> Result<PuzzleRecord> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let (clue_str, sol_str) = text
        .trim()
        .split_once(',')
        .ok_or_else(|| err("expected '<clues>,<solution>'".into()))?;
    let box_size = box_size_for_len(clue_str.len()).ok_or_else(|| {
        err(format!(
            "clue string has {} characters, expected 16 or 81",
            clue_str.len()
        ))
    })?;
    if sol_str.len() != clue_str.len() {
        return Err(err(format!(
            "solution has {} characters, clues have {}",
            sol_str.len(),
            clue_str.len()
        )));
    }
    let side = (box_size * box_size) as u8;
    let digits = |s: &str, allow_zero: bool| -> Result<Vec<u8>> {
        s.bytes()
            .map(|c| match c {
                b'0'..=b'9' if c - b'0' <= side && (allow_zero || c != b'0') => Ok(c - b'0'),
                _ => Err(err(format!("bad character {:?}", c as char))),
            })
            .collect()
    };
    let clues = Board::from_cells(box_size, digits(clue_str, true)?)?;
    let solution = Board::from_cells(box_size, digits(sol_str, false)?)?;
    PuzzleRecord::new(clues, solution).map_err(|e| err(e.to_string()))
}

pub fn format_puzzle_line(record: &PuzzleRecord) -> String {
    format!(
        "{},{}",
        record.clues.to_digit_string(),
        record.solution.to_digit_string()
    )
}

pub fn read_puzzles<R: BufRead>(reader: R) -> Result<Vec<PuzzleRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_puzzle_line(trimmed, i + 1)?);
    }
    Ok(out)
}

pub fn load_puzzles(path: &Path) -> Result<Vec<PuzzleRecord>> {
    let file = std::fs::File::open(path)?;
    read_puzzles(std::io::BufReader::new(file))
}

pub fn write_puzzles<W: Write>(mut w: W, header: &str, puzzles: &[PuzzleRecord]) -> Result<()> {
    for line in header.lines() {
        writeln!(w, "# {line}")?;
    }
    for p in puzzles {
        writeln!(w, "{}", format_puzzle_line(p))?;
    }
    Ok(())
}

/// Generates `count` distinct puzzles (by clue string). Each puzzle's hole
/// count is drawn uniformly from `holes` (inclusive). `exclude` lists clue
/// sets that must not be produced, e.g. an earlier split.
pub fn generate_puzzles(
    box_size: usize,
    count: usize,
    holes: std::ops::RangeInclusive<usize>,
    seed: u64,
    exclude: &HashSet<PuzzleRecord>,
) -> Result<Vec<PuzzleRecord>> {
    check_box_size(box_size)?;
    let cells = box_size.pow(4);
    if holes.is_empty() || *holes.end() > cells {
        return usage_err(format!("hole count must lie in 0..={cells}"));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Board> = exclude.iter().map(|p| p.clues.clone()).collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 100 + 10_000 {
            return usage_err(format!(
                "could only find {} distinct puzzles of the requested shape",
                out.len()
            ));
        }
        let grid = generate_complete_grid(box_size, rng.gen())?;
        let n = rng.gen_range(holes.clone());
        let rec = punch_holes(&grid, n, rng.gen())?;
        if seen.insert(rec.clues.clone()) {
            out.push(rec);
        }
    }
    Ok(out)
}
