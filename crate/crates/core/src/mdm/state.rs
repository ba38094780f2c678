use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::sudoku::{Board, PuzzleRecord};

/// Token id type. Ids `0..vocab` are real tokens, `vocab` is the mask token.
pub type Token = u16;

/// A partially masked sequence. Pinned positions are permanent context
/// (e.g. Sudoku clues) and are never masked or resampled.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceState {
    vocab: usize,
    tokens: Vec<Token>,
    pinned: Vec<bool>,
}

impl SequenceState {
    /// A state from optional tokens (`None` = masked), nothing pinned.
    pub fn new(vocab: usize, tokens: &[Option<Token>]) -> Result<Self> {
        let mut toks = Vec::with_capacity(tokens.len());
        for t in tokens {
            match t {
                Some(v) if (*v as usize) >= vocab => {
                    return usage_err(format!("token {v} out of range for vocabulary {vocab}"))
                }
                Some(v) => toks.push(*v),
                None => toks.push(vocab as Token),
            }
        }
        Ok(Self {
            vocab,
            pinned: vec![false; toks.len()],
            tokens: toks,
        })
    }

    pub fn fully_masked(vocab: usize, len: usize) -> Self {
        Self {
            vocab,
            tokens: vec![vocab as Token; len],
            pinned: vec![false; len],
        }
    }

    /// Clues pinned, holes masked. Digit `d` becomes token `d - 1`.
    pub fn from_puzzle(puzzle: &PuzzleRecord) -> Self {
        let vocab = puzzle.clues.side();
        let tokens = puzzle
            .clues
            .cells()
            .iter()
            .map(|&d| if d == 0 { vocab as Token } else { (d - 1) as Token })
            .collect();
        let pinned = puzzle.clues.cells().iter().map(|&d| d != 0).collect();
        Self { vocab, tokens, pinned }
    }

    /// The clean sequence `x0` for a puzzle: the solution with clue cells
    /// pinned.
    pub fn clean_from_puzzle(puzzle: &PuzzleRecord) -> Self {
        let vocab = puzzle.solution.side();
        let tokens = puzzle.solution.cells().iter().map(|&d| (d - 1) as Token).collect();
        let pinned = puzzle.clues.cells().iter().map(|&d| d != 0).collect();
        Self { vocab, tokens, pinned }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask_token(&self) -> Token {
        self.vocab as Token
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> Option<Token> {
        (!self.is_masked(i)).then_some(self.tokens[i])
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_token()
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned[i]
    }

    pub fn pin(&mut self, i: usize) {
        self.pinned[i] = true;
    }

    pub fn mask_flags(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_masked(i)).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_token()).count()
    }

    /// Commits `token` at a masked position.
    pub fn unmask(&mut self, i: usize, token: Token) -> Result<()> {
        if !self.is_masked(i) {
            return usage_err(format!("position {i} is already unmasked"));
        }
        if token as usize >= self.vocab {
            return usage_err(format!("token {token} out of range"));
        }
        self.tokens[i] = token;
        Ok(())
    }

    /// Overwrites position `i` with `token` regardless of its current state,
    /// as used to probe a conditional.
    pub fn with_fixed(&self, i: usize, token: Token) -> Self {
        let mut s = self.clone();
        s.tokens[i] = token;
        s
    }

    pub fn mask(&mut self, i: usize) -> Result<()> {
        if self.pinned[i] {
            return usage_err(format!("position {i} is pinned"));
        }
        self.tokens[i] = self.mask_token();
        Ok(())
    }

    /// Sudoku board view: masked cells become 0.
    pub fn to_board(&self, box_size: usize) -> Result<Board> {
        let cells = self
            .tokens
            .iter()
            .map(|&t| if t as usize == self.vocab { 0 } else { t as u8 + 1 })
            .collect();
        Board::from_cells(box_size, cells)
    }
}

/// Masking probability as a function of diffusion time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    #[default]
    Linear,
}

impl NoiseSchedule {
    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return usage_err(format!("diffusion time {t} outside [0, 1]"));
        }
        Ok(match self {
            NoiseSchedule::Linear => t,
        })
    }
}

/// Forward corruption: every non-pinned position is independently replaced
/// by the mask token with probability `gamma(t)`; the rest keep their value.
pub fn apply_forward_mask<R: Rng>(
    x0: &SequenceState,
    schedule: NoiseSchedule,
    t: f64,
    rng: &mut R,
) -> Result<SequenceState> {
    let p = schedule.gamma(t)?;
    let mut xt = x0.clone();
    for i in 0..xt.len() {
        if xt.pinned[i] {
            continue;
        }
        // Draw for every position so the stream does not depend on p.
        let u: f64 = rng.gen();
        if u < p {
            xt.tokens[i] = xt.mask_token();
        }
    }
    Ok(xt)
}
