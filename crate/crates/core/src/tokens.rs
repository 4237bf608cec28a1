use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// An `h x w` grid of token ids in raster order (left-to-right, top-down),
/// which is also the generation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<usize>) -> Result<Self> {
        if h == 0 || w == 0 {
            return invalid("token grid dimensions must be positive");
        }
        if tokens.len() != h * w {
            return invalid(format!("expected {} tokens, got {}", h * w, tokens.len()));
        }
        Ok(Self { h, w, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.tokens[row * self.w + col]
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab_size) {
            Some(t) => invalid(format!("token id {t} out of range for vocabulary of {vocab_size}")),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: TokenGrid = serde_json::from_str(text)?;
        Self::new(grid.h, grid.w, grid.tokens)
    }
}
