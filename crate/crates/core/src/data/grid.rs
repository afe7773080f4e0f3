use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::DataError;

/// An `height×width` grid of token ids in raster order, with its class label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TokenGrid {
    pub fn new(
        height: usize,
        width: usize,
        tokens: Vec<usize>,
        label: usize,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || tokens.len() != height * width {
            return Err(DataError::Shape(format!(
                "{} tokens do not fill a {height}x{width} grid",
                tokens.len()
            )));
        }
        Ok(Self {
            height,
            width,
            tokens,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.width..(r + 1) * self.width]
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.tokens[r * self.width + c]
    }

    /// Checks every token is `< vocab` and the label `< classes`.
    pub fn validate(&self, vocab: usize, classes: usize) -> Result<(), DataError> {
        if self.label >= classes {
            return Err(DataError::Range(format!(
                "label {} >= {classes} classes",
                self.label
            )));
        }
        if let Some((i, t)) = self.tokens.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(DataError::Range(format!(
                "token {t} at index {i} >= vocab {vocab}"
            )));
        }
        Ok(())
    }
}

/// `label: t1 t2 ... tN`
pub fn format_line(grid: &TokenGrid) -> String {
    let mut line = format!("{}:", grid.label);
    for t in &grid.tokens {
        write!(line, " {t}").expect("writing to a String");
    }
    line
}

/// Parses one grid line; the token count must equal `height·width`.
pub fn parse_line(line: &str, height: usize, width: usize) -> Result<TokenGrid, DataError> {
    let (label, rest) = line
        .split_once(':')
        .ok_or_else(|| DataError::Parse(format!("missing ':' in {line:?}")))?;
    let label = label
        .trim()
        .parse()
        .map_err(|_| DataError::Parse(format!("bad label {:?}", label.trim())))?;
    let tokens = rest
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| DataError::Parse(format!("bad token {t:?}")))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    TokenGrid::new(height, width, tokens, label)
}

pub fn write_grids<W: Write>(mut out: W, grids: &[TokenGrid]) -> Result<(), DataError> {
    for g in grids {
        writeln!(out, "{}", format_line(g))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads grid lines, skipping blank lines and lines starting with `#`.
/// Errors carry the 1-based line number.
pub fn read_grids<R: BufRead>(
    input: R,
    height: usize,
    width: usize,
) -> Result<Vec<TokenGrid>, DataError> {
    let mut grids = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let grid = parse_line(trimmed, height, width)
            .map_err(|e| DataError::Parse(format!("line {}: {e}", i + 1)))?;
        grids.push(grid);
    }
    Ok(grids)
}
