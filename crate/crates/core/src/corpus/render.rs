//! Deterministic spatial layout of token sequences onto glyph grids.
//!
//! Every entity token owns exactly one grid cell; structural tokens
//! (scripts and braces) shape the layout but leave no ink. Fractions draw
//! a one-cell bar between stacked arguments, radicals a one-cell sign
//! left of the radicand, superscripts sit strictly above and to the right
//! of their base, subscripts strictly below and to the right. The layout
//! is centered on the grid and written as one-hot planes indexed by
//! token id, so the rendered picture determines the expression exactly.
//!
//! Input sequences must be fully braced (every script and radical
//! argument wrapped in `{ }`), which is what normalization produces.

use crate::forest::{
    derive_targets, encode_forest, find_group_end_in, ForestError, ForestTargets,
};
use crate::lexer::{SymbolClass, Token, TokenSeq, Vocabulary};
use crate::model::FeatureGrid;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("script at token {index} is missing a base or a braced argument")]
    MalformedScript { index: usize },
    #[error("unbalanced braces at token {index}")]
    UnbalancedBraces { index: usize },
    #[error("structure token {text:?} at token {index} has no layout rule")]
    UnsupportedStructure { index: usize, text: String },
    #[error(
        "expression needs {need_width}x{need_height} cells but the grid is {width}x{height}"
    )]
    GridOverflow {
        width: usize,
        height: usize,
        need_width: usize,
        need_height: usize,
    },
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// A rectangular arrangement of glyph cells with a writing line.
///
/// `cells` holds `(row, col, token_index)` triples in box-local
/// coordinates; `baseline` is the row the box aligns on when placed next
/// to its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutBox {
    pub width: usize,
    pub height: usize,
    pub baseline: usize,
    pub cells: Vec<(usize, usize, usize)>,
}

impl LayoutBox {
    fn empty() -> LayoutBox {
        LayoutBox {
            width: 0,
            height: 0,
            baseline: 0,
            cells: Vec::new(),
        }
    }

    fn glyph(token_index: usize) -> LayoutBox {
        LayoutBox {
            width: 1,
            height: 1,
            baseline: 0,
            cells: vec![(0, 0, token_index)],
        }
    }

    /// Copies `other`'s cells in, offset to `(row, col)`.
    fn absorb(&mut self, other: &LayoutBox, row: usize, col: usize) {
        for &(r, c, t) in &other.cells {
            self.cells.push((r + row, c + col, t));
        }
    }

    /// Rows below the baseline, the baseline row included.
    fn descent(&self) -> usize {
        self.height - self.baseline
    }
}

/// Joins boxes left to right on a shared baseline.
fn hcat(parts: &[LayoutBox]) -> LayoutBox {
    if parts.is_empty() {
        return LayoutBox::empty();
    }
    let baseline = parts.iter().map(|b| b.baseline).max().unwrap_or(0);
    let descent = parts.iter().map(|b| b.descent()).max().unwrap_or(0);
    let mut out = LayoutBox {
        width: 0,
        height: baseline + descent,
        baseline,
        cells: Vec::new(),
    };
    for part in parts {
        out.absorb(part, baseline - part.baseline, out.width);
        out.width += part.width;
    }
    out
}

/// Script argument above (superscript) or below (subscript) the base,
/// starting at the base's right edge. The argument's rows never overlap
/// the base's rows.
fn scripted(base: LayoutBox, arg: LayoutBox, above: bool) -> LayoutBox {
    let mut out = LayoutBox {
        width: base.width + arg.width,
        height: base.height + arg.height,
        baseline: if above {
            base.baseline + arg.height
        } else {
            base.baseline
        },
        cells: Vec::new(),
    };
    if above {
        out.absorb(&base, arg.height, 0);
        out.absorb(&arg, 0, base.width);
    } else {
        out.absorb(&base, 0, 0);
        out.absorb(&arg, base.height, base.width);
    }
    out
}

/// Numerator over a one-cell bar over the denominator, all centered; the
/// bar row is the baseline.
fn fraction(bar_token: usize, num: LayoutBox, den: LayoutBox) -> LayoutBox {
    let width = num.width.max(den.width).max(1);
    let mut out = LayoutBox {
        width,
        height: num.height + 1 + den.height,
        baseline: num.height,
        cells: Vec::new(),
    };
    out.absorb(&num, 0, (width - num.width) / 2);
    out.cells.push((num.height, (width - 1) / 2, bar_token));
    out.absorb(&den, num.height + 1, (width - den.width) / 2);
    out
}

/// One-cell radical sign on the radicand's baseline, radicand shifted
/// one column right.
fn radical(sign_token: usize, rad: LayoutBox) -> LayoutBox {
    let mut out = LayoutBox {
        width: rad.width + 1,
        height: rad.height.max(1),
        baseline: rad.baseline,
        cells: vec![(rad.baseline, 0, sign_token)],
    };
    out.absorb(&rad, 0, 1);
    out
}

/// Lays out `tokens[start..end]` as a horizontal run.
fn lay_range(tokens: &[Token], start: usize, end: usize) -> Result<LayoutBox, RenderError> {
    let mut parts: Vec<LayoutBox> = Vec::new();
    let mut i = start;
    while i < end {
        let text = tokens[i].text.as_str();
        match text {
            "\\frac" => {
                let (num, after) = braced_argument(tokens, i, i + 1, end)?;
                let (den, next) = braced_argument(tokens, i, after, end)?;
                parts.push(fraction(i, num, den));
                i = next;
            }
            "\\sqrt" => {
                let (rad, next) = braced_argument(tokens, i, i + 1, end)?;
                parts.push(radical(i, rad));
                i = next;
            }
            "^" | "_" => {
                let base = parts.pop().ok_or(RenderError::MalformedScript { index: i })?;
                let (arg, next) = braced_argument(tokens, i, i + 1, end)?;
                parts.push(scripted(base, arg, text == "^"));
                i = next;
            }
            "{" => {
                let close = find_group_end_in(tokens, i).map_err(group_error)?;
                if close >= end {
                    return Err(RenderError::UnbalancedBraces { index: i });
                }
                parts.push(lay_range(tokens, i + 1, close)?);
                i = close + 1;
            }
            "}" => return Err(RenderError::UnbalancedBraces { index: i }),
            _ if tokens[i].class == SymbolClass::Structure => {
                return Err(RenderError::UnsupportedStructure {
                    index: i,
                    text: text.to_string(),
                });
            }
            _ => {
                parts.push(LayoutBox::glyph(i));
                i += 1;
            }
        }
    }
    Ok(hcat(&parts))
}

/// Expects `{ … }` at `open` and lays out the interior; returns the box
/// and the index one past the closing brace.
fn braced_argument(
    tokens: &[Token],
    trigger: usize,
    open: usize,
    end: usize,
) -> Result<(LayoutBox, usize), RenderError> {
    if open >= end || tokens[open].text != "{" {
        return Err(RenderError::MalformedScript { index: trigger });
    }
    let close = find_group_end_in(tokens, open).map_err(group_error)?;
    if close >= end {
        return Err(RenderError::UnbalancedBraces { index: open });
    }
    Ok((lay_range(tokens, open + 1, close)?, close + 1))
}

fn group_error(err: ForestError) -> RenderError {
    match err {
        ForestError::UnbalancedBraces { index } => RenderError::UnbalancedBraces { index },
        other => RenderError::Forest(other),
    }
}

/// Lays out a fully braced sequence; every entity token receives exactly
/// one cell.
pub fn layout(seq: &TokenSeq) -> Result<LayoutBox, RenderError> {
    lay_range(seq.tokens(), 0, seq.len())
}

/// A laid-out training example: the source text, its glyph grid, and the
/// position-supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub latex: String,
    pub grid: FeatureGrid,
    pub targets: ForestTargets,
}

/// Renders `seq` centered on a `height × width` grid with one channel
/// per vocabulary token.
pub fn render(
    seq: &TokenSeq,
    vocab: &Vocabulary,
    height: usize,
    width: usize,
    max_nesting: usize,
) -> Result<RenderedSample, RenderError> {
    let ids = encode_forest(seq, max_nesting)?;
    let targets = derive_targets(seq, &ids);
    let layout = layout(seq)?;
    if layout.width > width || layout.height > height {
        return Err(RenderError::GridOverflow {
            width,
            height,
            need_width: layout.width,
            need_height: layout.height,
        });
    }
    let pad_row = (height - layout.height) / 2;
    let pad_col = (width - layout.width) / 2;
    let mut grid = FeatureGrid::zeros(height, width, vocab.len());
    for &(row, col, token_index) in &layout.cells {
        let id = seq.tokens()[token_index].id;
        grid.set(row + pad_row, col + pad_col, id, 1.0);
    }
    Ok(RenderedSample {
        latex: seq.to_latex(),
        grid,
        targets,
    })
}
