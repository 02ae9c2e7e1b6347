//! Position-forest encoding of tokenized math expressions.
//!
//! Every token receives a *position identifier*: a string over the alphabet
//! `M`/`L`/`R` describing the path from the expression root to the innermost
//! substructure containing the token. All identifiers start at `M` (main
//! axis). A superscript appends `L` (upper branch) to every token of its
//! substructure, a subscript or radicand appends `R` (lower branch), and a
//! fraction appends `L` to its numerator and `R` to its denominator — in
//! each case including the trigger token and the argument braces
//! themselves. `x ^ { 2 }` therefore encodes as `M ML ML ML ML`.
//!
//! Identifier length is capped: with a nesting limit of `U`, identifiers
//! may hold at most `U + 1` characters (the root plus `U` branchings).
//!
//! Two implementations are provided. [`encode_forest`] is the production
//! single-pass scanner that appends branch characters to index spans.
//! [`oracle::oracle_encode`] builds the expression forest explicitly and
//! reads each identifier off the root-to-node path; it exists as an
//! independent cross-check and the two are verified equivalent in tests.
//!
//! From the identifiers, [`derive_targets`] produces the three per-token
//! supervision streams (symbol id, nesting level, innermost branch), and
//! [`build_identifier_matrix`] lays identifiers out as fixed-width rows of
//! a small six-symbol cell alphabet for embedding.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::lexer::{Token, TokenSeq};

/// Default cap on the nesting level of any token.
pub const DEFAULT_MAX_NESTING: usize = 3;

/// Number of distinct identifier-matrix cell values.
pub const ID_CELL_VOCAB: usize = 6;

/// One character of a position identifier.
///
/// `M` marks the main axis, `L` the upper/left branch of a substructure
/// (superscript, numerator), `R` the lower/right branch (subscript,
/// radicand, denominator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PosChar {
    M,
    L,
    R,
}

impl PosChar {
    pub fn as_char(self) -> char {
        match self {
            PosChar::M => 'M',
            PosChar::L => 'L',
            PosChar::R => 'R',
        }
    }

    pub fn from_char(c: char) -> Option<PosChar> {
        match c {
            'M' => Some(PosChar::M),
            'L' => Some(PosChar::L),
            'R' => Some(PosChar::R),
            _ => None,
        }
    }
}

/// Root-to-substructure path of one token, e.g. `MLLR`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PositionIdentifier {
    chars: Vec<PosChar>,
}

impl PositionIdentifier {
    /// The identifier every token starts from: just the root mark `M`.
    pub fn root() -> PositionIdentifier {
        PositionIdentifier {
            chars: vec![PosChar::M],
        }
    }

    pub fn from_chars(chars: Vec<PosChar>) -> PositionIdentifier {
        assert!(!chars.is_empty(), "identifiers hold at least the root mark");
        PositionIdentifier { chars }
    }

    pub fn parse(text: &str) -> Option<PositionIdentifier> {
        if text.is_empty() {
            return None;
        }
        let chars: Option<Vec<PosChar>> = text.chars().map(PosChar::from_char).collect();
        Some(PositionIdentifier { chars: chars? })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[PosChar] {
        &self.chars
    }

    /// Number of branchings below the root: identifier length minus one.
    pub fn nested_level(&self) -> usize {
        self.chars.len() - 1
    }

    /// The innermost branch character (the last one).
    pub fn innermost(&self) -> PosChar {
        *self.chars.last().expect("identifiers are nonempty")
    }

    pub fn child(&self, branch: PosChar) -> PositionIdentifier {
        let mut chars = self.chars.clone();
        chars.push(branch);
        PositionIdentifier { chars }
    }
}

impl fmt::Display for PositionIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.chars {
            f.write_fmt(format_args!("{}", c.as_char()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForestError {
    #[error("unmatched brace at token {index}")]
    UnbalancedBraces { index: usize },
    #[error("token {token_index} would nest at level {depth}, above the limit {limit}")]
    NestingTooDeep {
        token_index: usize,
        depth: usize,
        limit: usize,
    },
    #[error("trigger {trigger:?} at token {index} is not followed by its braced arguments")]
    MalformedSubstructure { index: usize, trigger: String },
}

/// Index of the `}` matching the `{` at `open`.
///
/// The token at `open` must be `{`; returns [`ForestError::UnbalancedBraces`]
/// if the group never closes.
pub fn find_group_end(seq: &TokenSeq, open: usize) -> Result<usize, ForestError> {
    find_group_end_in(seq.tokens(), open)
}

pub(crate) fn find_group_end_in(tokens: &[Token], open: usize) -> Result<usize, ForestError> {
    assert!(
        tokens.get(open).map(|t| t.text.as_str()) == Some("{"),
        "find_group_end expects an opening brace at index {open}"
    );
    let mut depth = 0usize;
    for (i, tok) in tokens.iter().enumerate().skip(open) {
        match tok.text.as_str() {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    return Ok(i);
                }
            }
            _ => {}
        }
    }
    Err(ForestError::UnbalancedBraces { index: open })
}

/// Position identifier of every token, by the single-pass span scanner.
///
/// The sequence should be normalized (all trigger arguments braced); a
/// trigger without its groups is reported as [`ForestError::MalformedSubstructure`].
/// Identifiers longer than `max_nesting + 1` characters are rejected with
/// [`ForestError::NestingTooDeep`] at the first offending token.
pub fn encode_forest(
    seq: &TokenSeq,
    max_nesting: usize,
) -> Result<Vec<PositionIdentifier>, ForestError> {
    let tokens = seq.tokens();
    let mut ids = vec![PositionIdentifier::root(); tokens.len()];
    encode_range(tokens, 0, tokens.len(), max_nesting, &mut ids)?;
    Ok(ids)
}

fn encode_range(
    tokens: &[Token],
    start: usize,
    end: usize,
    max_nesting: usize,
    ids: &mut [PositionIdentifier],
) -> Result<(), ForestError> {
    let mut l = start;
    while l < end {
        match tokens[l].text.as_str() {
            t @ ("^" | "_" | "\\sqrt") => {
                let open = l + 1;
                if open >= end || tokens[open].text != "{" {
                    return Err(ForestError::MalformedSubstructure {
                        index: l,
                        trigger: t.to_string(),
                    });
                }
                let close = find_group_end_in(tokens, open)?;
                debug_assert!(close < end, "group cannot escape its enclosing region");
                let branch = if t == "^" { PosChar::L } else { PosChar::R };
                append_span(ids, l, close, branch, max_nesting)?;
                encode_range(tokens, open + 1, close, max_nesting, ids)?;
                l = close + 1;
            }
            "\\frac" => {
                let trigger = l;
                let open_first = l + 1;
                if open_first >= end || tokens[open_first].text != "{" {
                    return Err(malformed_frac(trigger));
                }
                let close_first = find_group_end_in(tokens, open_first)?;
                let open_second = close_first + 1;
                if open_second >= end || tokens[open_second].text != "{" {
                    return Err(malformed_frac(trigger));
                }
                let close_second = find_group_end_in(tokens, open_second)?;
                debug_assert!(close_second < end);
                append_span(ids, trigger, close_first, PosChar::L, max_nesting)?;
                append_span(ids, open_second, close_second, PosChar::R, max_nesting)?;
                encode_range(tokens, open_first + 1, close_first, max_nesting, ids)?;
                encode_range(tokens, open_second + 1, close_second, max_nesting, ids)?;
                l = close_second + 1;
            }
            _ => l += 1,
        }
    }
    Ok(())
}

fn malformed_frac(index: usize) -> ForestError {
    ForestError::MalformedSubstructure {
        index,
        trigger: "\\frac".to_string(),
    }
}

/// Appends `branch` to every identifier in the inclusive token span.
fn append_span(
    ids: &mut [PositionIdentifier],
    first: usize,
    last: usize,
    branch: PosChar,
    max_nesting: usize,
) -> Result<(), ForestError> {
    for t in first..=last {
        if ids[t].len() > max_nesting {
            return Err(ForestError::NestingTooDeep {
                token_index: t,
                depth: ids[t].len(),
                limit: max_nesting,
            });
        }
        ids[t].chars.push(branch);
    }
    Ok(())
}

pub mod oracle {
    //! Reference encoder that materializes the expression forest.
    //!
    //! Independent of the span scanner in the parent module: it parses the
    //! sequence into explicit nodes, attaches every token to the node of its
    //! innermost substructure, then reads identifiers off root-to-node
    //! paths. Slower but structurally obvious; used to cross-validate
    //! [`super::encode_forest`].

    use super::*;

    struct Node {
        branch: PosChar,
        token_indices: Vec<usize>,
        children: Vec<Node>,
    }

    impl Node {
        fn new(branch: PosChar) -> Node {
            Node {
                branch,
                token_indices: Vec::new(),
                children: Vec::new(),
            }
        }

        fn first_token(&self) -> usize {
            let own = self.token_indices.first().copied();
            let child = self.children.first().map(|c| c.first_token());
            match (own, child) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("every node spans at least its trigger"),
            }
        }
    }

    /// Position identifier of every token, by explicit forest construction.
    pub fn oracle_encode(
        seq: &TokenSeq,
        max_nesting: usize,
    ) -> Result<Vec<PositionIdentifier>, ForestError> {
        let tokens = seq.tokens();
        let mut root = Node::new(PosChar::M);
        parse_span(tokens, 0, tokens.len(), &mut root)?;
        let mut ids: Vec<Option<PositionIdentifier>> = vec![None; tokens.len()];
        assign_paths(&root, &PositionIdentifier::root(), max_nesting, &mut ids)?;
        Ok(ids
            .into_iter()
            .map(|id| id.expect("every token is attached to a node"))
            .collect())
    }

    fn parse_span(
        tokens: &[Token],
        start: usize,
        end: usize,
        node: &mut Node,
    ) -> Result<(), ForestError> {
        let mut i = start;
        while i < end {
            match tokens[i].text.as_str() {
                t @ ("^" | "_" | "\\sqrt") => {
                    let open = i + 1;
                    if open >= end || tokens[open].text != "{" {
                        return Err(ForestError::MalformedSubstructure {
                            index: i,
                            trigger: t.to_string(),
                        });
                    }
                    let close = find_group_end_in(tokens, open)?;
                    let branch = if t == "^" { PosChar::L } else { PosChar::R };
                    let mut child = Node::new(branch);
                    child.token_indices.push(i);
                    child.token_indices.push(open);
                    parse_span(tokens, open + 1, close, &mut child)?;
                    child.token_indices.push(close);
                    node.children.push(child);
                    i = close + 1;
                }
                "\\frac" => {
                    let open_first = i + 1;
                    if open_first >= end || tokens[open_first].text != "{" {
                        return Err(malformed_frac(i));
                    }
                    let close_first = find_group_end_in(tokens, open_first)?;
                    let open_second = close_first + 1;
                    if open_second >= end || tokens[open_second].text != "{" {
                        return Err(malformed_frac(i));
                    }
                    let close_second = find_group_end_in(tokens, open_second)?;

                    let mut upper = Node::new(PosChar::L);
                    upper.token_indices.push(i);
                    upper.token_indices.push(open_first);
                    parse_span(tokens, open_first + 1, close_first, &mut upper)?;
                    upper.token_indices.push(close_first);
                    node.children.push(upper);

                    let mut lower = Node::new(PosChar::R);
                    lower.token_indices.push(open_second);
                    parse_span(tokens, open_second + 1, close_second, &mut lower)?;
                    lower.token_indices.push(close_second);
                    node.children.push(lower);

                    i = close_second + 1;
                }
                _ => {
                    node.token_indices.push(i);
                    i += 1;
                }
            }
        }
        Ok(())
    }

    fn assign_paths(
        node: &Node,
        path: &PositionIdentifier,
        max_nesting: usize,
        ids: &mut [Option<PositionIdentifier>],
    ) -> Result<(), ForestError> {
        for &t in &node.token_indices {
            ids[t] = Some(path.clone());
        }
        for child in &node.children {
            if path.len() > max_nesting {
                return Err(ForestError::NestingTooDeep {
                    token_index: child.first_token(),
                    depth: path.len(),
                    limit: max_nesting,
                });
            }
            assign_paths(child, &path.child(child.branch), max_nesting, ids)?;
        }
        Ok(())
    }
}

/// Per-token supervision targets read directly off the identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForestTargets {
    /// Vocabulary id of each token.
    pub symbol_ids: Vec<usize>,
    /// Nesting level of each token: identifier length minus one.
    pub nested_levels: Vec<usize>,
    /// Innermost branch character of each token.
    pub relative_positions: Vec<PosChar>,
}

impl ForestTargets {
    pub fn len(&self) -> usize {
        self.symbol_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbol_ids.is_empty()
    }
}

/// Bundles the three supervision streams for a sequence and its identifiers.
///
/// `seq` and `ids` must be index-aligned.
pub fn derive_targets(seq: &TokenSeq, ids: &[PositionIdentifier]) -> ForestTargets {
    assert_eq!(
        seq.len(),
        ids.len(),
        "sequence and identifiers must be index-aligned"
    );
    ForestTargets {
        symbol_ids: seq.iter().map(|t| t.id).collect(),
        nested_levels: ids.iter().map(|id| id.nested_level()).collect(),
        relative_positions: ids.iter().map(|id| id.innermost()).collect(),
    }
}

/// Cell of an [`IdentifierMatrix`] row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdCell {
    Start,
    End,
    Pad,
    Branch(PosChar),
}

impl IdCell {
    /// Fixed embedding index: `[sos]`, `[eos]`, `[pad]`, `M`, `L`, `R`.
    pub fn index(self) -> usize {
        match self {
            IdCell::Start => 0,
            IdCell::End => 1,
            IdCell::Pad => 2,
            IdCell::Branch(PosChar::M) => 3,
            IdCell::Branch(PosChar::L) => 4,
            IdCell::Branch(PosChar::R) => 5,
        }
    }

    pub fn from_index(index: usize) -> Option<IdCell> {
        match index {
            0 => Some(IdCell::Start),
            1 => Some(IdCell::End),
            2 => Some(IdCell::Pad),
            3 => Some(IdCell::Branch(PosChar::M)),
            4 => Some(IdCell::Branch(PosChar::L)),
            5 => Some(IdCell::Branch(PosChar::R)),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IdCell::Start => "[sos]",
            IdCell::End => "[eos]",
            IdCell::Pad => "[pad]",
            IdCell::Branch(PosChar::M) => "M",
            IdCell::Branch(PosChar::L) => "L",
            IdCell::Branch(PosChar::R) => "R",
        }
    }
}

/// Identifiers laid out as fixed-width rows for embedding.
///
/// Row `t` is `[sos], c_1, …, c_η, [eos], [pad], …` where `c_1…c_η` are the
/// characters of identifier `t`. With nesting limit `U` the width is
/// `U + 3`: the longest identifier (`U + 1` characters) plus both markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifierMatrix {
    rows: usize,
    width: usize,
    cells: Vec<IdCell>,
}

impl IdentifierMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, t: usize) -> &[IdCell] {
        &self.cells[t * self.width..(t + 1) * self.width]
    }

    pub fn cells(&self) -> &[IdCell] {
        &self.cells
    }

    /// Row for a step with no identifier context (decoding step zero):
    /// `[sos], [eos], [pad], …`.
    pub fn empty_row(max_nesting: usize) -> Vec<IdCell> {
        let width = max_nesting + 3;
        let mut row = vec![IdCell::Pad; width];
        row[0] = IdCell::Start;
        row[1] = IdCell::End;
        row
    }

    pub fn from_rows(rows: Vec<Vec<IdCell>>, width: usize) -> IdentifierMatrix {
        let mut cells = Vec::with_capacity(rows.len() * width);
        for row in &rows {
            assert_eq!(row.len(), width, "all rows must have the declared width");
            cells.extend_from_slice(row);
        }
        IdentifierMatrix {
            rows: rows.len(),
            width,
            cells,
        }
    }
}

/// Lays out `ids` as an [`IdentifierMatrix`] of width `max_nesting + 3`.
///
/// Identifiers longer than `max_nesting + 1` characters do not fit and are
/// rejected with [`ForestError::NestingTooDeep`].
pub fn build_identifier_matrix(
    ids: &[PositionIdentifier],
    max_nesting: usize,
) -> Result<IdentifierMatrix, ForestError> {
    let width = max_nesting + 3;
    let mut cells = Vec::with_capacity(ids.len() * width);
    for (t, id) in ids.iter().enumerate() {
        if id.len() > max_nesting + 1 {
            return Err(ForestError::NestingTooDeep {
                token_index: t,
                depth: id.nested_level(),
                limit: max_nesting,
            });
        }
        cells.push(IdCell::Start);
        for &c in id.chars() {
            cells.push(IdCell::Branch(c));
        }
        cells.push(IdCell::End);
        while cells.len() % width != 0 {
            cells.push(IdCell::Pad);
        }
    }
    Ok(IdentifierMatrix {
        rows: ids.len(),
        width,
        cells,
    })
}

/// Maximum nesting level over the expression: `max_t (|I_t| - 1)`.
///
/// `ids` must be nonempty.
pub fn expression_complexity(ids: &[PositionIdentifier]) -> usize {
    assert!(!ids.is_empty(), "complexity of an empty expression is undefined");
    ids.iter().map(|id| id.nested_level()).max().unwrap()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("expression {index} cannot be encoded: {source}")]
pub struct StratifyError {
    pub index: usize,
    #[source]
    pub source: ForestError,
}

/// Groups expression indices by their complexity.
///
/// Expressions are encoded with the given nesting limit; the first failure
/// aborts with the offending expression index attached.
pub fn stratify(
    exprs: &[TokenSeq],
    max_nesting: usize,
) -> Result<BTreeMap<usize, Vec<usize>>, StratifyError> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (index, seq) in exprs.iter().enumerate() {
        let ids = encode_forest(seq, max_nesting).map_err(|source| StratifyError { index, source })?;
        let complexity = if ids.is_empty() {
            0
        } else {
            expression_complexity(&ids)
        };
        buckets.entry(complexity).or_default().push(index);
    }
    Ok(buckets)
}
