//! Corpus file formats: text listings, supervision tables, and rendered
//! grid archives.
//!
//! Text corpora are tab-separated `id<TAB>latex` lines. Supervision
//! tables add the position identifiers and the per-token nesting and
//! branch targets. Rendered corpora store each sample's token ids and
//! glyph grid in the shared record container next to a JSON sidecar
//! carrying the grid dimensions and the vocabulary hash, so a reader can
//! reject a mismatched dictionary before touching any floats.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{read_records, write_records, ContainerError, Record};
use crate::corpus::grammar::{generate, GrammarConfig, GrammarError};
use crate::corpus::render::{render, RenderError, RenderedSample};
use crate::forest::PositionIdentifier;
use crate::lexer::{Token, TokenSeq, Vocabulary};
use crate::model::FeatureGrid;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("bad corpus line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("sidecar problem for {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("corpus was rendered with vocabulary {corpus} but the current one hashes to {current}")]
    VocabMismatch { corpus: String, current: String },
    #[error("token id {id} from the rendered corpus is not in the vocabulary")]
    UnknownTokenId { id: usize },
    #[error("only {got} distinct renderings found after {attempts} attempts (wanted {want})")]
    DistinctExhausted {
        want: usize,
        got: usize,
        attempts: usize,
    },
}

/// Writes `id<TAB>latex` lines.
pub fn write_corpus(path: &Path, entries: &[(String, String)]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (id, latex) in entries {
        out.push_str(id);
        out.push('\t');
        out.push_str(latex);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads `id<TAB>latex` lines; blank lines and `#` comments are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, latex)) = line.split_once('\t') else {
            return Err(CorpusError::Format {
                line: lineno + 1,
                reason: "expected id<TAB>latex".into(),
            });
        };
        if id.is_empty() {
            return Err(CorpusError::Format {
                line: lineno + 1,
                reason: "empty sample id".into(),
            });
        }
        entries.push((id.to_string(), latex.to_string()));
    }
    Ok(entries)
}

/// One supervision row: the expression plus its per-token position
/// identifiers, nesting levels, and innermost branches.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    pub id: String,
    pub latex: String,
    pub identifiers: Vec<String>,
    pub nested: Vec<usize>,
    pub relative: String,
}

impl TargetRow {
    /// Assembles a row from an encoded expression.
    pub fn new(id: impl Into<String>, seq: &TokenSeq, ids: &[PositionIdentifier]) -> TargetRow {
        assert_eq!(seq.len(), ids.len(), "one identifier per token");
        let targets = crate::forest::derive_targets(seq, ids);
        TargetRow {
            id: id.into(),
            latex: seq.to_latex(),
            identifiers: ids.iter().map(|i| i.to_string()).collect(),
            nested: targets.nested_levels,
            relative: targets
                .relative_positions
                .iter()
                .map(|p| p.as_char())
                .collect(),
        }
    }
}

/// Writes supervision rows as five tab-separated columns: id, latex,
/// space-joined identifiers, space-joined nesting levels, and the branch
/// characters as one word.
pub fn write_targets(path: &Path, rows: &[TargetRow]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for row in rows {
        let nested: Vec<String> = row.nested.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.id,
            row.latex,
            row.identifiers.join(" "),
            nested.join(" "),
            row.relative
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Sidecar of a rendered corpus; everything a reader needs before
/// loading the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedMeta {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    pub vocab_hash: String,
    pub sample_ids: Vec<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes a rendered corpus: per sample a `{id}/tokens` record with the
/// token ids and a `{id}/grid` record shaped `[height, width, channels]`,
/// plus the JSON sidecar at `<path>.json`.
pub fn write_rendered(
    path: &Path,
    items: &[(String, RenderedSample)],
    vocab: &Vocabulary,
) -> Result<(), CorpusError> {
    let mut records = Vec::with_capacity(items.len() * 2);
    let mut sample_ids = Vec::with_capacity(items.len());
    let mut dims: Option<(usize, usize)> = None;
    for (id, sample) in items {
        let grid = &sample.grid;
        assert_eq!(
            grid.channels(),
            vocab.len(),
            "rendered grids carry one channel per vocabulary token"
        );
        let here = (grid.height(), grid.width());
        assert_eq!(
            *dims.get_or_insert(here),
            here,
            "all grids in a corpus share their dimensions"
        );
        let token_ids: Vec<f64> = sample.targets.symbol_ids.iter().map(|&s| s as f64).collect();
        records.push(Record::new(
            format!("{id}/tokens"),
            vec![token_ids.len()],
            token_ids,
        ));
        records.push(Record::new(
            format!("{id}/grid"),
            vec![grid.height(), grid.width(), grid.channels()],
            grid.values().data().to_vec(),
        ));
        sample_ids.push(id.clone());
    }
    let (grid_height, grid_width) = dims.unwrap_or((0, 0));
    write_records(path, &records)?;
    let meta = RenderedMeta {
        grid_height,
        grid_width,
        channels: vocab.len(),
        vocab_hash: vocab.vocab_hash(),
        sample_ids,
    };
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CorpusError::Sidecar {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let mut file = fs::File::create(&sidecar)?;
    file.write_all(json.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Reads the sidecar of a rendered corpus.
pub fn read_rendered_meta(path: &Path) -> Result<RenderedMeta, CorpusError> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar)?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Sidecar {
        path: sidecar,
        reason: e.to_string(),
    })
}

/// Reads a rendered corpus back as `(id, sequence, grid)` triples,
/// verifying the vocabulary hash first.
pub fn read_rendered(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<(String, TokenSeq, FeatureGrid)>, CorpusError> {
    let meta = read_rendered_meta(path)?;
    if meta.vocab_hash != vocab.vocab_hash() {
        return Err(CorpusError::VocabMismatch {
            corpus: meta.vocab_hash,
            current: vocab.vocab_hash(),
        });
    }
    let records = read_records(path)?;
    let find = |name: &str| -> Result<&Record, CorpusError> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CorpusError::Sidecar {
                path: sidecar_path(path),
                reason: format!("record {name:?} listed in the sidecar is missing"),
            })
    };
    let mut out = Vec::with_capacity(meta.sample_ids.len());
    for id in &meta.sample_ids {
        let tokens_record = find(&format!("{id}/tokens"))?;
        let grid_record = find(&format!("{id}/grid"))?;
        let mut tokens: Vec<Token> = Vec::with_capacity(tokens_record.data.len());
        for &raw in &tokens_record.data {
            let token_id = raw as usize;
            let token = vocab
                .token_by_id(token_id)
                .ok_or(CorpusError::UnknownTokenId { id: token_id })?;
            tokens.push(token);
        }
        let shape = &grid_record.shape;
        if shape.len() != 3 || shape[2] != meta.channels {
            return Err(CorpusError::Sidecar {
                path: sidecar_path(path),
                reason: format!("record {id}/grid has shape {shape:?}"),
            });
        }
        let grid = FeatureGrid::new(
            shape[0],
            shape[1],
            shape[2],
            crate::model::Tensor::new(
                vec![shape[0] * shape[1], shape[2]],
                grid_record.data.clone(),
            ),
        );
        out.push((id.clone(), TokenSeq::new(tokens), grid));
    }
    Ok(out)
}

/// Generates, renders, and deduplicates `count` samples.
///
/// Grammar indices advance until `count` distinct grids have been
/// collected; expressions that overflow the grid or collide pixel-wise
/// with an earlier sample are skipped, so the returned corpus has no two
/// visually identical entries. Sample ids are `s0000`, `s0001`, … in
/// collection order.
pub fn toy_corpus(
    config: &GrammarConfig,
    count: usize,
    vocab: &Vocabulary,
    height: usize,
    width: usize,
    max_nesting: usize,
) -> Result<Vec<(String, RenderedSample)>, CorpusError> {
    let mut out = Vec::with_capacity(count);
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let attempt_budget = count.saturating_mul(60).max(64);
    let mut attempts = 0;
    let mut index = 0u64;
    while out.len() < count && attempts < attempt_budget {
        attempts += 1;
        let seq = generate(config, index, vocab)?;
        index += 1;
        let sample = match render(&seq, vocab, height, width, max_nesting) {
            Ok(sample) => sample,
            Err(RenderError::GridOverflow { .. }) => continue,
            Err(other) => return Err(other.into()),
        };
        let key: Vec<u64> = sample
            .grid
            .values()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        if seen.insert(key) {
            out.push((format!("s{:04}", out.len()), sample));
        }
    }
    if out.len() < count {
        return Err(CorpusError::DistinctExhausted {
            want: count,
            got: out.len(),
            attempts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::encode_forest;
    use crate::lexer::tokenize;
    use tempfile::tempdir;

    #[test]
    fn corpus_listing_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        let entries = vec![
            ("s0000".to_string(), "x ^ { 2 }".to_string()),
            ("s0001".to_string(), "\\frac { a } { b }".to_string()),
        ];
        write_corpus(&path, &entries).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), entries);
    }

    #[test]
    fn corpus_listing_rejects_bad_lines() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        fs::write(&path, "# comment\n\ns0 x + y\n").unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::Format { line: 3, .. })
        ));
    }

    #[test]
    fn target_rows_follow_the_worked_layout() {
        let vocab = Vocabulary::builtin();
        let seq = tokenize("x ^ { 2 }", &vocab).unwrap();
        let ids = encode_forest(&seq, 3).unwrap();
        let row = TargetRow::new("s0", &seq, &ids);
        assert_eq!(row.latex, "x ^ { 2 }");
        assert_eq!(row.identifiers, ["M", "ML", "ML", "ML", "ML"]);
        assert_eq!(row.nested, [0, 1, 1, 1, 1]);
        assert_eq!(row.relative, "MLLLL");

        let dir = tempdir().unwrap();
        let path = dir.path().join("targets.tsv");
        write_targets(&path, &[row]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "s0\tx ^ { 2 }\tM ML ML ML ML\t0 1 1 1 1\tMLLLL\n");
    }

    #[test]
    fn rendered_corpus_round_trips() {
        let vocab = Vocabulary::builtin();
        let config = GrammarConfig::toy(42, 2);
        let corpus = toy_corpus(&config, 6, &vocab, 12, 12, 3).unwrap();
        assert_eq!(corpus.len(), 6);

        let dir = tempdir().unwrap();
        let path = dir.path().join("rendered.pfr");
        write_rendered(&path, &corpus, &vocab).unwrap();
        let loaded = read_rendered(&path, &vocab).unwrap();
        assert_eq!(loaded.len(), corpus.len());
        for ((id, sample), (lid, seq, grid)) in corpus.iter().zip(&loaded) {
            assert_eq!(id, lid);
            assert_eq!(&sample.latex, &seq.to_latex());
            assert_eq!(&sample.grid, grid);
        }
        let meta = read_rendered_meta(&path).unwrap();
        assert_eq!((meta.grid_height, meta.grid_width), (12, 12));
        assert_eq!(meta.channels, vocab.len());
    }

    #[test]
    fn rendered_corpus_rejects_other_vocabularies() {
        let vocab = Vocabulary::builtin();
        let config = GrammarConfig::toy(1, 1);
        let corpus = toy_corpus(&config, 2, &vocab, 12, 12, 3).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("rendered.pfr");
        write_rendered(&path, &corpus, &vocab).unwrap();

        let trimmed =
            Vocabulary::from_dict_str("x\ny\n\\frac\n\\sqrt\n[structure]\n^\n_\n{\n}\n").unwrap();
        assert!(matches!(
            read_rendered(&path, &trimmed),
            Err(CorpusError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn toy_corpus_is_deterministic_and_distinct() {
        let vocab = Vocabulary::builtin();
        let config = GrammarConfig::toy(7, 2);
        let a = toy_corpus(&config, 10, &vocab, 14, 14, 3).unwrap();
        let b = toy_corpus(&config, 10, &vocab, 14, 14, 3).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ida, sa), (idb, sb)) in a.iter().zip(&b) {
            assert_eq!(ida, idb);
            assert_eq!(sa, sb);
        }
        let mut grids = BTreeSet::new();
        for (_, sample) in &a {
            let key: Vec<u64> = sample
                .grid
                .values()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert!(grids.insert(key), "duplicate grid for {}", sample.latex);
        }
    }
}
