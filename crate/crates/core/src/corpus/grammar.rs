//! Random math expressions over a small structural grammar.
//!
//! A sample is a short sum of terms; each term is an atom, a scripted
//! atom, a fraction, a radical, or a big operator carrying both scripts.
//! Structure recursion is bounded by a depth budget so every generated
//! expression respects a chosen nesting limit. Sampling is a pure
//! function of `(seed, index)`: regenerating any sample needs neither the
//! earlier samples nor any shared state.

use crate::lexer::{tokenize, SymbolClass, TokenSeq, Vocabulary, TRIGGERS};
use crate::rng::SplitMix64;
use thiserror::Error;

/// Infix operators joining the terms of a sum.
const INFIX: [&str; 3] = ["+", "-", "="];

/// Relative frequencies of the term shapes; they must sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureWeights {
    pub atom: f64,
    pub superscript: f64,
    pub subscript: f64,
    pub fraction: f64,
    pub radical: f64,
    pub special_operator: f64,
}

impl Default for StructureWeights {
    fn default() -> StructureWeights {
        StructureWeights {
            atom: 0.35,
            superscript: 0.2,
            subscript: 0.2,
            fraction: 0.15,
            radical: 0.05,
            special_operator: 0.05,
        }
    }
}

impl StructureWeights {
    fn as_array(&self) -> [f64; 6] {
        [
            self.atom,
            self.superscript,
            self.subscript,
            self.fraction,
            self.radical,
            self.special_operator,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarConfig {
    /// Structure recursion budget; generated expressions never nest
    /// deeper than this many levels.
    pub max_depth: usize,
    /// Tokens eligible as atoms (bases, digits, letters).
    pub entity_alphabet: Vec<String>,
    /// Tokens that take both a subscript and a superscript, such as sum
    /// or integral signs.
    pub special_operators: Vec<String>,
    pub weights: StructureWeights,
    pub seed: u64,
}

impl GrammarConfig {
    /// Small alphabet and shallow nesting, suited to toy grids.
    pub fn toy(seed: u64, max_depth: usize) -> GrammarConfig {
        GrammarConfig {
            max_depth,
            entity_alphabet: ["a", "b", "c", "x", "y", "z", "1", "2", "3", "7"]
                .map(String::from)
                .to_vec(),
            special_operators: ["\\sum", "\\int"].map(String::from).to_vec(),
            weights: StructureWeights::default(),
            seed,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("structure weights must be nonnegative and sum to one (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("the entity alphabet is empty")]
    EmptyAlphabet,
    #[error("grammar token {text:?} is not in the vocabulary")]
    TokenNotInVocabulary { text: String },
    #[error("grammar token {text:?} cannot serve as {role}")]
    WrongClass { text: String, role: &'static str },
}

/// Checks the weights and that every token the grammar can emit exists
/// in `vocab` with a usable class.
pub fn validate(config: &GrammarConfig, vocab: &Vocabulary) -> Result<(), GrammarError> {
    let weights = config.weights.as_array();
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(GrammarError::BadWeights { sum });
    }
    if config.entity_alphabet.is_empty() {
        return Err(GrammarError::EmptyAlphabet);
    }
    let usable = |text: &str, role: &'static str| -> Result<(), GrammarError> {
        let Some(token) = vocab.token(text) else {
            return Err(GrammarError::TokenNotInVocabulary { text: text.into() });
        };
        if token.class != SymbolClass::Entity || TRIGGERS.contains(&text) {
            return Err(GrammarError::WrongClass { text: text.into(), role });
        }
        Ok(())
    };
    for text in &config.entity_alphabet {
        usable(text, "an atom")?;
    }
    for text in &config.special_operators {
        usable(text, "a scripted operator")?;
    }
    for text in INFIX {
        if vocab.token(text).is_none() {
            return Err(GrammarError::TokenNotInVocabulary { text: text.into() });
        }
    }
    // The structural tokens themselves.
    for text in ["^", "_", "{", "}", "\\frac", "\\sqrt"] {
        if vocab.token(text).is_none() {
            return Err(GrammarError::TokenNotInVocabulary { text: text.into() });
        }
    }
    Ok(())
}

/// Generates sample `index` of the stream defined by `config.seed`.
pub fn generate(
    config: &GrammarConfig,
    index: u64,
    vocab: &Vocabulary,
) -> Result<TokenSeq, GrammarError> {
    validate(config, vocab)?;
    let mut rng = SplitMix64::stream(config.seed, index);
    let mut parts: Vec<String> = Vec::new();
    let terms = 1 + rng.below(3);
    emit_expr(&mut parts, config, &mut rng, config.max_depth, terms);
    let text = parts.join(" ");
    Ok(tokenize(&text, vocab).expect("generated tokens come from the validated vocabulary"))
}

fn emit_expr(
    out: &mut Vec<String>,
    config: &GrammarConfig,
    rng: &mut SplitMix64,
    depth: usize,
    terms: usize,
) {
    for k in 0..terms {
        if k > 0 {
            out.push((*rng.choose(&INFIX)).to_string());
        }
        emit_term(out, config, rng, depth);
    }
}

fn emit_term(out: &mut Vec<String>, config: &GrammarConfig, rng: &mut SplitMix64, depth: usize) {
    let kind = if depth == 0 {
        0
    } else {
        rng.weighted(&config.weights.as_array())
    };
    let braced = |out: &mut Vec<String>, rng: &mut SplitMix64| {
        out.push("{".into());
        let terms = 1 + rng.below(2);
        emit_expr(out, config, rng, depth - 1, terms);
        out.push("}".into());
    };
    match kind {
        0 => out.push(rng.choose(&config.entity_alphabet).clone()),
        1 | 2 => {
            out.push(rng.choose(&config.entity_alphabet).clone());
            out.push(if kind == 1 { "^" } else { "_" }.into());
            braced(out, rng);
        }
        3 => {
            out.push("\\frac".into());
            braced(out, rng);
            braced(out, rng);
        }
        4 => {
            out.push("\\sqrt".into());
            braced(out, rng);
        }
        5 if !config.special_operators.is_empty() => {
            out.push(rng.choose(&config.special_operators).clone());
            out.push("_".into());
            braced(out, rng);
            out.push("^".into());
            braced(out, rng);
        }
        // No operators configured: fall back to a plain atom.
        _ => out.push(rng.choose(&config.entity_alphabet).clone()),
    }
}
