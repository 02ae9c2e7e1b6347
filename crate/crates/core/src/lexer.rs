//! LaTeX math tokenizer over a closed vocabulary.
//!
//! Expressions are split into single-character tokens and backslash
//! commands, every token is classified as *entity* (it owns visible ink:
//! letters, digits, operators, also `\frac` and `\sqrt`) or *structure*
//! (pure layout markup: scripts and braces by default), and
//! [`normalize`] rewrites script and fraction arguments into braced
//! groups so that downstream structure analysis only ever sees groups.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

pub const START_TOKEN: &str = "[sos]";
pub const END_TOKEN: &str = "[eos]";
pub const PAD_TOKEN: &str = "[pad]";

/// Layout triggers in canonical order:
/// superscript, subscript, radical, fraction.
pub const TRIGGERS: [&str; 4] = ["^", "_", "\\sqrt", "\\frac"];

/// Whether a token owns visible ink (`Entity`) or only arranges other
/// tokens spatially (`Structure`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolClass {
    Entity,
    Structure,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    /// Index into the vocabulary.
    pub id: usize,
    pub class: SymbolClass,
}

/// A tokenized expression. Token texts joined by single spaces round-trip
/// through [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSeq { tokens }
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

    pub fn get(&self, index: usize) -> Option<&Token> {
        self.tokens.get(index)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn classes(&self) -> Vec<SymbolClass> {
        self.tokens.iter().map(|t| t.class).collect()
    }

    /// Source text with single spaces between tokens.
    pub fn to_latex(&self) -> String {
        let texts: Vec<&str> = self.tokens.iter().map(|t| t.text.as_str()).collect();
        texts.join(" ")
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_latex())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token {0:?} appears more than once in the dictionary")]
    DuplicateToken(String),
    #[error("structure token {0:?} is not in the vocabulary")]
    StructureNotInVocab(String),
    #[error("trigger token {0:?} is missing from the vocabulary")]
    MissingTrigger(String),
    #[error("reserved token {0:?} may not be classified as structure")]
    ReservedInStructureSet(String),
    #[error("dictionary defines no tokens")]
    Empty,
}

/// Closed token inventory plus the set of tokens classified as structure.
///
/// The reserved markers `[sos]`, `[eos]`, `[pad]` are always present and
/// always entity-classified. The four layout triggers of [`TRIGGERS`] are
/// required members; whether a trigger is *structure* is controlled by the
/// structure set (by default `^`, `_`, `{`, `}` are structure while `\frac`
/// and `\sqrt` are entity, since the bar and the radical own visible ink).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    structure_set: BTreeSet<String>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I, structure_set: BTreeSet<String>) -> Result<Vocabulary, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if list.is_empty() {
            return Err(VocabError::Empty);
        }
        for reserved in [START_TOKEN, END_TOKEN, PAD_TOKEN] {
            if !list.iter().any(|t| t == reserved) {
                list.push(reserved.to_string());
            }
        }
        let mut index = HashMap::new();
        for (i, tok) in list.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(VocabError::DuplicateToken(tok.clone()));
            }
        }
        for trigger in TRIGGERS {
            if !index.contains_key(trigger) {
                return Err(VocabError::MissingTrigger(trigger.to_string()));
            }
        }
        for tok in &structure_set {
            if !index.contains_key(tok) {
                return Err(VocabError::StructureNotInVocab(tok.clone()));
            }
            if tok == START_TOKEN || tok == END_TOKEN || tok == PAD_TOKEN {
                return Err(VocabError::ReservedInStructureSet(tok.clone()));
            }
        }
        Ok(Vocabulary {
            tokens: list,
            index,
            structure_set,
        })
    }

    /// Built-in inventory: digits, Latin letters, common operators and
    /// relations, a Greek subset, big operators, and the layout tokens.
    pub fn builtin() -> Vocabulary {
        Vocabulary::from_dict_str(BUILTIN_DICT).expect("builtin dictionary is well formed")
    }

    /// Parses the dictionary format: one token per line, `#` comments,
    /// blank lines ignored. Tokens after a `[structure]` section header are
    /// recorded as structure-classified (they must also appear as vocabulary
    /// entries, which the section provides).
    pub fn from_dict_str(text: &str) -> Result<Vocabulary, VocabError> {
        let mut tokens = Vec::new();
        let mut structure = BTreeSet::new();
        let mut in_structure = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[structure]" {
                in_structure = true;
                continue;
            }
            if in_structure {
                structure.insert(line.to_string());
            }
            tokens.push(line.to_string());
        }
        Vocabulary::new(tokens, structure)
    }

    pub fn from_dict_file(path: &Path) -> Result<Vocabulary, DictFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| DictFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocabulary::from_dict_str(&text).map_err(DictFileError::Vocab)
    }

    /// Replaces the structure set, revalidating membership.
    pub fn with_structure_set(self, structure_set: BTreeSet<String>) -> Result<Vocabulary, VocabError> {
        Vocabulary::new(self.tokens, structure_set)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_text(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn token_id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn token(&self, text: &str) -> Option<Token> {
        self.token_id(text).map(|id| Token {
            text: text.to_string(),
            id,
            class: classify(text, self),
        })
    }

    pub fn token_by_id(&self, id: usize) -> Option<Token> {
        self.token_text(id).map(|text| Token {
            text: text.to_string(),
            id,
            class: classify(text, self),
        })
    }

    pub fn start_id(&self) -> usize {
        self.index[START_TOKEN]
    }

    pub fn end_id(&self) -> usize {
        self.index[END_TOKEN]
    }

    pub fn pad_id(&self) -> usize {
        self.index[PAD_TOKEN]
    }

    pub fn structure_set(&self) -> &BTreeSet<String> {
        &self.structure_set
    }

    pub fn texts(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the sorted structure set, one token per line.
    /// Stored in checkpoint sidecars so a reloaded model can verify it is
    /// paired with the same entity/structure split it was trained with.
    pub fn structure_hash(&self) -> String {
        let mut joined = String::new();
        for tok in &self.structure_set {
            joined.push_str(tok);
            joined.push('\n');
        }
        sha256_hex(joined.as_bytes())
    }

    /// Hex SHA-256 over the token list in id order, one token per line.
    pub fn vocab_hash(&self) -> String {
        let mut joined = String::new();
        for tok in &self.tokens {
            joined.push_str(tok);
            joined.push('\n');
        }
        sha256_hex(joined.as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Error)]
pub enum DictFileError {
    #[error("cannot read dictionary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Vocab(VocabError),
}

/// Structure iff the token is in the vocabulary's structure set.
pub fn classify(text: &str, vocab: &Vocabulary) -> SymbolClass {
    if vocab.structure_set().contains(text) {
        SymbolClass::Structure
    } else {
        SymbolClass::Entity
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexError {
    #[error("unknown token {lexeme:?} at byte {position}")]
    UnknownToken { position: usize, lexeme: String },
    #[error("trailing backslash at byte {position} has no command name")]
    UnterminatedCommand { position: usize },
}

/// Splits `source` into vocabulary tokens.
///
/// A backslash followed by ASCII letters is one command token; a backslash
/// followed by any other character is a two-character token (`\{` etc.);
/// every other non-whitespace character stands alone. Whitespace only
/// separates tokens.
pub fn tokenize(source: &str, vocab: &Vocabulary) -> Result<TokenSeq, LexError> {
    let mut tokens = Vec::new();
    let mut chars = source.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let lexeme = if c == '\\' {
            let mut name = String::new();
            while let Some(&(_, next)) = chars.peek() {
                if next.is_ascii_alphabetic() {
                    name.push(next);
                    chars.next();
                } else {
                    break;
                }
            }
            if name.is_empty() {
                match chars.next() {
                    Some((_, next)) => format!("\\{next}"),
                    None => return Err(LexError::UnterminatedCommand { position: pos }),
                }
            } else {
                format!("\\{name}")
            }
        } else {
            c.to_string()
        };
        match vocab.token(&lexeme) {
            Some(tok) => tokens.push(tok),
            None => {
                return Err(LexError::UnknownToken {
                    position: pos,
                    lexeme,
                })
            }
        }
    }
    Ok(TokenSeq::new(tokens))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizeError {
    #[error("script trigger {trigger:?} at token {index} has no valid argument")]
    MalformedScript { index: usize, trigger: String },
    #[error("\\frac at token {index} is not followed by two arguments")]
    MissingFracArgs { index: usize },
    #[error("unmatched brace at token {index}")]
    UnbalancedBraces { index: usize },
    #[error("\\sqrt with an optional index is not supported (token {index})")]
    IndexedRadical { index: usize },
}

/// Rewrites the sequence so every script, fraction, and radical argument is
/// a braced group: `x ^ 2` becomes `x ^ { 2 }`, `\frac a b` becomes
/// `\frac { a } { b }`. An unbraced argument may be a single token or a
/// `\frac`/`\sqrt` with its own (recursively wrapped) arguments. Already
/// normalized input passes through unchanged, so the rewrite is idempotent.
pub fn normalize(seq: &TokenSeq, vocab: &Vocabulary) -> Result<TokenSeq, NormalizeError> {
    check_balance(seq)?;
    let mut out = Vec::with_capacity(seq.len());
    norm_region(seq.tokens(), 0, seq.len(), vocab, &mut out)?;
    Ok(TokenSeq::new(out))
}

fn check_balance(seq: &TokenSeq) -> Result<(), NormalizeError> {
    let mut open_stack = Vec::new();
    for (i, tok) in seq.iter().enumerate() {
        match tok.text.as_str() {
            "{" => open_stack.push(i),
            "}" => {
                if open_stack.pop().is_none() {
                    return Err(NormalizeError::UnbalancedBraces { index: i });
                }
            }
            _ => {}
        }
    }
    match open_stack.first() {
        Some(&i) => Err(NormalizeError::UnbalancedBraces { index: i }),
        None => Ok(()),
    }
}

fn matching_close(tokens: &[Token], open: usize) -> usize {
    debug_assert_eq!(tokens[open].text, "{");
    let mut depth = 0usize;
    for (i, tok) in tokens.iter().enumerate().skip(open) {
        match tok.text.as_str() {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
    }
    unreachable!("check_balance guarantees a matching close");
}

fn norm_region(
    tokens: &[Token],
    start: usize,
    end: usize,
    vocab: &Vocabulary,
    out: &mut Vec<Token>,
) -> Result<(), NormalizeError> {
    let mut i = start;
    while i < end {
        let tok = &tokens[i];
        match tok.text.as_str() {
            "^" | "_" => {
                out.push(tok.clone());
                i = norm_argument(tokens, i + 1, end, vocab, out, ArgOwner::Script(i))?;
            }
            "\\frac" => {
                let frac = i;
                out.push(tok.clone());
                i = norm_argument(tokens, i + 1, end, vocab, out, ArgOwner::Frac(frac))?;
                i = norm_argument(tokens, i, end, vocab, out, ArgOwner::Frac(frac))?;
            }
            "\\sqrt" => {
                if i + 1 < end && tokens[i + 1].text == "[" {
                    return Err(NormalizeError::IndexedRadical { index: i });
                }
                out.push(tok.clone());
                i = norm_argument(tokens, i + 1, end, vocab, out, ArgOwner::Script(i))?;
            }
            "{" => {
                let close = matching_close(tokens, i);
                out.push(tok.clone());
                norm_region(tokens, i + 1, close, vocab, out)?;
                out.push(tokens[close].clone());
                i = close + 1;
            }
            _ => {
                out.push(tok.clone());
                i += 1;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum ArgOwner {
    /// `^`, `_`, or `\sqrt` at the given index.
    Script(usize),
    /// `\frac` at the given index.
    Frac(usize),
}

impl ArgOwner {
    fn missing_error(self, tokens: &[Token]) -> NormalizeError {
        match self {
            ArgOwner::Script(index) => NormalizeError::MalformedScript {
                index,
                trigger: tokens[index].text.clone(),
            },
            ArgOwner::Frac(index) => NormalizeError::MissingFracArgs { index },
        }
    }
}

/// Emits one argument starting at `i` as a braced group and returns the
/// index just past the consumed tokens.
fn norm_argument(
    tokens: &[Token],
    i: usize,
    end: usize,
    vocab: &Vocabulary,
    out: &mut Vec<Token>,
    owner: ArgOwner,
) -> Result<usize, NormalizeError> {
    if i >= end {
        return Err(owner.missing_error(tokens));
    }
    let brace = |text: &str| vocab.token(text).expect("braces are vocabulary members");
    match tokens[i].text.as_str() {
        "{" => {
            let close = matching_close(tokens, i);
            out.push(tokens[i].clone());
            norm_region(tokens, i + 1, close, vocab, out)?;
            out.push(tokens[close].clone());
            Ok(close + 1)
        }
        "}" | "^" | "_" => Err(owner.missing_error(tokens)),
        "\\frac" => {
            out.push(brace("{"));
            out.push(tokens[i].clone());
            let mut next = norm_argument(tokens, i + 1, end, vocab, out, ArgOwner::Frac(i))?;
            next = norm_argument(tokens, next, end, vocab, out, ArgOwner::Frac(i))?;
            out.push(brace("}"));
            Ok(next)
        }
        "\\sqrt" => {
            if i + 1 < end && tokens[i + 1].text == "[" {
                return Err(NormalizeError::IndexedRadical { index: i });
            }
            out.push(brace("{"));
            out.push(tokens[i].clone());
            let next = norm_argument(tokens, i + 1, end, vocab, out, ArgOwner::Script(i))?;
            out.push(brace("}"));
            Ok(next)
        }
        _ => {
            out.push(brace("{"));
            out.push(tokens[i].clone());
            out.push(brace("}"));
            Ok(i + 1)
        }
    }
}

const BUILTIN_DICT: &str = "\
# Built-in math vocabulary.
[sos]
[eos]
[pad]
0
1
2
3
4
5
6
7
8
9
a
b
c
d
e
f
g
h
i
j
k
l
m
n
o
p
q
r
s
t
u
v
w
x
y
z
A
B
C
D
E
F
G
H
I
J
K
L
M
N
O
P
Q
R
S
T
U
V
W
X
Y
Z
+
-
=
(
)
[
]
|
!
,
.
/
<
>
\\frac
\\sqrt
\\sum
\\prod
\\int
\\lim
\\log
\\sin
\\cos
\\tan
\\alpha
\\beta
\\gamma
\\delta
\\theta
\\lambda
\\mu
\\pi
\\sigma
\\phi
\\omega
\\infty
\\times
\\pm
\\cdot
\\div
\\leq
\\geq
\\neq
\\rightarrow
\\ldots
\\prime
[structure]
^
_
{
}
";

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(source: &str) -> Vec<String> {
        let vocab = Vocabulary::builtin();
        tokenize(source, &vocab)
            .unwrap()
            .iter()
            .map(|t| t.text.clone())
            .collect()
    }

    #[test]
    fn splits_commands_and_characters() {
        assert_eq!(
            toks("x^{2}+\\frac{a}{b}"),
            ["x", "^", "{", "2", "}", "+", "\\frac", "{", "a", "}", "{", "b", "}"]
        );
    }

    #[test]
    fn whitespace_only_separates() {
        assert_eq!(toks("a  +\tb"), ["a", "+", "b"]);
        assert_eq!(toks("  "), Vec::<String>::new());
    }

    #[test]
    fn command_names_are_maximal_letter_runs() {
        assert_eq!(toks("\\sum_{i}"), ["\\sum", "_", "{", "i", "}"]);
        // `\sigma` must not be read as `\s igma`.
        assert_eq!(toks("\\sigma"), ["\\sigma"]);
    }

    #[test]
    fn unknown_token_reports_position() {
        let vocab = Vocabulary::builtin();
        let err = tokenize("a @ b", &vocab).unwrap_err();
        assert_eq!(
            err,
            LexError::UnknownToken {
                position: 2,
                lexeme: "@".to_string()
            }
        );
        let err = tokenize("\\unknowncmd", &vocab).unwrap_err();
        assert!(matches!(err, LexError::UnknownToken { position: 0, .. }));
    }

    #[test]
    fn trailing_backslash_is_unterminated() {
        let vocab = Vocabulary::builtin();
        let err = tokenize("a\\", &vocab).unwrap_err();
        assert_eq!(err, LexError::UnterminatedCommand { position: 1 });
    }

    #[test]
    fn round_trips_through_to_latex() {
        let vocab = Vocabulary::builtin();
        let seq = tokenize("x ^ { 2 } + \\frac { a } { b }", &vocab).unwrap();
        let text = seq.to_latex();
        let again = tokenize(&text, &vocab).unwrap();
        assert_eq!(seq, again);
    }

    #[test]
    fn classifies_structure_and_entity() {
        let vocab = Vocabulary::builtin();
        assert_eq!(classify("^", &vocab), SymbolClass::Structure);
        assert_eq!(classify("_", &vocab), SymbolClass::Structure);
        assert_eq!(classify("{", &vocab), SymbolClass::Structure);
        assert_eq!(classify("}", &vocab), SymbolClass::Structure);
        assert_eq!(classify("\\frac", &vocab), SymbolClass::Entity);
        assert_eq!(classify("\\sqrt", &vocab), SymbolClass::Entity);
        assert_eq!(classify("x", &vocab), SymbolClass::Entity);
        assert_eq!(classify("+", &vocab), SymbolClass::Entity);
    }

    #[test]
    fn vocabulary_rejects_bad_dictionaries() {
        assert_eq!(
            Vocabulary::from_dict_str("a\na\n^\n_\n\\frac\n\\sqrt\n").unwrap_err(),
            VocabError::DuplicateToken("a".to_string())
        );
        assert_eq!(
            Vocabulary::from_dict_str("a\n^\n_\n\\frac\n").unwrap_err(),
            VocabError::MissingTrigger("\\sqrt".to_string())
        );
        let vocab = Vocabulary::builtin();
        let mut set = BTreeSet::new();
        set.insert("[pad]".to_string());
        assert_eq!(
            vocab.with_structure_set(set).unwrap_err(),
            VocabError::ReservedInStructureSet("[pad]".to_string())
        );
    }

    #[test]
    fn reserved_tokens_are_always_present() {
        let vocab = Vocabulary::from_dict_str("x\n^\n_\n\\frac\n\\sqrt\n{\n}\n").unwrap();
        assert!(vocab.token_id(START_TOKEN).is_some());
        assert!(vocab.token_id(END_TOKEN).is_some());
        assert!(vocab.token_id(PAD_TOKEN).is_some());
    }

    #[test]
    fn structure_hash_tracks_the_set() {
        let vocab = Vocabulary::builtin();
        let base = vocab.structure_hash();
        let mut set = vocab.structure_set().clone();
        set.remove("{");
        set.remove("}");
        let smaller = vocab.clone().with_structure_set(set).unwrap();
        assert_ne!(base, smaller.structure_hash());
    }

    fn norm(source: &str) -> String {
        let vocab = Vocabulary::builtin();
        let seq = tokenize(source, &vocab).unwrap();
        normalize(&seq, &vocab).unwrap().to_latex()
    }

    #[test]
    fn wraps_bare_script_arguments() {
        assert_eq!(norm("x^2"), "x ^ { 2 }");
        assert_eq!(norm("x_i"), "x _ { i }");
        assert_eq!(norm("x^2_i"), "x ^ { 2 } _ { i }");
    }

    #[test]
    fn wraps_bare_frac_and_sqrt_arguments() {
        assert_eq!(norm("\\frac a b"), "\\frac { a } { b }");
        assert_eq!(norm("\\sqrt x"), "\\sqrt { x }");
        assert_eq!(norm("\\frac a {b+c}"), "\\frac { a } { b + c }");
    }

    #[test]
    fn wraps_nested_command_arguments_as_units() {
        assert_eq!(norm("x^\\frac a b"), "x ^ { \\frac { a } { b } }");
        assert_eq!(norm("x^\\sqrt 2"), "x ^ { \\sqrt { 2 } }");
        assert_eq!(norm("\\frac \\sqrt a b"), "\\frac { \\sqrt { a } } { b }");
    }

    #[test]
    fn normalize_is_idempotent() {
        let vocab = Vocabulary::builtin();
        for source in ["x^2_i", "\\frac a b", "x^\\frac a b + \\sqrt 2", "{ a }"] {
            let once = normalize(&tokenize(source, &vocab).unwrap(), &vocab).unwrap();
            let twice = normalize(&once, &vocab).unwrap();
            assert_eq!(once, twice, "normalize not idempotent on {source:?}");
        }
    }

    #[test]
    fn normalize_rejects_malformed_input() {
        let vocab = Vocabulary::builtin();
        let check = |source: &str| {
            let seq = tokenize(source, &vocab).unwrap();
            normalize(&seq, &vocab).unwrap_err()
        };
        assert!(matches!(check("x^"), NormalizeError::MalformedScript { index: 1, .. }));
        assert!(matches!(check("x^^2"), NormalizeError::MalformedScript { index: 1, .. }));
        assert!(matches!(check("x^}"), NormalizeError::UnbalancedBraces { .. }));
        assert!(matches!(check("\\frac a"), NormalizeError::MissingFracArgs { index: 0 }));
        assert!(matches!(check("\\frac"), NormalizeError::MissingFracArgs { index: 0 }));
        assert!(matches!(check("{ a"), NormalizeError::UnbalancedBraces { index: 0 }));
        assert!(matches!(check("a }"), NormalizeError::UnbalancedBraces { index: 1 }));
        assert!(matches!(check("\\sqrt [ 3 ] x"), NormalizeError::IndexedRadical { index: 0 }));
        assert!(matches!(check("\\sqrt"), NormalizeError::MalformedScript { index: 0, .. }));
    }

    #[test]
    fn normalize_preserves_entity_tokens() {
        let vocab = Vocabulary::builtin();
        for source in ["x^2_i", "\\frac a b", "x^\\frac a b + \\sqrt 2 - y"] {
            let seq = tokenize(source, &vocab).unwrap();
            let normed = normalize(&seq, &vocab).unwrap();
            let entities = |s: &TokenSeq| {
                s.iter()
                    .filter(|t| t.class == SymbolClass::Entity)
                    .map(|t| t.text.clone())
                    .collect::<Vec<_>>()
            };
            assert_eq!(entities(&seq), entities(&normed));
        }
    }
}
