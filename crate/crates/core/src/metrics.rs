//! Recognition metrics over tokenized expressions.
//!
//! All comparisons are token-level: two expressions match when their token
//! texts match position by position. [`edit_distance`] is the Levenshtein
//! distance over tokens with unit costs, and [`evaluate`] aggregates a
//! prediction/ground-truth corpus into expression-level accuracy at several
//! tolerances plus a corpus-level character (token) error rate.

use thiserror::Error;

use crate::lexer::TokenSeq;

/// Corpus-level metrics.
///
/// `exprate` is the fraction of predictions whose token sequence matches
/// the ground truth exactly; `leq1`/`leq2`/`leq3` relax the match to an
/// edit distance of at most 1, 2, or 3. `cer` is the total edit distance
/// over the corpus divided by the total ground-truth token count.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub exprate: f64,
    pub leq1: f64,
    pub leq2: f64,
    pub leq3: f64,
    pub cer: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// JSON rendering with all rates at a fixed six decimal places.
    pub fn to_json(&self) -> String {
        format!(
            "{{\n  \"exprate\": {:.6},\n  \"leq1\": {:.6},\n  \"leq2\": {:.6},\n  \"leq3\": {:.6},\n  \"cer\": {:.6},\n  \"n_samples\": {}\n}}",
            self.exprate, self.leq1, self.leq2, self.leq3, self.cer, self.n_samples
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and ground-truth corpora differ in length: {predictions} vs {ground_truth}")]
    LengthMismatch {
        predictions: usize,
        ground_truth: usize,
    },
    #[error("cannot evaluate an empty corpus")]
    EmptyCorpus,
}

/// Token-level Levenshtein distance with unit insert/delete/substitute
/// costs. Tokens are compared by text.
pub fn edit_distance(a: &TokenSeq, b: &TokenSeq) -> usize {
    let a: Vec<&str> = a.iter().map(|t| t.text.as_str()).collect();
    let b: Vec<&str> = b.iter().map(|t| t.text.as_str()).collect();
    // Single-row dynamic program over the shorter side.
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, &lt) in long.iter().enumerate() {
        let mut prev_diag = row[0];
        row[0] = i + 1;
        for (j, &st) in short.iter().enumerate() {
            let substitute = prev_diag + usize::from(lt != st);
            let insert = row[j] + 1;
            let delete = row[j + 1] + 1;
            prev_diag = row[j + 1];
            row[j + 1] = substitute.min(insert).min(delete);
        }
    }
    row[short.len()]
}

/// Aggregates metrics over aligned prediction/ground-truth corpora.
///
/// The error-rate denominator is the total ground-truth token count, so
/// empty ground-truth entries contribute their prediction's length to the
/// numerator without inflating the denominator.
pub fn evaluate(predictions: &[TokenSeq], ground_truth: &[TokenSeq]) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != ground_truth.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let n = predictions.len();
    let mut exact = 0usize;
    let mut within = [0usize; 3];
    let mut total_distance = 0usize;
    let mut total_tokens = 0usize;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        let d = edit_distance(pred, gt);
        if d == 0 {
            exact += 1;
        }
        for (slot, limit) in within.iter_mut().zip(1..) {
            if d <= limit {
                *slot += 1;
            }
        }
        total_distance += d;
        total_tokens += gt.len();
    }
    let rate = |count: usize| count as f64 / n as f64;
    let cer = if total_tokens == 0 {
        if total_distance == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        total_distance as f64 / total_tokens as f64
    };
    Ok(MetricsReport {
        exprate: rate(exact),
        leq1: rate(within[0]),
        leq2: rate(within[1]),
        leq3: rate(within[2]),
        cer,
        n_samples: n,
    })
}
