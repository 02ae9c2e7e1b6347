//! Central-difference validation of the tape gradients.
//!
//! The checker rebuilds the training loss twice per probed entry with the
//! entry nudged by ±ε and compares the symmetric difference quotient
//! against the tape gradient. Probes cover every parameter tensor (first,
//! last, and two interior entries), so a backward rule that drops or
//! misroutes a term shows up as a large disagreement on that tensor.

use crate::lexer::{TokenSeq, Vocabulary};
use crate::model::decoder::{bind_params, FeatureGrid};
use crate::model::params::ModelParams;
use crate::model::tape::Tape;
use crate::model::ModelError;
use crate::train::{batch_loss_on_tape, prepare_sample, PreparedSample};

/// Gradient-magnitude floor in the relative-error denominator. Central
/// differences of an O(10) loss at ε = 1e-5 carry roughly 1e-10 of
/// cancellation noise, so for entries whose gradients sit below this
/// floor the comparison degrades to an absolute one at scale
/// `floor · tolerance`, which stays safely above the noise.
const DENOMINATOR_FLOOR: f64 = 1e-4;

/// Largest relative disagreement found between the tape gradients and
/// central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_entry: usize,
    pub entries_checked: usize,
}

pub fn grad_check(
    params: &ModelParams,
    samples: &[(FeatureGrid, TokenSeq)],
    vocab: &Vocabulary,
    rec_weight: f64,
    pos_weight: f64,
    epsilon: f64,
) -> Result<GradCheckReport, ModelError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(ModelError::BadHyper(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if samples.is_empty() {
        return Err(ModelError::BadHyper(
            "gradient check needs at least one sample".into(),
        ));
    }
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .enumerate()
        .map(|(i, (grid, seq))| prepare_sample(i, grid.clone(), seq, vocab, &params.hyper))
        .collect::<Result<_, _>>()?;
    let batch: Vec<&PreparedSample> = prepared.iter().collect();

    let loss_of = |p: &ModelParams| -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, p);
        let loss = batch_loss_on_tape(&mut tape, &bound, &batch, &p.hyper, rec_weight, pos_weight)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                context: "gradient-check loss",
            });
        }
        Ok(value)
    };

    // One backward pass provides every analytic gradient.
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let loss = batch_loss_on_tape(&mut tape, &bound, &batch, &params.hyper, rec_weight, pos_weight)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(ModelError::NonFinite {
            context: "gradient-check loss",
        });
    }
    let grads = tape.backward(loss);
    // A tensor missing from the gradients never entered the graph; its
    // analytic gradient is zero and the probes verify that below.
    let analytic: Vec<(String, Option<Vec<f64>>)> = bound
        .iter()
        .map(|(name, var)| (name.to_string(), grads.get(var).map(|t| t.data().to_vec())))
        .collect();
    drop(tape);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_entry: 0,
        entries_checked: 0,
    };
    for (slot, (name, grad)) in analytic.iter().enumerate() {
        let count = work.entries()[slot].1.numel();
        for j in probe_indices(count) {
            let ga = grad.as_ref().map_or(0.0, |g| g[j]);
            let original = work.entries()[slot].1.data()[j];
            work.entries_mut()[slot].1.data_mut()[j] = original + epsilon;
            let plus = loss_of(&work)?;
            work.entries_mut()[slot].1.data_mut()[j] = original - epsilon;
            let minus = loss_of(&work)?;
            work.entries_mut()[slot].1.data_mut()[j] = original;

            let gfd = (plus - minus) / (2.0 * epsilon);
            let rel = (ga - gfd).abs() / (DENOMINATOR_FLOOR + ga.abs() + gfd.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = name.clone();
                report.worst_entry = j;
            }
        }
    }
    Ok(report)
}

/// Up to four entry indices spread across a tensor of `count` entries.
fn probe_indices(count: usize) -> Vec<usize> {
    let mut indices = vec![0, count / 3, 2 * count / 3, count - 1];
    indices.sort_unstable();
    indices.dedup();
    indices
}
