//! Toy training loop: Adam over the tape gradients of the two-stream loss.
//!
//! The decoder is trained teacher-forced on `(feature grid, token
//! sequence)` pairs. Each sequence yields a symbol stream (shifted token
//! ids → next-token targets) and a position stream (shifted identifier
//! rows → nesting level and branch targets); both streams run through the
//! same decoder weights and their cross-entropies combine as
//! `rec_weight · L_rec + pos_weight · L_pos`. With `pos_weight = 0` the
//! position stream is skipped entirely.
//!
//! All randomness (parameter init, epoch shuffles) derives from the
//! config seed through split streams, so a run is a pure function of its
//! inputs.

use crate::forest::{build_identifier_matrix, derive_targets, encode_forest, IdCell};
use crate::lexer::{TokenSeq, Vocabulary};
use crate::metrics;
use crate::model::decoder::{
    bind_params, encode_grid, entity_mask, greedy_decode, identifier_input_on, linear,
    symbol_input_on, BoundParams, FeatureGrid,
};
use crate::model::params::{Hyper, ModelParams};
use crate::model::tape::{Tape, Var};
use crate::model::tensor::Tensor;
use crate::model::ModelError;
use crate::rng::SplitMix64;

/// Stream index base for the per-epoch shuffle; distinct from the
/// parameter-init streams used in [`ModelParams`].
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// One corpus entry ready for the loss graph: shifted inputs and
/// per-step targets for both streams, `len + 1` steps each (the extra
/// step emits the end marker at nesting 0, branch cell `End`).
#[derive(Debug, Clone)]
pub(crate) struct PreparedSample {
    pub grid: FeatureGrid,
    pub seq: TokenSeq,
    /// `[sos]` followed by the token ids.
    pub sym_inputs: Vec<usize>,
    /// Token ids followed by `[eos]`.
    pub sym_targets: Vec<usize>,
    /// Entity indicator of the symbol emitted at each step.
    pub mask: Vec<f64>,
    /// Identifier-matrix cell indices, one row per step, shifted right
    /// (step 0 reads the empty identifier row).
    pub id_cells: Vec<usize>,
    /// Nesting-level class per step.
    pub nested_targets: Vec<usize>,
    /// Branch cell index per step.
    pub relative_targets: Vec<usize>,
}

impl PreparedSample {
    pub(crate) fn steps(&self) -> usize {
        self.sym_targets.len()
    }
}

pub(crate) fn prepare_sample(
    index: usize,
    grid: FeatureGrid,
    seq: &TokenSeq,
    vocab: &Vocabulary,
    hyper: &Hyper,
) -> Result<PreparedSample, ModelError> {
    let bad = |reason: String| ModelError::BadSample { index, reason };
    if vocab.len() != hyper.vocab_size {
        return Err(bad(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            hyper.vocab_size
        )));
    }
    let ids = encode_forest(seq, hyper.max_nesting).map_err(|e| bad(e.to_string()))?;
    let targets = derive_targets(seq, &ids);
    let matrix = build_identifier_matrix(&ids, hyper.max_nesting).map_err(|e| bad(e.to_string()))?;

    let len = seq.len();
    let mut sym_inputs = Vec::with_capacity(len + 1);
    sym_inputs.push(vocab.start_id());
    sym_inputs.extend(seq.ids());
    let mut sym_targets = seq.ids();
    sym_targets.push(vocab.end_id());
    let mut mask = entity_mask(&seq.classes());
    mask.push(0.0); // the end marker owns no ink

    let row_len = hyper.id_row_len();
    let mut id_cells = Vec::with_capacity((len + 1) * row_len);
    id_cells.extend(empty_row_indices(hyper.max_nesting));
    id_cells.extend(matrix.cells().iter().map(|c| c.index()));

    let mut nested_targets = targets.nested_levels.clone();
    nested_targets.push(0);
    let mut relative_targets: Vec<usize> = targets
        .relative_positions
        .iter()
        .map(|&p| IdCell::Branch(p).index())
        .collect();
    relative_targets.push(IdCell::End.index());

    Ok(PreparedSample {
        grid,
        seq: seq.clone(),
        sym_inputs,
        sym_targets,
        mask,
        id_cells,
        nested_targets,
        relative_targets,
    })
}

/// The empty identifier row (decode step 0) as cell indices.
fn empty_row_indices(max_nesting: usize) -> Vec<usize> {
    crate::forest::IdentifierMatrix::empty_row(max_nesting)
        .into_iter()
        .map(|c| c.index())
        .collect()
}

/// Negative mean log-probability of `targets` under row-softmaxed logits.
fn nll_on_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let probs = tape.softmax_rows(logits);
    let logp = tape.log(probs);
    let picked = tape.pick_entries(logp, targets);
    let mean = tape.mean_all(picked);
    tape.scale(mean, -1.0)
}

/// Builds the full weighted loss of one sample on the tape and returns
/// the scalar variable.
pub(crate) fn sample_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    sample: &PreparedSample,
    hyper: &Hyper,
    rec_weight: f64,
    pos_weight: f64,
) -> Result<Var, ModelError> {
    let enc = encode_grid(tape, &sample.grid, bound, hyper)?;
    let steps = sample.steps();

    let sym_in = symbol_input_on(tape, bound, &sample.sym_inputs, hyper.model_dim);
    let (sym_feat, _) =
        crate::model::decoder::stream_forward(tape, &enc, sym_in, &sample.mask, bound, hyper, false);
    let sym_logits = linear(tape, sym_feat, bound, "symbol_head");
    let rec = nll_on_tape(tape, sym_logits, &sample.sym_targets);
    let mut loss = tape.scale(rec, rec_weight);

    if pos_weight != 0.0 {
        if !bound.has("position.embed.table") {
            return Err(ModelError::MissingPositionBranch);
        }
        let pos_in = identifier_input_on(tape, bound, &sample.id_cells, steps, hyper);
        let (pos_feat, _) =
            crate::model::decoder::stream_forward(tape, &enc, pos_in, &sample.mask, bound, hyper, false);
        let nested_logits = linear(tape, pos_feat, bound, "position.nested_head");
        let relative_logits = linear(tape, pos_feat, bound, "position.relative_head");
        let nested = nll_on_tape(tape, nested_logits, &sample.nested_targets);
        let relative = nll_on_tape(tape, relative_logits, &sample.relative_targets);
        let pos = tape.add(nested, relative);
        let weighted = tape.scale(pos, pos_weight);
        loss = tape.add(loss, weighted);
    }
    Ok(loss)
}

/// Mean of the per-sample losses, built on one tape so a single backward
/// pass accumulates every sample's gradients.
pub(crate) fn batch_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    samples: &[&PreparedSample],
    hyper: &Hyper,
    rec_weight: f64,
    pos_weight: f64,
) -> Result<Var, ModelError> {
    assert!(!samples.is_empty(), "a batch needs at least one sample");
    let mut acc: Option<Var> = None;
    for sample in samples {
        let loss = sample_loss_on_tape(tape, bound, sample, hyper, rec_weight, pos_weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, loss),
            None => loss,
        });
    }
    Ok(tape.scale(acc.expect("nonempty batch"), 1.0 / samples.len() as f64))
}

/// Adam with one slot per parameter tensor, aligned with the canonical
/// entry order of [`ModelParams::entries`].
struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    fn new(learning_rate: f64, params: &ModelParams) -> Adam {
        let sizes: Vec<usize> = params.entries().iter().map(|(_, t)| t.numel()).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update; `grads[slot]` is `None` when a tensor did not
    /// participate in the step's graph (treated as a zero gradient).
    fn update(&mut self, params: &mut ModelParams, grads: &[Option<&Tensor>]) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (_, tensor)) in params.entries_mut().into_iter().enumerate() {
            let Some(grad) = grads[slot] else { continue };
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rec_weight: f64,
    pub pos_weight: f64,
    /// Greedy-decode evaluation runs every this many epochs…
    pub eval_interval: usize,
    /// …but only once the epoch's mean loss is below this threshold
    /// (decoding every epoch from the start would dominate the runtime).
    pub eval_loss_threshold: f64,
    /// Decode step budget; 0 means "longest training sequence plus four".
    pub max_decode_len: usize,
    /// Stop as soon as every training expression decodes exactly.
    pub stop_at_full_exprate: bool,
}

impl TrainConfig {
    pub fn toy(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            seed,
            epochs,
            batch_size: 10,
            learning_rate: 1.5e-3,
            rec_weight: 1.0,
            pos_weight: 1.0,
            eval_interval: 5,
            eval_loss_threshold: 1.0,
            max_decode_len: 0,
            stop_at_full_exprate: true,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadHyper(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if !(self.rec_weight >= 0.0 && self.pos_weight >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.eval_interval == 0 {
            return bad("evaluation interval must be positive");
        }
        Ok(())
    }
}

/// Per-epoch record: 1-based epoch, mean training loss, and the
/// exact-match rate when an evaluation ran that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub exprate: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    /// First (1-based) epoch whose evaluation decoded every expression
    /// exactly, if any did.
    pub epochs_to_full_exprate: Option<usize>,
    pub final_exprate: f64,
}

/// Trains a fresh model on `(grid, sequence)` pairs until the epoch
/// budget runs out or every training expression decodes exactly.
pub fn train_toy(
    hyper: &Hyper,
    config: &TrainConfig,
    samples: &[(FeatureGrid, TokenSeq)],
    vocab: &Vocabulary,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::BadHyper("training needs at least one sample".into()));
    }
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .enumerate()
        .map(|(i, (grid, seq))| prepare_sample(i, grid.clone(), seq, vocab, hyper))
        .collect::<Result<_, _>>()?;
    let max_decode_len = if config.max_decode_len > 0 {
        config.max_decode_len
    } else {
        prepared.iter().map(|s| s.seq.len()).max().unwrap_or(0) + 4
    };

    let mut params = ModelParams::init(hyper, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, &params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut epochs_to_full_exprate = None;
    let mut final_exprate = 0.0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = SplitMix64::stream(config.seed, SHUFFLE_STREAM_BASE + epoch as u64);
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let loss = batch_loss_on_tape(
                &mut tape,
                &bound,
                &batch,
                hyper,
                config.rec_weight,
                config.pos_weight,
            )?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(ModelError::NonFinite { context: "training loss" });
            }
            loss_sum += loss_value * chunk.len() as f64;
            let grads = tape.backward(loss);
            let grad_refs: Vec<Option<&Tensor>> =
                bound.iter().map(|(_, var)| grads.get(var)).collect();
            adam.update(&mut params, &grad_refs);
        }
        let mean_loss = loss_sum / prepared.len() as f64;

        let due = epoch % config.eval_interval == 0 || epoch == config.epochs;
        let exprate = if due && mean_loss <= config.eval_loss_threshold {
            Some(evaluate_exprate(&params, &prepared, vocab, max_decode_len)?)
        } else {
            None
        };
        if let Some(rate) = exprate {
            final_exprate = rate;
            if rate == 1.0 && epochs_to_full_exprate.is_none() {
                epochs_to_full_exprate = Some(epoch);
            }
        }
        history.push(EpochStats {
            epoch,
            mean_loss,
            exprate,
        });
        if exprate == Some(1.0) && config.stop_at_full_exprate {
            break;
        }
    }

    // Make the reported rate reflect the returned parameters even when
    // the loop never got around to an evaluation.
    if history.last().map_or(true, |s| s.exprate.is_none()) {
        final_exprate = evaluate_exprate(&params, &prepared, vocab, max_decode_len)?;
        if let Some(last) = history.last_mut() {
            last.exprate = Some(final_exprate);
            if final_exprate == 1.0 && epochs_to_full_exprate.is_none() {
                epochs_to_full_exprate = Some(last.epoch);
            }
        }
    }

    Ok(TrainOutcome {
        params,
        history,
        epochs_to_full_exprate,
        final_exprate,
    })
}

fn evaluate_exprate(
    params: &ModelParams,
    prepared: &[PreparedSample],
    vocab: &Vocabulary,
    max_decode_len: usize,
) -> Result<f64, ModelError> {
    let mut predictions = Vec::with_capacity(prepared.len());
    let mut truth = Vec::with_capacity(prepared.len());
    for sample in prepared {
        predictions.push(greedy_decode(&sample.grid, params, max_decode_len, vocab)?);
        truth.push(sample.seq.clone());
    }
    let report = metrics::evaluate(&predictions, &truth)
        .expect("evaluation corpus is nonempty and aligned");
    Ok(report.exprate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize;

    fn toy_setup() -> (Vocabulary, Hyper) {
        let vocab = Vocabulary::builtin();
        let hyper = Hyper::toy(16, 4, vocab.len(), vocab.len());
        (vocab, hyper)
    }

    /// One-hot single-cell grids are enough to exercise the loop.
    fn glyph_grid(seq: &TokenSeq, hyper: &Hyper, height: usize, width: usize) -> FeatureGrid {
        let mut grid = FeatureGrid::zeros(height, width, hyper.input_channels);
        for (i, token) in seq.iter().enumerate() {
            grid.set(i / width, i % width, token.id, 1.0);
        }
        grid
    }

    #[test]
    fn prepare_sample_shapes_and_shift() {
        let (vocab, hyper) = toy_setup();
        let seq = tokenize("x ^ { 2 }", &vocab).unwrap();
        let grid = glyph_grid(&seq, &hyper, 3, 3);
        let s = prepare_sample(0, grid, &seq, &vocab, &hyper).unwrap();
        let steps = seq.len() + 1;
        assert_eq!(s.steps(), steps);
        assert_eq!(s.sym_inputs.len(), steps);
        assert_eq!(s.sym_inputs[0], vocab.start_id());
        assert_eq!(&s.sym_inputs[1..], &seq.ids()[..]);
        assert_eq!(s.sym_targets[..steps - 1], seq.ids()[..]);
        assert_eq!(s.sym_targets[steps - 1], vocab.end_id());
        // x ^ { 2 } → entity, structure ×2, entity, structure; plus the
        // end-marker step.
        assert_eq!(s.mask, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.id_cells.len(), steps * hyper.id_row_len());
        // Step 0 reads the empty identifier row.
        let empty: Vec<usize> = empty_row_indices(hyper.max_nesting);
        assert_eq!(&s.id_cells[..hyper.id_row_len()], &empty[..]);
        assert_eq!(s.nested_targets, vec![0, 1, 1, 1, 1, 0]);
        // M ML ML ML ML → innermost branch cells, then the end cell.
        let m = IdCell::Branch(crate::forest::PosChar::M).index();
        let l = IdCell::Branch(crate::forest::PosChar::L).index();
        assert_eq!(s.relative_targets, vec![m, l, l, l, l, IdCell::End.index()]);
    }

    #[test]
    fn prepare_sample_rejects_vocab_mismatch() {
        let (vocab, _) = toy_setup();
        let hyper = Hyper::toy(16, 4, vocab.len() + 1, 4);
        let seq = tokenize("x", &vocab).unwrap();
        let grid = FeatureGrid::zeros(2, 2, hyper.input_channels);
        assert!(matches!(
            prepare_sample(3, grid, &seq, &vocab, &hyper),
            Err(ModelError::BadSample { index: 3, .. })
        ));
    }

    #[test]
    fn batch_loss_matches_mean_of_sample_losses() {
        let (vocab, hyper) = toy_setup();
        let params = ModelParams::init(&hyper, 11).unwrap();
        let seqs = ["x + 1", "\\frac { a } { b }"];
        let prepared: Vec<PreparedSample> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seq = tokenize(s, &vocab).unwrap();
                let grid = glyph_grid(&seq, &hyper, 3, 3);
                prepare_sample(i, grid, &seq, &vocab, &hyper).unwrap()
            })
            .collect();

        let single_losses: Vec<f64> = prepared
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let bound = bind_params(&mut tape, &params);
                let loss = sample_loss_on_tape(&mut tape, &bound, s, &hyper, 1.0, 1.0).unwrap();
                tape.value(loss).data()[0]
            })
            .collect();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let batch: Vec<&PreparedSample> = prepared.iter().collect();
        let loss = batch_loss_on_tape(&mut tape, &bound, &batch, &hyper, 1.0, 1.0).unwrap();
        let got = tape.value(loss).data()[0];
        let want = single_losses.iter().sum::<f64>() / single_losses.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn skipping_position_stream_changes_nothing_for_symbol_loss() {
        let (vocab, hyper) = toy_setup();
        let params = ModelParams::init(&hyper, 11).unwrap();
        let seq = tokenize("a + b", &vocab).unwrap();
        let grid = glyph_grid(&seq, &hyper, 3, 3);
        let s = prepare_sample(0, grid, &seq, &vocab, &hyper).unwrap();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let rec_only = sample_loss_on_tape(&mut tape, &bound, &s, &hyper, 1.0, 0.0).unwrap();
        let rec_only = tape.value(rec_only).data()[0];

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let both = sample_loss_on_tape(&mut tape, &bound, &s, &hyper, 1.0, 1.0).unwrap();
        let both = tape.value(both).data()[0];
        assert!(both > rec_only, "position terms add loss");

        // A stripped model can still train the symbol stream.
        let mut stripped = params.clone();
        stripped.strip_position_branch();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &stripped);
        let loss = sample_loss_on_tape(&mut tape, &bound, &s, &hyper, 1.0, 0.0).unwrap();
        assert!((tape.value(loss).data()[0] - rec_only).abs() < 1e-12);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &stripped);
        assert!(matches!(
            sample_loss_on_tape(&mut tape, &bound, &s, &hyper, 1.0, 1.0),
            Err(ModelError::MissingPositionBranch)
        ));
    }

    #[test]
    fn adam_moves_parameters_deterministically() {
        let (vocab, hyper) = toy_setup();
        let seq = tokenize("x ^ { 2 }", &vocab).unwrap();
        let grid = glyph_grid(&seq, &hyper, 3, 3);
        let samples = vec![(grid, seq)];
        let config = TrainConfig {
            epochs: 2,
            eval_loss_threshold: f64::INFINITY,
            ..TrainConfig::toy(42, 2)
        };
        let a = train_toy(&hyper, &config, &samples, &vocab).unwrap();
        let b = train_toy(&hyper, &config, &samples, &vocab).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
        }
        for ((na, ta), (nb, tb)) in a.params.entries().iter().zip(b.params.entries().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        // Two epochs of updates actually changed the weights.
        let fresh = ModelParams::init(&hyper, 42).unwrap();
        let moved = a
            .params
            .entries()
            .iter()
            .zip(fresh.entries().iter())
            .any(|((_, ta), (_, tf))| ta.data() != tf.data());
        assert!(moved);
    }

    #[test]
    fn single_sample_overfits_quickly() {
        let (vocab, hyper) = toy_setup();
        let seq = tokenize("x ^ { 2 }", &vocab).unwrap();
        let grid = glyph_grid(&seq, &hyper, 3, 3);
        let samples = vec![(grid, seq)];
        let mut config = TrainConfig::toy(42, 300);
        config.eval_interval = 10;
        let outcome = train_toy(&hyper, &config, &samples, &vocab).unwrap();
        assert_eq!(outcome.final_exprate, 1.0, "history: {:?}", outcome.history);
        assert!(outcome.epochs_to_full_exprate.is_some());
    }
}
