//! Attention decoder forward passes and the public model operations.
//!
//! The decoder is a stack of post-norm transformer layers: causal
//! self-attention, cross-attention over the encoded feature grid, and a
//! GELU feed-forward block. Cross-attention on configured layers applies a
//! *refinement correction*: the softmax-normalized energies of earlier
//! decode steps, restricted to steps that emitted entity symbols, are
//! accumulated into a refinement map, passed through a small affine
//! coverage filter, and subtracted from the raw energies before the
//! attention softmax. Repeated looks at already-covered grid regions are
//! thereby discouraged without touching structure steps, which own no ink.
//!
//! Everything runs on the autodiff tape; the public operations wrap tape
//! graphs and return plain tensors.

use std::collections::HashMap;

use crate::forest::{ForestTargets, IdCell, IdentifierMatrix};
use crate::lexer::{SymbolClass, TokenSeq, Vocabulary};
use crate::model::params::{CoverageFilterParams, Hyper, ModelParams};
use crate::model::tape::{
    coverage_filter_values, masked_prefix_sum_values, softmax_rows_values, Tape, Var,
};
use crate::model::tensor::Tensor;
use crate::model::ModelError;

/// Additive mask value for blocked attention positions; large enough that
/// the softmax underflows to exactly zero.
const MASK_OFF: f64 = -1e30;

/// A dense image-feature map: `height · width` cells of `channels`
/// features, stored row-major as a `[height · width, channels]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Tensor) -> FeatureGrid {
        assert_eq!(
            values.shape(),
            [height * width, channels],
            "grid values must be [cells, channels]"
        );
        FeatureGrid {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> FeatureGrid {
        FeatureGrid {
            height,
            width,
            channels,
            values: Tensor::zeros(vec![height * width, channels]),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize, channel: usize) -> f64 {
        self.values.at2(y * self.width + x, channel)
    }

    pub fn set(&mut self, y: usize, x: usize, channel: usize, value: f64) {
        let w = self.width;
        let c = self.channels;
        self.values.data_mut()[(y * w + x) * c + channel] = value;
    }
}

/// Cross-attention maps of one decoder layer, each shaped
/// `[steps, grid_height, grid_width]`.
///
/// `raw` are the head-pooled pre-softmax energies, `normalized` their row
/// softmax, `refinement` the entity-gated accumulation of earlier rows,
/// and `corrected` the energies after subtracting the filtered refinement
/// (equal to `raw` on layers without the correction).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub raw: Tensor,
    pub normalized: Tensor,
    pub refinement: Tensor,
    pub corrected: Tensor,
}

/// 1.0 for entity steps, 0.0 for structure steps.
pub(crate) fn entity_mask(classes: &[SymbolClass]) -> Vec<f64> {
    classes
        .iter()
        .map(|c| match c {
            SymbolClass::Entity => 1.0,
            SymbolClass::Structure => 0.0,
        })
        .collect()
}

/// Sinusoidal position rows: `out[t, 2i] = sin(t·ω_i)`,
/// `out[t, 2i+1] = cos(t·ω_i)` with `ω_i = 10000^(−2i/dim)`.
pub fn sequence_positions(count: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; count * dim];
    for t in 0..count {
        for i in 0..dim.div_ceil(2) {
            let omega = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
            let angle = t as f64 * omega;
            data[t * dim + 2 * i] = angle.sin();
            if 2 * i + 1 < dim {
                data[t * dim + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![count, dim], data)
}

/// 2D sinusoidal encoding for grid cells: the first half of each row
/// encodes the cell's row index, the second half its column index.
pub fn grid_positions(height: usize, width: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "grid positions need an even dimension");
    let half = dim / 2;
    let rows_enc = sequence_positions(height, half);
    let cols_enc = sequence_positions(width, half);
    let mut data = Vec::with_capacity(height * width * dim);
    for y in 0..height {
        for x in 0..width {
            data.extend_from_slice(rows_enc.row(y));
            data.extend_from_slice(cols_enc.row(x));
        }
    }
    Tensor::new(vec![height * width, dim], data)
}

/// Model parameters mirrored onto a tape as leaf variables, addressable by
/// their canonical names.
pub(crate) struct BoundParams {
    vars: Vec<(String, Var)>,
    map: HashMap<String, Var>,
}

impl BoundParams {
    pub(crate) fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub(crate) fn bind_params(tape: &mut Tape, params: &ModelParams) -> BoundParams {
    let mut vars = Vec::new();
    let mut map = HashMap::new();
    for (name, tensor) in params.entries() {
        let var = tape.leaf(tensor.clone());
        map.insert(name.clone(), var);
        vars.push((name, var));
    }
    BoundParams { vars, map }
}

/// `x · Wᵀ + b` for the linear named `prefix`.
pub(crate) fn linear(tape: &mut Tape, x: Var, bound: &BoundParams, prefix: &str) -> Var {
    let w = bound.var(&format!("{prefix}.weight"));
    let b = bound.var(&format!("{prefix}.bias"));
    let y = tape.matmul_trans_b(x, w);
    tape.add_row(y, b)
}

/// The feature grid projected to model width, with per-layer key/value
/// projections ready for cross-attention.
pub(crate) struct EncodedGrid {
    pub height: usize,
    pub width: usize,
    /// One `(keys, values)` pair per decoder layer, each `[cells, dim]`.
    pub kv: Vec<(Var, Var)>,
}

pub(crate) fn encode_grid(
    tape: &mut Tape,
    grid: &FeatureGrid,
    bound: &BoundParams,
    hyper: &Hyper,
) -> Result<EncodedGrid, ModelError> {
    if grid.channels() != hyper.input_channels {
        return Err(ModelError::ShapeMismatch {
            context: "grid channels",
            expected: hyper.input_channels.to_string(),
            found: grid.channels().to_string(),
        });
    }
    let cells = tape.leaf(grid.values().clone());
    let mut x = linear(tape, cells, bound, "visual_proj");
    if hyper.image_pos_enc {
        let pe = tape.leaf(grid_positions(grid.height(), grid.width(), hyper.model_dim));
        x = tape.add(x, pe);
    }
    let kv = (0..hyper.layers)
        .map(|i| {
            let k = linear(tape, x, bound, &format!("layers.{i}.cross_attn.key"));
            let v = linear(tape, x, bound, &format!("layers.{i}.cross_attn.value"));
            (k, v)
        })
        .collect();
    Ok(EncodedGrid {
        height: grid.height(),
        width: grid.width(),
        kv,
    })
}

fn causal_mask(steps: usize) -> Tensor {
    let mut data = vec![0.0; steps * steps];
    for i in 0..steps {
        for j in (i + 1)..steps {
            data[i * steps + j] = MASK_OFF;
        }
    }
    Tensor::new(vec![steps, steps], data)
}

pub(crate) struct StateVars {
    pub raw: Var,
    pub normalized: Var,
    pub refinement: Var,
    pub corrected: Var,
}

/// Mean of `parts` as a tape expression.
fn head_pool(tape: &mut Tape, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    tape.scale(acc, 1.0 / parts.len() as f64)
}

/// Runs one decoder stream over already-embedded inputs.
///
/// `mask` holds the entity indicator of the symbol emitted at each step
/// (teacher-forced targets in training, the decoded prefix at inference);
/// entry `t` only influences steps after `t`. Attention states are
/// collected per layer when `want_states` is set.
pub(crate) fn stream_forward(
    tape: &mut Tape,
    enc: &EncodedGrid,
    input: Var,
    mask: &[f64],
    bound: &BoundParams,
    hyper: &Hyper,
    want_states: bool,
) -> (Var, Vec<Option<StateVars>>) {
    let steps = tape.value(input).rows();
    debug_assert_eq!(steps, mask.len());
    let head_dim = hyper.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mask_var = tape.leaf(causal_mask(steps));

    let mut x = input;
    let mut states = Vec::with_capacity(hyper.layers);
    for i in 0..hyper.layers {
        // Causal self-attention.
        let q = linear(tape, x, bound, &format!("layers.{i}.self_attn.query"));
        let k = linear(tape, x, bound, &format!("layers.{i}.self_attn.key"));
        let v = linear(tape, x, bound, &format!("layers.{i}.self_attn.value"));
        let mut head_outs = Vec::with_capacity(hyper.heads);
        for h in 0..hyper.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_trans_b(qh, kh);
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask_var);
            let alpha = tape.softmax_rows(masked);
            head_outs.push(tape.matmul(alpha, vh));
        }
        let cat = tape.concat_cols(&head_outs);
        let proj = linear(tape, cat, bound, &format!("layers.{i}.self_attn.output"));
        let sum = tape.add(x, proj);
        x = tape.layer_norm(
            sum,
            bound.var(&format!("layers.{i}.norm_self.gain")),
            bound.var(&format!("layers.{i}.norm_self.shift")),
        );

        // Cross-attention over the grid, with refinement correction on
        // configured layers.
        let (keys, values) = enc.kv[i];
        let q = linear(tape, x, bound, &format!("layers.{i}.cross_attn.query"));
        let mut energies = Vec::with_capacity(hyper.heads);
        for h in 0..hyper.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(keys, h * head_dim, head_dim);
            let e = tape.matmul_trans_b(qh, kh);
            energies.push(tape.scale(e, scale));
        }
        let pooled = head_pool(tape, &energies);

        let correcting = hyper.layer_has_coverage(i);
        let coverage = |tape: &mut Tape, refinement: Var| -> Var {
            tape.coverage_filter(
                refinement,
                bound.var(&format!("layers.{i}.coverage.kernel")),
                bound.var(&format!("layers.{i}.coverage.conv_bias")),
                bound.var(&format!("layers.{i}.coverage.mix")),
                bound.var(&format!("layers.{i}.coverage.mix_bias")),
                enc.height,
                enc.width,
            )
        };

        let mut head_outs = Vec::with_capacity(hyper.heads);
        let state = if !correcting {
            for (h, &e) in energies.iter().enumerate() {
                let alpha = tape.softmax_rows(e);
                let vh = tape.slice_cols(values, h * head_dim, head_dim);
                head_outs.push(tape.matmul(alpha, vh));
            }
            want_states.then(|| {
                let normalized = tape.softmax_rows(pooled);
                let zeros = tape.leaf(Tensor::zeros(vec![steps, enc.height * enc.width]));
                StateVars {
                    raw: pooled,
                    normalized,
                    refinement: zeros,
                    corrected: pooled,
                }
            })
        } else if hyper.per_head_iac {
            let mut refinements = Vec::with_capacity(hyper.heads);
            let mut corrected_all = Vec::with_capacity(hyper.heads);
            for (h, &e) in energies.iter().enumerate() {
                let normalized = tape.softmax_rows(e);
                let refinement = tape.masked_prefix_sum(normalized, mask);
                let correction = coverage(tape, refinement);
                let corrected = tape.sub(e, correction);
                let alpha = tape.softmax_rows(corrected);
                let vh = tape.slice_cols(values, h * head_dim, head_dim);
                head_outs.push(tape.matmul(alpha, vh));
                refinements.push(refinement);
                corrected_all.push(corrected);
            }
            want_states.then(|| StateVars {
                raw: pooled,
                normalized: tape.softmax_rows(pooled),
                refinement: head_pool(tape, &refinements),
                corrected: head_pool(tape, &corrected_all),
            })
        } else {
            let normalized = tape.softmax_rows(pooled);
            let refinement = tape.masked_prefix_sum(normalized, mask);
            let correction = coverage(tape, refinement);
            for (h, &e) in energies.iter().enumerate() {
                let corrected = tape.sub(e, correction);
                let alpha = tape.softmax_rows(corrected);
                let vh = tape.slice_cols(values, h * head_dim, head_dim);
                head_outs.push(tape.matmul(alpha, vh));
            }
            want_states.then(|| StateVars {
                raw: pooled,
                normalized,
                refinement,
                corrected: tape.sub(pooled, correction),
            })
        };
        states.push(state);

        let cat = tape.concat_cols(&head_outs);
        let proj = linear(tape, cat, bound, &format!("layers.{i}.cross_attn.output"));
        let sum = tape.add(x, proj);
        x = tape.layer_norm(
            sum,
            bound.var(&format!("layers.{i}.norm_cross.gain")),
            bound.var(&format!("layers.{i}.norm_cross.shift")),
        );

        // Feed-forward.
        let expanded = linear(tape, x, bound, &format!("layers.{i}.ffn.expand"));
        let activated = tape.gelu(expanded);
        let contracted = linear(tape, activated, bound, &format!("layers.{i}.ffn.contract"));
        let sum = tape.add(x, contracted);
        x = tape.layer_norm(
            sum,
            bound.var(&format!("layers.{i}.norm_ffn.gain")),
            bound.var(&format!("layers.{i}.norm_ffn.shift")),
        );
    }
    (x, states)
}

/// Symbol ids embedded and summed with the sinusoidal step encoding.
pub(crate) fn symbol_input_on(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &[usize],
    dim: usize,
) -> Var {
    let table = bound.var("symbol_embed");
    let rows = tape.gather_rows(table, ids);
    let pe = tape.leaf(sequence_positions(ids.len(), dim));
    tape.add(rows, pe)
}

/// Identifier-matrix rows embedded (cell table, row projection, GELU,
/// layer norm) and summed with the sinusoidal step encoding.
pub(crate) fn identifier_input_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cell_indices: &[usize],
    steps: usize,
    hyper: &Hyper,
) -> Var {
    debug_assert_eq!(cell_indices.len(), steps * hyper.id_row_len());
    let table = bound.var("position.embed.table");
    let rows = tape.gather_rows(table, cell_indices);
    let flat = tape.reshape(rows, vec![steps, hyper.id_row_len() * hyper.model_dim]);
    let proj = linear(tape, flat, bound, "position.embed.proj");
    let act = tape.gelu(proj);
    let normed = tape.layer_norm(
        act,
        bound.var("position.embed.norm.gain"),
        bound.var("position.embed.norm.shift"),
    );
    let pe = tape.leaf(sequence_positions(steps, hyper.model_dim));
    tape.add(normed, pe)
}

fn expect_matrix(t: &Tensor, context: &'static str, cols: usize) -> Result<usize, ModelError> {
    if t.shape().len() != 2 || t.shape()[1] != cols {
        return Err(ModelError::ShapeMismatch {
            context,
            expected: format!("[rows, {cols}]"),
            found: format!("{:?}", t.shape()),
        });
    }
    Ok(t.shape()[0])
}

/// Embeds identifier-matrix rows into step features: per-cell embeddings,
/// a projection of the flattened row through GELU and layer norm, plus the
/// sinusoidal step encoding.
pub fn embed_identifiers(matrix: &IdentifierMatrix, params: &ModelParams) -> Result<Tensor, ModelError> {
    if params.position.is_none() {
        return Err(ModelError::MissingPositionBranch);
    }
    if matrix.width() != params.hyper.id_row_len() {
        return Err(ModelError::ShapeMismatch {
            context: "identifier matrix width",
            expected: params.hyper.id_row_len().to_string(),
            found: matrix.width().to_string(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let indices: Vec<usize> = matrix.cells().iter().map(|c| c.index()).collect();
    let out = identifier_input_on(&mut tape, &bound, &indices, matrix.rows(), &params.hyper);
    Ok(tape.value(out).clone())
}

/// Row softmax over the spatial dimensions of `[steps, …]` energies.
pub fn softmax_spatial(energies: &Tensor) -> Tensor {
    softmax_rows_values(energies)
}

/// Accumulates normalized energies of earlier entity steps:
/// `out[t] = Σ_{i<t} normalized[i] · [class[i] == Entity]`.
pub fn accumulate_refinement(
    normalized: &Tensor,
    prefix_classes: &[SymbolClass],
) -> Result<Tensor, ModelError> {
    if normalized.shape().is_empty() || normalized.shape()[0] != prefix_classes.len() {
        return Err(ModelError::ShapeMismatch {
            context: "refinement steps",
            expected: prefix_classes.len().to_string(),
            found: format!("{:?}", normalized.shape()),
        });
    }
    Ok(masked_prefix_sum_values(normalized, &entity_mask(prefix_classes)))
}

/// Subtracts the filtered refinement map from the raw energies:
/// `corrected = raw − filter(refinement)`.
///
/// Both tensors must be `[steps, height, width]`. A zero filter returns
/// `raw` unchanged, bit for bit.
pub fn iac_correct(
    raw: &Tensor,
    refinement: &Tensor,
    filter: &CoverageFilterParams,
) -> Result<Tensor, ModelError> {
    if raw.shape() != refinement.shape() || raw.shape().len() != 3 {
        return Err(ModelError::ShapeMismatch {
            context: "correction inputs",
            expected: format!("{:?}", raw.shape()),
            found: format!("{:?}", refinement.shape()),
        });
    }
    let (steps, height, width) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let flat = refinement.clone().reshaped(vec![steps, height * width]);
    let correction = coverage_filter_values(
        &flat,
        &filter.kernel,
        &filter.conv_bias,
        &filter.mix,
        &filter.mix_bias,
        height,
        width,
    );
    let data = raw
        .data()
        .iter()
        .zip(correction.data())
        .map(|(r, c)| r - c)
        .collect();
    Ok(Tensor::new(raw.shape().to_vec(), data))
}

/// Full decoder pass over teacher-forced step embeddings.
///
/// Returns the final step features `[steps, dim]` and the per-layer
/// cross-attention states. `prefix_classes[t]` is the class of the symbol
/// emitted at step `t`; it only influences later steps.
pub fn decoder_forward(
    grid: &FeatureGrid,
    target_embeds: &Tensor,
    prefix_classes: &[SymbolClass],
    params: &ModelParams,
) -> Result<(Tensor, Vec<AttentionState>), ModelError> {
    let steps = expect_matrix(target_embeds, "target embeddings", params.hyper.model_dim)?;
    if steps == 0 {
        return Err(ModelError::ShapeMismatch {
            context: "target embeddings",
            expected: "at least one step".into(),
            found: "0 steps".into(),
        });
    }
    if prefix_classes.len() != steps {
        return Err(ModelError::ShapeMismatch {
            context: "prefix classes",
            expected: steps.to_string(),
            found: prefix_classes.len().to_string(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let enc = encode_grid(&mut tape, grid, &bound, &params.hyper)?;
    let input = tape.leaf(target_embeds.clone());
    let (features, state_vars) = stream_forward(
        &mut tape,
        &enc,
        input,
        &entity_mask(prefix_classes),
        &bound,
        &params.hyper,
        true,
    );
    let shape3 = vec![steps, grid.height(), grid.width()];
    let states = state_vars
        .into_iter()
        .map(|s| {
            let s = s.expect("states were requested");
            AttentionState {
                raw: tape.value(s.raw).clone().reshaped(shape3.clone()),
                normalized: tape.value(s.normalized).clone().reshaped(shape3.clone()),
                refinement: tape.value(s.refinement).clone().reshaped(shape3.clone()),
                corrected: tape.value(s.corrected).clone().reshaped(shape3.clone()),
            }
        })
        .collect();
    Ok((tape.value(features).clone(), states))
}

/// Applies the symbol, nesting, and branch heads to step features,
/// returning three row-stochastic matrices.
pub fn predict_heads(
    features: &Tensor,
    params: &ModelParams,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    expect_matrix(features, "step features", params.hyper.model_dim)?;
    if params.position.is_none() {
        return Err(ModelError::MissingPositionBranch);
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let input = tape.leaf(features.clone());
    let mut head = |prefix: &str| {
        let logits = linear(&mut tape, input, &bound, prefix);
        let probs = tape.softmax_rows(logits);
        tape.value(probs).clone()
    };
    Ok((
        head("symbol_head"),
        head("position.nested_head"),
        head("position.relative_head"),
    ))
}

/// Combined loss: `rec_weight · L_rec + pos_weight · L_pos` where
/// `L_rec` is the mean symbol cross-entropy and `L_pos` the mean of the
/// summed nesting and branch cross-entropies.
pub fn loss_all(
    symbol_probs: &Tensor,
    nested_probs: &Tensor,
    relative_probs: &Tensor,
    targets: &ForestTargets,
    rec_weight: f64,
    pos_weight: f64,
) -> Result<f64, ModelError> {
    let steps = targets.len();
    if steps == 0 {
        return Err(ModelError::ShapeMismatch {
            context: "loss targets",
            expected: "at least one step".into(),
            found: "0 steps".into(),
        });
    }
    for (t, context) in [
        (symbol_probs, "symbol probabilities"),
        (nested_probs, "nesting probabilities"),
        (relative_probs, "branch probabilities"),
    ] {
        if t.shape().len() != 2 || t.shape()[0] != steps {
            return Err(ModelError::ShapeMismatch {
                context,
                expected: format!("[{steps}, classes]"),
                found: format!("{:?}", t.shape()),
            });
        }
    }
    let pick = |probs: &Tensor, index: usize, t: usize, context: &'static str| {
        if index >= probs.shape()[1] {
            return Err(ModelError::IndexOutOfRange {
                context,
                index,
                size: probs.shape()[1],
            });
        }
        Ok(probs.at2(t, index))
    };
    let mut rec = 0.0;
    let mut pos = 0.0;
    for t in 0..steps {
        rec -= pick(symbol_probs, targets.symbol_ids[t], t, "symbol id")?.ln();
        let nested = pick(nested_probs, targets.nested_levels[t], t, "nesting level")?;
        let branch = pick(
            relative_probs,
            IdCell::Branch(targets.relative_positions[t]).index(),
            t,
            "branch index",
        )?;
        pos -= nested.ln() + branch.ln();
    }
    let total = rec_weight * rec / steps as f64 + pos_weight * pos / steps as f64;
    if !total.is_finite() {
        return Err(ModelError::NonFinite { context: "loss" });
    }
    Ok(total)
}

/// Greedy autoregressive decode of a feature grid.
///
/// Starts from the start marker, repeatedly feeds the prefix through the
/// decoder, and appends the argmax symbol (lowest id wins ties) until the
/// end marker is produced or the prefix reaches `max_len` tokens. Only the
/// symbol stream runs; position parameters never influence the output.
pub fn greedy_decode(
    grid: &FeatureGrid,
    params: &ModelParams,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<TokenSeq, ModelError> {
    if vocab.len() != params.hyper.vocab_size {
        return Err(ModelError::ShapeMismatch {
            context: "vocabulary size",
            expected: params.hyper.vocab_size.to_string(),
            found: vocab.len().to_string(),
        });
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let enc = encode_grid(&mut tape, grid, &bound, &params.hyper)?;

    let mut prefix_ids = vec![vocab.start_id()];
    let mut mask: Vec<f64> = vec![0.0];
    let mut tokens = Vec::new();
    while prefix_ids.len() < max_len {
        let steps = prefix_ids.len();
        // The final mask slot belongs to the step being decoded now; it is
        // never read because refinement only sums strictly earlier steps.
        let input = symbol_input_on(&mut tape, &bound, &prefix_ids, params.hyper.model_dim);
        let (features, _) = stream_forward(
            &mut tape,
            &enc,
            input,
            &mask,
            &bound,
            &params.hyper,
            false,
        );
        let logits = linear(&mut tape, features, &bound, "symbol_head");
        let last = tape.value(logits).row(steps - 1);
        let mut best = 0usize;
        for (id, &score) in last.iter().enumerate() {
            if score > last[best] {
                best = id;
            }
        }
        if best == vocab.end_id() {
            break;
        }
        let token = vocab.token_by_id(best).ok_or(ModelError::IndexOutOfRange {
            context: "decoded symbol id",
            index: best,
            size: vocab.len(),
        })?;
        mask[steps - 1] = match token.class {
            SymbolClass::Entity => 1.0,
            SymbolClass::Structure => 0.0,
        };
        mask.push(0.0);
        prefix_ids.push(best);
        tokens.push(token);
    }
    Ok(TokenSeq::new(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn small_hyper() -> Hyper {
        Hyper::toy(16, 4, 24, 6)
    }

    fn random_grid(hyper: &Hyper, h: usize, w: usize, seed: u64) -> FeatureGrid {
        let mut rng = SplitMix64::new(seed);
        FeatureGrid::new(
            h,
            w,
            hyper.input_channels,
            Tensor::uniform(vec![h * w, hyper.input_channels], 0.8, &mut rng),
        )
    }

    #[test]
    fn sequence_positions_are_bounded_and_distinct() {
        let pe = sequence_positions(10, 16);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for t in 1..10 {
            assert_ne!(pe.row(t), pe.row(0));
        }
    }

    #[test]
    fn decoder_forward_shapes_and_state_rows() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 42).unwrap();
        let grid = random_grid(&hyper, 3, 4, 1);
        let steps = 5;
        let mut rng = SplitMix64::new(2);
        let embeds = Tensor::uniform(vec![steps, hyper.model_dim], 0.8, &mut rng);
        let classes = vec![SymbolClass::Entity; steps];
        let (features, states) = decoder_forward(&grid, &embeds, &classes, &params).unwrap();
        assert_eq!(features.shape(), [steps, hyper.model_dim]);
        assert_eq!(states.len(), hyper.layers);
        for state in &states {
            assert_eq!(state.raw.shape(), [steps, 3, 4]);
            // Normalized rows are distributions.
            for t in 0..steps {
                let sum: f64 = state.normalized.data()[t * 12..(t + 1) * 12].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        // Zero-initialized filters leave energies untouched.
        for state in &states {
            assert_eq!(state.raw.data(), state.corrected.data());
        }
    }

    #[test]
    fn refinement_skips_structure_steps() {
        let hyper = small_hyper();
        let params = ModelParams::init(&hyper, 42).unwrap();
        let grid = random_grid(&hyper, 3, 4, 1);
        let steps = 4;
        let mut rng = SplitMix64::new(3);
        let embeds = Tensor::uniform(vec![steps, hyper.model_dim], 0.8, &mut rng);
        let all_structure = vec![SymbolClass::Structure; steps];
        let (_, states) = decoder_forward(&grid, &embeds, &all_structure, &params).unwrap();
        for state in states {
            assert!(state.refinement.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn accumulate_refinement_matches_manual_sum() {
        let normalized = Tensor::new(
            vec![3, 2, 2],
            vec![
                0.1, 0.2, 0.3, 0.4, // step 0
                0.25, 0.25, 0.25, 0.25, // step 1
                0.4, 0.3, 0.2, 0.1, // step 2
            ],
        );
        let classes = [
            SymbolClass::Entity,
            SymbolClass::Structure,
            SymbolClass::Entity,
        ];
        let acc = accumulate_refinement(&normalized, &classes).unwrap();
        // Step 0: nothing before it. Step 1: step 0. Step 2: step 0 only
        // (step 1 is structure).
        assert_eq!(acc.row(0), [0.0, 0.0, 0.0, 0.0]);
        assert_eq!(acc.row(1), [0.1, 0.2, 0.3, 0.4]);
        assert_eq!(acc.row(2), [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn iac_correct_with_zero_filter_is_identity() {
        let mut rng = SplitMix64::new(4);
        let raw = Tensor::uniform(vec![3, 4, 5], 2.0, &mut rng);
        let refinement = Tensor::uniform(vec![3, 4, 5], 1.0, &mut rng);
        let filter = CoverageFilterParams::zeros(8, 5);
        let corrected = iac_correct(&raw, &refinement, &filter).unwrap();
        assert_eq!(corrected, raw);
    }

    #[test]
    fn embed_identifiers_requires_position_branch() {
        let hyper = small_hyper();
        let mut params = ModelParams::init(&hyper, 42).unwrap();
        let ids = vec![crate::forest::PositionIdentifier::root()];
        let matrix = crate::forest::build_identifier_matrix(&ids, hyper.max_nesting).unwrap();
        assert!(embed_identifiers(&matrix, &params).is_ok());
        params.strip_position_branch();
        assert!(matches!(
            embed_identifiers(&matrix, &params),
            Err(ModelError::MissingPositionBranch)
        ));
    }

    #[test]
    fn loss_all_matches_hand_computation() {
        let symbol = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 0.1, 0.8, 0.1]);
        let nested = Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.3, 0.7]);
        let relative = Tensor::new(
            vec![2, 6],
            vec![
                0.05, 0.05, 0.05, 0.5, 0.25, 0.1, //
                0.05, 0.05, 0.05, 0.1, 0.25, 0.5,
            ],
        );
        let targets = ForestTargets {
            symbol_ids: vec![0, 1],
            nested_levels: vec![0, 1],
            relative_positions: vec![crate::forest::PosChar::M, crate::forest::PosChar::R],
        };
        let rec = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        let pos = -((0.6f64.ln() + 0.5f64.ln()) + (0.7f64.ln() + 0.5f64.ln())) / 2.0;
        let got = loss_all(&symbol, &nested, &relative, &targets, 1.0, 1.0).unwrap();
        assert!((got - (rec + pos)).abs() < 1e-12);
        let rec_only = loss_all(&symbol, &nested, &relative, &targets, 1.0, 0.0).unwrap();
        assert!((rec_only - rec).abs() < 1e-12);
        let weighted = loss_all(&symbol, &nested, &relative, &targets, 2.0, 0.5).unwrap();
        assert!((weighted - (2.0 * rec + 0.5 * pos)).abs() < 1e-12);
    }

    #[test]
    fn loss_all_rejects_bad_targets() {
        let symbol = Tensor::new(vec![1, 2], vec![0.5, 0.5]);
        let nested = Tensor::new(vec![1, 2], vec![0.5, 0.5]);
        let relative = Tensor::new(vec![1, 6], vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1]);
        let targets = ForestTargets {
            symbol_ids: vec![5],
            nested_levels: vec![0],
            relative_positions: vec![crate::forest::PosChar::M],
        };
        assert!(matches!(
            loss_all(&symbol, &nested, &relative, &targets, 1.0, 1.0),
            Err(ModelError::IndexOutOfRange { context: "symbol id", .. })
        ));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_bounded() {
        let vocab = Vocabulary::builtin();
        let hyper = Hyper::toy(16, 4, vocab.len(), 6);
        let params = ModelParams::init(&hyper, 7).unwrap();
        let grid = FeatureGrid::new(
            3,
            4,
            hyper.input_channels,
            Tensor::uniform(vec![12, 6], 0.8, &mut SplitMix64::new(5)),
        );
        let a = greedy_decode(&grid, &params, 6, &vocab).unwrap();
        let b = greedy_decode(&grid, &params, 6, &vocab).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5); // prefix capped at 6 including the start marker
        let empty = greedy_decode(&grid, &params, 1, &vocab).unwrap();
        assert_eq!(empty.len(), 0);
    }

    #[test]
    fn greedy_decode_ignores_position_branch() {
        let vocab = Vocabulary::builtin();
        let hyper = Hyper::toy(16, 4, vocab.len(), 6);
        let mut params = ModelParams::init(&hyper, 7).unwrap();
        let grid = FeatureGrid::new(
            3,
            4,
            hyper.input_channels,
            Tensor::uniform(vec![12, 6], 0.8, &mut SplitMix64::new(5)),
        );
        let full = greedy_decode(&grid, &params, 8, &vocab).unwrap();
        params.strip_position_branch();
        let stripped = greedy_decode(&grid, &params, 8, &vocab).unwrap();
        assert_eq!(full, stripped);
    }
}
