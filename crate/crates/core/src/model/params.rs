//! Model hyperparameters, parameter containers, and checkpoint IO.
//!
//! Every tensor has a canonical dotted name (`layers.0.self_attn.query.weight`,
//! `position.nested_head.bias`, …). Checkpoints store tensors under those
//! names in the [`crate::container`] format plus a JSON sidecar with the
//! hyperparameters, seed, vocabulary hashes, and training grid size. The
//! position branch (`position.*`) may be absent from a checkpoint; loading
//! then yields a model that can still decode symbols.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_records, write_records, Record};
use crate::model::tensor::Tensor;
use crate::model::ModelError;
use crate::rng::SplitMix64;

/// Architecture constants; serialized into checkpoint sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Feature width of every decoder stream.
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Cap on identifier nesting; identifiers hold at most `max_nesting + 1`
    /// characters.
    pub max_nesting: usize,
    /// Channels of the input feature grid (one glyph plane per vocabulary
    /// entry when rendered by this crate).
    pub input_channels: usize,
    pub vocab_size: usize,
    /// Hidden channels of the attention coverage filter.
    pub coverage_channels: usize,
    /// Side length of the coverage filter kernel (odd).
    pub coverage_kernel: usize,
    /// One-based decoder layers whose cross attention applies the coverage
    /// correction.
    pub iac_layers: Vec<usize>,
    /// Correct each head's energies from its own refinement map instead of
    /// the head-pooled one.
    pub per_head_iac: bool,
    /// Add a fixed 2D sinusoidal encoding to the projected grid cells.
    pub image_pos_enc: bool,
}

impl Hyper {
    /// Toy configuration used by the training and decoding examples.
    pub fn toy(model_dim: usize, heads: usize, vocab_size: usize, input_channels: usize) -> Hyper {
        Hyper {
            model_dim,
            heads,
            ffn_dim: 4 * model_dim,
            layers: 3,
            max_nesting: 3,
            input_channels,
            vocab_size,
            coverage_channels: 8,
            coverage_kernel: 5,
            iac_layers: vec![2, 3],
            per_head_iac: false,
            image_pos_enc: true,
        }
    }

    /// Width of an identifier-matrix row: the longest identifier
    /// (`max_nesting + 1` characters) plus start and end markers.
    pub fn id_row_len(&self) -> usize {
        self.max_nesting + 3
    }

    /// Output classes of the nesting head: levels `0 ..= max_nesting`.
    pub fn nested_classes(&self) -> usize {
        self.max_nesting + 1
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadHyper(msg));
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 {
            return fail("model_dim, heads, and layers must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.model_dim % 2 != 0 {
            return fail(format!("model_dim {} must be even", self.model_dim));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.input_channels == 0 {
            return fail("ffn_dim, vocab_size, and input_channels must be positive".into());
        }
        if self.coverage_kernel % 2 == 0 || self.coverage_kernel == 0 {
            return fail(format!(
                "coverage_kernel {} must be odd",
                self.coverage_kernel
            ));
        }
        if self.coverage_channels == 0 {
            return fail("coverage_channels must be positive".into());
        }
        for &k in &self.iac_layers {
            if k == 0 || k > self.layers {
                return fail(format!(
                    "iac layer {k} outside 1..={}",
                    self.layers
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn layer_has_coverage(&self, layer_index: usize) -> bool {
        self.iac_layers.contains(&(layer_index + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`; applied as `x · Wᵀ + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut SplitMix64) -> Linear {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![out_dim, in_dim], bound, rng),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Tensor::new(vec![dim], vec![1.0; dim]),
            shift: Tensor::zeros(vec![dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    fn init(dim: usize, rng: &mut SplitMix64) -> AttentionParams {
        AttentionParams {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
        }
    }
}

/// The affine coverage filter: conv kernel and bias, channel mix and bias.
///
/// Initialized to zero so a fresh model starts with an exactly neutral
/// correction. The zero point is also a stationary point of the loss (the
/// kernel, mix, and bias gradients gate each other there, and a uniform
/// per-row shift cancels in the softmax), so gradient checking uses
/// [`ModelParams::randomize_coverage`] to exercise a live filter.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageFilterParams {
    /// `[channels, k, k]`.
    pub kernel: Tensor,
    pub conv_bias: Tensor,
    pub mix: Tensor,
    pub mix_bias: Tensor,
}

impl CoverageFilterParams {
    pub fn zeros(channels: usize, kernel: usize) -> CoverageFilterParams {
        CoverageFilterParams {
            kernel: Tensor::zeros(vec![channels, kernel, kernel]),
            conv_bias: Tensor::zeros(vec![channels]),
            mix: Tensor::zeros(vec![channels]),
            mix_bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn random(channels: usize, kernel: usize, bound: f64, rng: &mut SplitMix64) -> CoverageFilterParams {
        CoverageFilterParams {
            kernel: Tensor::uniform(vec![channels, kernel, kernel], bound, rng),
            conv_bias: Tensor::uniform(vec![channels], bound, rng),
            mix: Tensor::uniform(vec![channels], bound, rng),
            mix_bias: Tensor::uniform(vec![1], bound, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub expand: Linear,
    pub contract: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm_self: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm_cross: LayerNormParams,
    /// Present only on layers listed in [`Hyper::iac_layers`].
    pub coverage: Option<CoverageFilterParams>,
    pub ffn: FeedForwardParams,
    pub norm_ffn: LayerNormParams,
}

/// Identifier-row embedder: per-cell table, projection of the flattened
/// row, GELU, layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierEmbed {
    /// `[6, model_dim]`, one row per identifier-cell value.
    pub table: Tensor,
    /// `[model_dim, id_row_len · model_dim]`.
    pub proj: Linear,
    pub norm: LayerNormParams,
}

/// Parameters used only by position supervision: the identifier embedder
/// and the two position heads. Strippable from checkpoints without
/// affecting symbol decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionBranch {
    pub embed: IdentifierEmbed,
    /// `[max_nesting + 1, model_dim]` classifier over nesting levels.
    pub nested_head: Linear,
    /// `[6, model_dim]` classifier over identifier-cell values.
    pub relative_head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    /// Projects grid channels to the model width.
    pub visual_proj: Linear,
    /// `[vocab_size, model_dim]`.
    pub symbol_embed: Tensor,
    pub layers: Vec<DecoderLayerParams>,
    /// `[vocab_size, model_dim]` classifier over the vocabulary.
    pub symbol_head: Linear,
    pub position: Option<PositionBranch>,
}

impl ModelParams {
    /// Fresh parameters: uniform fan-in scaled linears, unit layer norms,
    /// zero coverage filters, and a position branch.
    pub fn init(hyper: &Hyper, seed: u64) -> Result<ModelParams, ModelError> {
        hyper.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x7061_7261_6d73); // "params"
        let dim = hyper.model_dim;
        let embed_bound = 0.5;
        let layers = (0..hyper.layers)
            .map(|i| DecoderLayerParams {
                self_attn: AttentionParams::init(dim, &mut rng),
                norm_self: LayerNormParams::init(dim),
                cross_attn: AttentionParams::init(dim, &mut rng),
                norm_cross: LayerNormParams::init(dim),
                coverage: hyper
                    .layer_has_coverage(i)
                    .then(|| CoverageFilterParams::zeros(hyper.coverage_channels, hyper.coverage_kernel)),
                ffn: FeedForwardParams {
                    expand: Linear::init(hyper.ffn_dim, dim, &mut rng),
                    contract: Linear::init(dim, hyper.ffn_dim, &mut rng),
                },
                norm_ffn: LayerNormParams::init(dim),
            })
            .collect();
        Ok(ModelParams {
            visual_proj: Linear::init(dim, hyper.input_channels, &mut rng),
            symbol_embed: Tensor::uniform(vec![hyper.vocab_size, dim], embed_bound, &mut rng),
            layers,
            symbol_head: Linear::init(hyper.vocab_size, dim, &mut rng),
            position: Some(PositionBranch {
                embed: IdentifierEmbed {
                    table: Tensor::uniform(vec![6, dim], embed_bound, &mut rng),
                    proj: Linear::init(dim, hyper.id_row_len() * dim, &mut rng),
                    norm: LayerNormParams::init(dim),
                },
                nested_head: Linear::init(hyper.nested_classes(), dim, &mut rng),
                relative_head: Linear::init(6, dim, &mut rng),
            }),
            hyper: hyper.clone(),
        })
    }

    /// Replaces zero coverage filters with random ones; useful when the
    /// filter path must carry signal, e.g. for gradient verification.
    pub fn randomize_coverage(&mut self, seed: u64) {
        let mut rng = SplitMix64::stream(seed, 0x636f_7665_72);
        for layer in &mut self.layers {
            if let Some(cov) = &mut layer.coverage {
                *cov = CoverageFilterParams::random(
                    self.hyper.coverage_channels,
                    self.hyper.coverage_kernel,
                    0.3,
                    &mut rng,
                );
            }
        }
    }

    /// Drops the identifier embedder and position heads.
    pub fn strip_position_branch(&mut self) {
        self.position = None;
    }

    /// Canonical `(name, tensor)` listing; the order defines checkpoint
    /// record order and optimizer slot order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_entries(self, &mut |name, t| out.push((name, t)));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        push_entries_mut(self, &mut |name, t| out.push((name, t)));
        out
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
        let records: Vec<Record> = self
            .entries()
            .into_iter()
            .map(|(name, t)| Record::new(name, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        write_records(path, &records)
            .map_err(|e| ModelError::Checkpoint(format!("cannot write {}: {e}", path.display())))?;
        let json = serde_json::to_string_pretty(meta)
            .map_err(|e| ModelError::Checkpoint(format!("cannot serialize sidecar: {e}")))?;
        std::fs::write(sidecar_path(path), json).map_err(|e| {
            ModelError::Checkpoint(format!("cannot write sidecar for {}: {e}", path.display()))
        })?;
        Ok(())
    }

    /// Loads a checkpoint and its sidecar. The `position.*` records may be
    /// entirely absent; any other mismatch against the sidecar's declared
    /// architecture is an error.
    pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta), ModelError> {
        let meta_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
            ModelError::Checkpoint(format!("cannot read sidecar for {}: {e}", path.display()))
        })?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)
            .map_err(|e| ModelError::Checkpoint(format!("bad sidecar: {e}")))?;
        let records = read_records(path)
            .map_err(|e| ModelError::Checkpoint(format!("cannot read checkpoint: {e}")))?;

        let mut params = ModelParams::init(&meta.hyper, 0)?;
        let mut loaded: std::collections::BTreeMap<String, Record> = std::collections::BTreeMap::new();
        for rec in records {
            if loaded.insert(rec.name.clone(), rec).is_some() {
                return Err(ModelError::Checkpoint("duplicate record name".into()));
            }
        }
        let has_position = loaded.keys().any(|k| k.starts_with("position."));
        if !has_position {
            params.position = None;
        }
        for (name, tensor) in params.entries_mut() {
            let rec = loaded.remove(&name).ok_or_else(|| {
                ModelError::Checkpoint(format!("checkpoint is missing record {name:?}"))
            })?;
            if rec.shape != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "record {name:?} has shape {:?}, expected {:?}",
                    rec.shape,
                    tensor.shape()
                )));
            }
            *tensor = Tensor::new(rec.shape, rec.data);
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint contains unknown record {extra:?}"
            )));
        }
        Ok((params, meta))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Checkpoint sidecar: everything needed to rebuild the runtime context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hyper: Hyper,
    pub seed: u64,
    pub vocab_hash: String,
    pub structure_hash: String,
    pub grid_height: usize,
    pub grid_width: usize,
}

// The two walkers below must stay in lockstep; a unit test asserts their
// name lists are identical.

fn push_entries<'a>(p: &'a ModelParams, visit: &mut dyn FnMut(String, &'a Tensor)) {
    visit("visual_proj.weight".into(), &p.visual_proj.weight);
    visit("visual_proj.bias".into(), &p.visual_proj.bias);
    visit("symbol_embed".into(), &p.symbol_embed);
    for (i, layer) in p.layers.iter().enumerate() {
        for (attn_name, attn) in [("self_attn", &layer.self_attn), ("cross_attn", &layer.cross_attn)] {
            for (lin_name, lin) in [
                ("query", &attn.query),
                ("key", &attn.key),
                ("value", &attn.value),
                ("output", &attn.output),
            ] {
                visit(format!("layers.{i}.{attn_name}.{lin_name}.weight"), &lin.weight);
                visit(format!("layers.{i}.{attn_name}.{lin_name}.bias"), &lin.bias);
            }
        }
        visit(format!("layers.{i}.norm_self.gain"), &layer.norm_self.gain);
        visit(format!("layers.{i}.norm_self.shift"), &layer.norm_self.shift);
        visit(format!("layers.{i}.norm_cross.gain"), &layer.norm_cross.gain);
        visit(format!("layers.{i}.norm_cross.shift"), &layer.norm_cross.shift);
        if let Some(cov) = &layer.coverage {
            visit(format!("layers.{i}.coverage.kernel"), &cov.kernel);
            visit(format!("layers.{i}.coverage.conv_bias"), &cov.conv_bias);
            visit(format!("layers.{i}.coverage.mix"), &cov.mix);
            visit(format!("layers.{i}.coverage.mix_bias"), &cov.mix_bias);
        }
        visit(format!("layers.{i}.ffn.expand.weight"), &layer.ffn.expand.weight);
        visit(format!("layers.{i}.ffn.expand.bias"), &layer.ffn.expand.bias);
        visit(format!("layers.{i}.ffn.contract.weight"), &layer.ffn.contract.weight);
        visit(format!("layers.{i}.ffn.contract.bias"), &layer.ffn.contract.bias);
        visit(format!("layers.{i}.norm_ffn.gain"), &layer.norm_ffn.gain);
        visit(format!("layers.{i}.norm_ffn.shift"), &layer.norm_ffn.shift);
    }
    visit("symbol_head.weight".into(), &p.symbol_head.weight);
    visit("symbol_head.bias".into(), &p.symbol_head.bias);
    if let Some(pos) = &p.position {
        visit("position.embed.table".into(), &pos.embed.table);
        visit("position.embed.proj.weight".into(), &pos.embed.proj.weight);
        visit("position.embed.proj.bias".into(), &pos.embed.proj.bias);
        visit("position.embed.norm.gain".into(), &pos.embed.norm.gain);
        visit("position.embed.norm.shift".into(), &pos.embed.norm.shift);
        visit("position.nested_head.weight".into(), &pos.nested_head.weight);
        visit("position.nested_head.bias".into(), &pos.nested_head.bias);
        visit("position.relative_head.weight".into(), &pos.relative_head.weight);
        visit("position.relative_head.bias".into(), &pos.relative_head.bias);
    }
}

fn push_entries_mut<'a>(p: &'a mut ModelParams, visit: &mut dyn FnMut(String, &'a mut Tensor)) {
    visit("visual_proj.weight".into(), &mut p.visual_proj.weight);
    visit("visual_proj.bias".into(), &mut p.visual_proj.bias);
    visit("symbol_embed".into(), &mut p.symbol_embed);
    for (i, layer) in p.layers.iter_mut().enumerate() {
        for (attn_name, attn) in [
            ("self_attn", &mut layer.self_attn),
            ("cross_attn", &mut layer.cross_attn),
        ] {
            for (lin_name, lin) in [
                ("query", &mut attn.query),
                ("key", &mut attn.key),
                ("value", &mut attn.value),
                ("output", &mut attn.output),
            ] {
                visit(format!("layers.{i}.{attn_name}.{lin_name}.weight"), &mut lin.weight);
                visit(format!("layers.{i}.{attn_name}.{lin_name}.bias"), &mut lin.bias);
            }
        }
        visit(format!("layers.{i}.norm_self.gain"), &mut layer.norm_self.gain);
        visit(format!("layers.{i}.norm_self.shift"), &mut layer.norm_self.shift);
        visit(format!("layers.{i}.norm_cross.gain"), &mut layer.norm_cross.gain);
        visit(format!("layers.{i}.norm_cross.shift"), &mut layer.norm_cross.shift);
        if let Some(cov) = &mut layer.coverage {
            visit(format!("layers.{i}.coverage.kernel"), &mut cov.kernel);
            visit(format!("layers.{i}.coverage.conv_bias"), &mut cov.conv_bias);
            visit(format!("layers.{i}.coverage.mix"), &mut cov.mix);
            visit(format!("layers.{i}.coverage.mix_bias"), &mut cov.mix_bias);
        }
        visit(format!("layers.{i}.ffn.expand.weight"), &mut layer.ffn.expand.weight);
        visit(format!("layers.{i}.ffn.expand.bias"), &mut layer.ffn.expand.bias);
        visit(format!("layers.{i}.ffn.contract.weight"), &mut layer.ffn.contract.weight);
        visit(format!("layers.{i}.ffn.contract.bias"), &mut layer.ffn.contract.bias);
        visit(format!("layers.{i}.norm_ffn.gain"), &mut layer.norm_ffn.gain);
        visit(format!("layers.{i}.norm_ffn.shift"), &mut layer.norm_ffn.shift);
    }
    visit("symbol_head.weight".into(), &mut p.symbol_head.weight);
    visit("symbol_head.bias".into(), &mut p.symbol_head.bias);
    if let Some(pos) = &mut p.position {
        visit("position.embed.table".into(), &mut pos.embed.table);
        visit("position.embed.proj.weight".into(), &mut pos.embed.proj.weight);
        visit("position.embed.proj.bias".into(), &mut pos.embed.proj.bias);
        visit("position.embed.norm.gain".into(), &mut pos.embed.norm.gain);
        visit("position.embed.norm.shift".into(), &mut pos.embed.norm.shift);
        visit("position.nested_head.weight".into(), &mut pos.nested_head.weight);
        visit("position.nested_head.bias".into(), &mut pos.nested_head.bias);
        visit("position.relative_head.weight".into(), &mut pos.relative_head.weight);
        visit("position.relative_head.bias".into(), &mut pos.relative_head.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper() -> Hyper {
        let mut h = Hyper::toy(16, 4, 20, 12);
        h.layers = 3;
        h
    }

    #[test]
    fn entry_walks_agree() {
        let mut params = ModelParams::init(&small_hyper(), 7).unwrap();
        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = params.entries_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        // No duplicates.
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn coverage_exists_only_on_configured_layers() {
        let params = ModelParams::init(&small_hyper(), 7).unwrap();
        assert!(params.layers[0].coverage.is_none());
        assert!(params.layers[1].coverage.is_some());
        assert!(params.layers[2].coverage.is_some());
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let h = small_hyper();
        let a = ModelParams::init(&h, 42).unwrap();
        let b = ModelParams::init(&h, 42).unwrap();
        let c = ModelParams::init(&h, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut params = ModelParams::init(&small_hyper(), 11).unwrap();
        params.randomize_coverage(11);
        let meta = CheckpointMeta {
            hyper: params.hyper.clone(),
            seed: 11,
            vocab_hash: "abc".into(),
            structure_hash: "def".into(),
            grid_height: 4,
            grid_width: 4,
        };
        params.save(&path, &meta).unwrap();
        let (back, meta_back) = ModelParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn load_accepts_stripped_position_branch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut params = ModelParams::init(&small_hyper(), 11).unwrap();
        let meta = CheckpointMeta {
            hyper: params.hyper.clone(),
            seed: 11,
            vocab_hash: String::new(),
            structure_hash: String::new(),
            grid_height: 4,
            grid_width: 4,
        };
        params.strip_position_branch();
        params.save(&path, &meta).unwrap();
        let (back, _) = ModelParams::load(&path).unwrap();
        assert!(back.position.is_none());
        assert_eq!(back, params);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let params = ModelParams::init(&small_hyper(), 11).unwrap();
        let mut meta = CheckpointMeta {
            hyper: params.hyper.clone(),
            seed: 11,
            vocab_hash: String::new(),
            structure_hash: String::new(),
            grid_height: 4,
            grid_width: 4,
        };
        meta.hyper.model_dim = 32; // sidecar disagrees with the records
        params.save(&path, &meta).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut h = small_hyper();
        h.heads = 3;
        assert!(h.validate().is_err());
        let mut h = small_hyper();
        h.coverage_kernel = 4;
        assert!(h.validate().is_err());
        let mut h = small_hyper();
        h.iac_layers = vec![4];
        assert!(h.validate().is_err());
    }
}
