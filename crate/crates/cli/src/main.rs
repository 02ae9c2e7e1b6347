//! Command-line front end: corpus preparation, position encoding,
//! training, decoding, and scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use posforest_core::corpus::{
    generate, read_corpus, read_rendered, read_rendered_meta, toy_corpus, write_corpus,
    write_rendered, write_targets, GrammarConfig, TargetRow,
};
use posforest_core::forest::{encode_forest, expression_complexity, stratify, DEFAULT_MAX_NESTING};
use posforest_core::lexer::{normalize, tokenize, TokenSeq, Vocabulary};
use posforest_core::metrics;
use posforest_core::model::{grad_check, greedy_decode, CheckpointMeta, Hyper, ModelParams};
use posforest_core::train::{train_toy, TrainConfig};

#[derive(Parser)]
#[command(
    name = "posforest",
    version,
    about = "Position-forest supervision tools for math expression recognition"
)]
struct Cli {
    /// Token dictionary file; the built-in dictionary is used when absent.
    #[arg(long, global = true)]
    dict: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print each token's position identifier.
    Encode {
        /// Expression in the space-free input form, e.g. "x^{2}+1".
        #[arg(long)]
        expr: String,
        #[arg(long, default_value_t = DEFAULT_MAX_NESTING)]
        max_nesting: usize,
    },
    /// Print per-token supervision targets, or tabulate a whole corpus.
    Targets {
        #[arg(long)]
        expr: Option<String>,
        /// Corpus listing (id<TAB>latex); requires --out.
        #[arg(long, requires = "out")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_NESTING)]
        max_nesting: usize,
    },
    /// Print the nesting complexity of an expression.
    Complexity {
        #[arg(long)]
        expr: String,
        /// Nesting cap; unlimited when absent.
        #[arg(long)]
        max_nesting: Option<usize>,
    },
    /// Group a corpus listing by nesting complexity.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        /// Prefix for per-level listings (<prefix>.level<k>.tsv); counts
        /// are printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_NESTING)]
        max_nesting: usize,
    },
    /// Sample a synthetic corpus listing from the toy grammar.
    Gen {
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Structure recursion depth of the grammar.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize a corpus listing into one-hot glyph grids.
    Render {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid size as HEIGHTxWIDTH.
        #[arg(long, default_value = "16x16")]
        grid: String,
        #[arg(long, default_value_t = DEFAULT_MAX_NESTING)]
        max_nesting: usize,
    },
    /// Train the toy decoder on a rendered corpus and save a checkpoint.
    TrainToy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        epochs: usize,
        #[arg(long, default_value_t = 1.5e-3)]
        lr: f64,
        /// Decoder feature width.
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Weight of the symbol cross-entropy.
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        /// Weight of the position cross-entropies; 0 disables the
        /// position stream.
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_NESTING)]
        max_nesting: usize,
    },
    /// Greedily decode a rendered corpus with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output listing; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        max_len: usize,
    },
    /// Score a prediction listing against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Compare tape gradients against central differences on a small
    /// random setup.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value = "6x6")]
        grid: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_vocab(dict: &Option<PathBuf>) -> Result<Vocabulary> {
    match dict {
        Some(path) => Vocabulary::from_dict_file(path)
            .with_context(|| format!("loading dictionary {}", path.display())),
        None => Ok(Vocabulary::builtin()),
    }
}

fn parse_expr(expr: &str, vocab: &Vocabulary) -> Result<TokenSeq> {
    let seq = tokenize(expr, vocab).context("tokenizing the expression")?;
    normalize(&seq, vocab).context("normalizing the expression")
}

fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let Some((h, w)) = spec.split_once('x') else {
        bail!("grid spec {spec:?} is not HEIGHTxWIDTH");
    };
    let height: usize = h.parse().with_context(|| format!("grid height {h:?}"))?;
    let width: usize = w.parse().with_context(|| format!("grid width {w:?}"))?;
    if height == 0 || width == 0 {
        bail!("grid dimensions must be positive");
    }
    Ok((height, width))
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let vocab = load_vocab(&cli.dict)?;
    match cli.command {
        Command::Encode { expr, max_nesting } => {
            let seq = parse_expr(&expr, &vocab)?;
            let ids = encode_forest(&seq, max_nesting)?;
            for (token, id) in seq.iter().zip(&ids) {
                println!("{}\t{}", token.text, id);
            }
            Ok(())
        }
        Command::Targets {
            expr,
            corpus,
            out,
            max_nesting,
        } => match (expr, corpus) {
            (Some(expr), None) => {
                let seq = parse_expr(&expr, &vocab)?;
                let ids = encode_forest(&seq, max_nesting)?;
                let row = TargetRow::new("-", &seq, &ids);
                for (((token, id), nested), relative) in seq
                    .iter()
                    .zip(&row.identifiers)
                    .zip(&row.nested)
                    .zip(row.relative.chars())
                {
                    println!("{}\t{}\t{}\t{}", token.text, id, nested, relative);
                }
                Ok(())
            }
            (None, Some(corpus)) => {
                let out = out.expect("clap enforces --out with --corpus");
                let entries = read_corpus(&corpus)?;
                let mut rows = Vec::with_capacity(entries.len());
                for (id, latex) in &entries {
                    let seq = parse_expr(latex, &vocab)
                        .with_context(|| format!("corpus entry {id}"))?;
                    let ids = encode_forest(&seq, max_nesting)
                        .with_context(|| format!("corpus entry {id}"))?;
                    rows.push(TargetRow::new(id.clone(), &seq, &ids));
                }
                write_targets(&out, &rows)?;
                eprintln!("wrote {} target rows to {}", rows.len(), out.display());
                Ok(())
            }
            _ => bail!("pass exactly one of --expr or --corpus"),
        },
        Command::Complexity { expr, max_nesting } => {
            let seq = parse_expr(&expr, &vocab)?;
            // Identifiers never grow past the token count, so the token
            // count serves as "unlimited".
            let limit = max_nesting.unwrap_or_else(|| seq.len().max(1));
            let ids = encode_forest(&seq, limit)?;
            if ids.is_empty() {
                bail!("the expression is empty");
            }
            println!("{}", expression_complexity(&ids));
            Ok(())
        }
        Command::Split {
            corpus,
            out,
            max_nesting,
        } => {
            let entries = read_corpus(&corpus)?;
            let mut seqs = Vec::with_capacity(entries.len());
            for (id, latex) in &entries {
                seqs.push(
                    parse_expr(latex, &vocab).with_context(|| format!("corpus entry {id}"))?,
                );
            }
            let buckets = stratify(&seqs, max_nesting)?;
            for (level, members) in &buckets {
                println!("level {level}: {} expressions", members.len());
            }
            if let Some(prefix) = out {
                for (level, members) in &buckets {
                    let path = PathBuf::from(format!("{}.level{level}.tsv", prefix.display()));
                    let subset: Vec<(String, String)> = members
                        .iter()
                        .map(|&i| entries[i].clone())
                        .collect();
                    write_corpus(&path, &subset)?;
                    eprintln!("wrote {} entries to {}", subset.len(), path.display());
                }
            }
            Ok(())
        }
        Command::Gen {
            count,
            seed,
            depth,
            out,
        } => {
            let config = GrammarConfig::toy(seed, depth);
            let mut entries = Vec::with_capacity(count);
            for index in 0..count as u64 {
                let seq = generate(&config, index, &vocab)?;
                entries.push((format!("s{index:04}"), seq.to_latex()));
            }
            write_corpus(&out, &entries)?;
            eprintln!("wrote {count} expressions to {}", out.display());
            Ok(())
        }
        Command::Render {
            corpus,
            out,
            grid,
            max_nesting,
        } => {
            let (height, width) = parse_grid(&grid)?;
            let entries = read_corpus(&corpus)?;
            let mut items = Vec::with_capacity(entries.len());
            for (id, latex) in &entries {
                let seq = parse_expr(latex, &vocab).with_context(|| format!("corpus entry {id}"))?;
                let sample = posforest_core::corpus::render(&seq, &vocab, height, width, max_nesting)
                    .with_context(|| format!("corpus entry {id}"))?;
                items.push((id.clone(), sample));
            }
            write_rendered(&out, &items, &vocab)?;
            eprintln!(
                "rendered {} samples onto {height}x{width} grids at {}",
                items.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainToy {
            corpus,
            out,
            seed,
            epochs,
            lr,
            channels,
            heads,
            lambda1,
            lambda2,
            max_nesting,
        } => {
            let meta = read_rendered_meta(&corpus)?;
            let loaded = read_rendered(&corpus, &vocab)?;
            let samples: Vec<_> = loaded
                .into_iter()
                .map(|(_, seq, grid)| (grid, seq))
                .collect();
            let mut hyper = Hyper::toy(channels, heads, vocab.len(), vocab.len());
            hyper.max_nesting = max_nesting;
            let mut config = TrainConfig::toy(seed, epochs);
            config.learning_rate = lr;
            config.rec_weight = lambda1;
            config.pos_weight = lambda2;
            let outcome = train_toy(&hyper, &config, &samples, &vocab)?;
            for stats in &outcome.history {
                match stats.exprate {
                    Some(rate) => println!(
                        "epoch {}\tloss {:.6}\texprate {:.4}",
                        stats.epoch, stats.mean_loss, rate
                    ),
                    None => println!("epoch {}\tloss {:.6}", stats.epoch, stats.mean_loss),
                }
            }
            match outcome.epochs_to_full_exprate {
                Some(epoch) => eprintln!("every expression decoded exactly from epoch {epoch}"),
                None => eprintln!(
                    "final exact-match rate {:.4} after {} epochs",
                    outcome.final_exprate,
                    outcome.history.len()
                ),
            }
            let meta = CheckpointMeta {
                hyper: hyper.clone(),
                seed,
                vocab_hash: vocab.vocab_hash(),
                structure_hash: vocab.structure_hash(),
                grid_height: meta.grid_height,
                grid_width: meta.grid_width,
            };
            outcome.params.save(&out, &meta)?;
            eprintln!("saved checkpoint to {}", out.display());
            Ok(())
        }
        Command::Decode {
            model,
            corpus,
            out,
            max_len,
        } => {
            let (params, meta) = ModelParams::load(&model)?;
            if meta.vocab_hash != vocab.vocab_hash() {
                bail!(
                    "the checkpoint was trained with vocabulary {} but the current one hashes to {}",
                    meta.vocab_hash,
                    vocab.vocab_hash()
                );
            }
            let loaded = read_rendered(&corpus, &vocab)?;
            let mut text = String::new();
            for (id, _, grid) in &loaded {
                let decoded = greedy_decode(grid, &params, max_len, &vocab)
                    .with_context(|| format!("decoding sample {id}"))?;
                text.push_str(&format!("{id}\t{}\n", decoded.to_latex()));
            }
            write_or_print(&out, &text)?;
            if let Some(path) = &out {
                eprintln!("wrote {} decodes to {}", loaded.len(), path.display());
            }
            Ok(())
        }
        Command::Eval { pred, gt } => {
            let pred_entries: BTreeMap<String, String> = read_corpus(&pred)?.into_iter().collect();
            let gt_entries: BTreeMap<String, String> = read_corpus(&gt)?.into_iter().collect();
            if pred_entries.len() != gt_entries.len()
                || pred_entries.keys().ne(gt_entries.keys())
            {
                bail!("prediction and ground-truth listings carry different sample ids");
            }
            let mut predictions = Vec::with_capacity(pred_entries.len());
            let mut truth = Vec::with_capacity(gt_entries.len());
            for (id, latex) in &gt_entries {
                truth.push(
                    parse_expr(latex, &vocab)
                        .with_context(|| format!("ground-truth entry {id}"))?,
                );
                let raw = &pred_entries[id];
                let seq = match tokenize(raw, &vocab) {
                    Ok(seq) => match normalize(&seq, &vocab) {
                        Ok(normal) => normal,
                        Err(err) => {
                            eprintln!("note: prediction {id} is not normalizable ({err}); scoring raw tokens");
                            seq
                        }
                    },
                    Err(err) => {
                        eprintln!("note: prediction {id} does not tokenize ({err}); scoring as empty");
                        TokenSeq::new(Vec::new())
                    }
                };
                predictions.push(seq);
            }
            let report = metrics::evaluate(&predictions, &truth)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Gradcheck {
            seed,
            epsilon,
            count,
            depth,
            grid,
            tolerance,
        } => {
            let (height, width) = parse_grid(&grid)?;
            let config = GrammarConfig::toy(seed, depth);
            let corpus = toy_corpus(&config, count, &vocab, height, width, DEFAULT_MAX_NESTING)?;
            let samples: Vec<_> = corpus
                .iter()
                .map(|(id, sample)| {
                    let seq = tokenize(&sample.latex, &vocab)
                        .with_context(|| format!("sample {id}"))?;
                    Ok((sample.grid.clone(), seq))
                })
                .collect::<Result<_>>()?;
            let hyper = Hyper::toy(16, 4, vocab.len(), vocab.len());
            let mut params = ModelParams::init(&hyper, seed)?;
            // A zero coverage filter is a stationary point; randomize it
            // so the check exercises live correction gradients.
            params.randomize_coverage(seed);
            let report = grad_check(&params, &samples, &vocab, 1.0, 1.0, epsilon)?;
            println!(
                "checked {} entries; max relative error {:.3e} at {}[{}]",
                report.entries_checked,
                report.max_rel_error,
                report.worst_parameter,
                report.worst_entry
            );
            if report.max_rel_error > tolerance {
                bail!(
                    "gradient disagreement {:.3e} exceeds the tolerance {tolerance:.3e}",
                    report.max_rel_error
                );
            }
            Ok(())
        }
    }
}
