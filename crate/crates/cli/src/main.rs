//! Command-line front end: data generation, graph-embedding training,
//! pre-training, probing, attribution dumps and run comparison.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments or
//! configuration), 2 runtime failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trelm_core::corpus_kg::{
    generate_corpus, generate_kg, read_corpus, split_triples, train_kg_embeddings, write_corpus,
    KnowledgeGraph, Triple, Vocab,
};
use trelm_core::error::Error as CoreError;
use trelm_core::harness::compare::load_run_dir;
use trelm_core::harness::{
    compare_runs, load_checkpoint, load_kg_embeddings, pretrain, probe, save_kg_embeddings, Mode,
    RunConfig, RunData,
};
use trelm_core::injection::{InjectionScope, SiMode};
use trelm_core::model::PoolingMode;
use trelm_core::objectives::{mask_batch, CkaDirection};
use trelm_core::routing::{
    attribution_table, select_paths, write_attribution_csv, NonFfnPolicy, PreparedSequence,
};

#[derive(Parser)]
#[command(name = "trelm", version, about = "Knowledge-enhanced pre-training workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy knowledge graph.
    GenKg {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        relations: usize,
        #[arg(long, default_value_t = 400)]
        triples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verbalize a graph into an annotated corpus with a Zipfian profile.
    GenCorpus {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        sentences: usize,
        #[arg(long, default_value_t = 1.1)]
        zipf_s: f64,
        /// Total vocabulary size (specials + surfaces + distractors).
        #[arg(long, default_value_t = 2000)]
        vocab_size: usize,
        /// Fraction of triples held out of the corpus for probing.
        #[arg(long, default_value_t = 0.1)]
        holdout_frac: f64,
        #[arg(long)]
        out_corpus: PathBuf,
        #[arg(long)]
        out_heldout: PathBuf,
    },
    /// Train translational graph embeddings.
    KgEmbed {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pre-training.
    Pretrain(PretrainArgs),
    /// Probe a checkpoint with cloze queries over a triple list.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        kg_embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attribution scores and selected paths for one batch.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kg_embeddings: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 20)]
        riemann_steps: usize,
        #[arg(long, default_value_t = 0.1)]
        select_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two or more run directories.
    Compare {
        /// Run directories produced by `pretrain`.
        #[arg(long, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a flat CSV next to the JSON report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML run configuration; flags below override same-named keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    kg_embeddings: PathBuf,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Dump per-sentence importance tables to this CSV.
    #[arg(long)]
    si_csv: Option<PathBuf>,

    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    half_window: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    long_tail_threshold: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    riemann_steps: Option<usize>,
    #[arg(long)]
    select_fraction: Option<f64>,
    #[arg(long)]
    recompute_every: Option<usize>,
    #[arg(long)]
    non_ffn_policy: Option<String>,
    #[arg(long)]
    routing_enabled: Option<bool>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    si_mode: Option<String>,
    #[arg(long)]
    injection_scope: Option<String>,
    #[arg(long)]
    cka_direction: Option<String>,
    #[arg(long)]
    literal_local_normalizer: Option<bool>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    kg_dim: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are not failures
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for validation problems, 2 for runtime failures.
fn exit_code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::InvalidConfig(_)
        | CoreError::InvalidArgument(_)
        | CoreError::ShapeMismatch { .. }
        | CoreError::IndexOutOfRange(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> trelm_core::Result<()> {
    match cli.command {
        Command::GenKg { seed, entities, relations, triples, out } => {
            let kg = generate_kg(seed, entities, relations, triples)?;
            std::fs::write(&out, kg.to_json()?)?;
            log::info!(
                "wrote {} ({} entities, {} relations, {} triples)",
                out.display(),
                kg.entities.len(),
                kg.relations.len(),
                kg.triples.len()
            );
            Ok(())
        }
        Command::GenCorpus {
            kg,
            seed,
            sentences,
            zipf_s,
            vocab_size,
            holdout_frac,
            out_corpus,
            out_heldout,
        } => {
            let kg = load_kg(&kg)?;
            let vocab = Vocab::build(&kg, Vocab::distractors_for_total(&kg, vocab_size)?);
            let (train_kg, heldout) = split_triples(&kg, seed, holdout_frac)?;
            let corpus = generate_corpus(&train_kg, &vocab, seed, sentences, zipf_s)?;
            let mut w = BufWriter::new(File::create(&out_corpus)?);
            write_corpus(&corpus, &mut w)?;
            w.flush()?;
            std::fs::write(&out_heldout, serde_json::to_string_pretty(&heldout)?)?;
            log::info!(
                "wrote {} sentences to {}, {} held-out triples to {}",
                corpus.len(),
                out_corpus.display(),
                heldout.len(),
                out_heldout.display()
            );
            Ok(())
        }
        Command::KgEmbed { kg, seed, dim, epochs, margin, lr, out } => {
            let kg = load_kg(&kg)?;
            let outcome = train_kg_embeddings(&kg, dim, epochs, margin, lr, seed)?;
            save_kg_embeddings(&out, &outcome.embeddings)?;
            log::info!(
                "wrote {} (final epoch loss {:.4})",
                out.display(),
                outcome.epoch_losses.last().copied().unwrap_or(0.0)
            );
            Ok(())
        }
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe { checkpoint, kg, triples, kg_embeddings, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let kg = load_kg(&kg)?;
            let vocab =
                Vocab::build(&kg, Vocab::distractors_for_total(&kg, ck.model.cfg.vocab_size)?);
            let triples: Vec<Triple> = serde_json::from_reader(BufReader::new(File::open(triples)?))?;
            let emb = kg_embeddings.map(|p| load_kg_embeddings(&p)).transpose()?;
            let inject = ck.mode == Mode::Trelm;
            let result = probe(&ck.model, &vocab, &kg, emb.as_ref(), &triples, inject)?;
            let json = serde_json::to_string_pretty(&result)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            log::info!("macro P@1 {:.4} over {} queries", result.macro_p_at_1, result.n_queries);
            Ok(())
        }
        Command::Attribute {
            checkpoint,
            kg,
            corpus,
            kg_embeddings,
            seed,
            batch_size,
            riemann_steps,
            select_fraction,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let kg = load_kg(&kg)?;
            let vocab =
                Vocab::build(&kg, Vocab::distractors_for_total(&kg, ck.model.cfg.vocab_size)?);
            let corpus = read_corpus(&mut BufReader::new(File::open(&corpus)?))?;
            let emb = kg_embeddings.map(|p| load_kg_embeddings(&p)).transpose()?;
            let batch = prepare_attribution_batch(
                &ck.model,
                &vocab,
                &corpus,
                emb.as_ref().filter(|_| ck.mode == Mode::Trelm),
                seed,
                batch_size,
            )?;
            let table = attribution_table(&ck.model, &batch, riemann_steps)?;
            let path = select_paths(&table, select_fraction, &ck.model.params)?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_attribution_csv(&mut w, ck.global_step, &table, &path)?;
            w.flush()?;
            log::info!("wrote attribution table for step {} to {}", ck.global_step, out.display());
            Ok(())
        }
        Command::Compare { runs, out, csv } => {
            let logs = runs.iter().map(|d| load_run_dir(d)).collect::<trelm_core::Result<Vec<_>>>()?;
            let report = compare_runs(&logs)?;
            std::fs::write(&out, report.to_json()?)?;
            if let Some(csv_path) = csv {
                let mut w = BufWriter::new(File::create(&csv_path)?);
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            log::info!("compared {} runs into {}", logs.len(), out.display());
            Ok(())
        }
    }
}

fn load_kg(path: &PathBuf) -> trelm_core::Result<KnowledgeGraph> {
    KnowledgeGraph::from_json(&std::fs::read_to_string(path)?)
}

fn cmd_pretrain(args: PretrainArgs) -> trelm_core::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_toml_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &args)?;
    cfg.seed = args.seed;
    cfg.validate()?;

    let kg = load_kg(&args.kg)?;
    let corpus = read_corpus(&mut BufReader::new(File::open(&args.corpus)?))?;
    let kg_embeddings = load_kg_embeddings(&args.kg_embeddings)?;
    let heldout: Vec<Triple> = match &args.heldout {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
        None => Vec::new(),
    };
    let data = RunData { kg, corpus, kg_embeddings, heldout };
    let outcome = pretrain(&cfg, &data, &args.out_dir, args.si_csv.as_deref())?;
    let last = outcome.metrics.last();
    log::info!(
        "finished {} steps; final loss {:.4}; artifacts in {}",
        outcome.metrics.len(),
        last.map(|m| m.l_total).unwrap_or(f64::NAN),
        args.out_dir.display()
    );
    Ok(())
}

fn invalid(msg: String) -> CoreError {
    CoreError::InvalidConfig(msg)
}

fn apply_overrides(cfg: &mut RunConfig, a: &PretrainArgs) -> trelm_core::Result<()> {
    if let Some(v) = &a.mode {
        cfg.mode = match v.as_str() {
            "trelm" => Mode::Trelm,
            "mlm_baseline" => Mode::MlmBaseline,
            other => return Err(invalid(format!("unknown mode '{other}'"))),
        };
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    set!(
        epochs,
        batch_size,
        lr,
        momentum,
        mask_rate,
        theta,
        lambda0,
        beta,
        gamma,
        half_window,
        top_k,
        long_tail_threshold,
        negatives,
        riemann_steps,
        select_fraction,
        recompute_every,
        routing_enabled,
        literal_local_normalizer
    );
    macro_rules! set_model {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.model.$field = v; })*
        };
    }
    set_model!(n_layers, hidden_dim, n_heads, ffn_dim, vocab_size, max_seq_len, kg_dim);
    if let Some(v) = &a.non_ffn_policy {
        cfg.non_ffn_policy = match v.as_str() {
            "full" => NonFfnPolicy::Full,
            "freeze" => NonFfnPolicy::Freeze,
            other => return Err(invalid(format!("unknown non_ffn_policy '{other}'"))),
        };
    }
    if let Some(v) = &a.pooling {
        cfg.pooling = match v.as_str() {
            "mean" => PoolingMode::Mean,
            "cls" => PoolingMode::Cls,
            other => return Err(invalid(format!("unknown pooling '{other}'"))),
        };
    }
    if let Some(v) = &a.si_mode {
        cfg.si_mode = match v.as_str() {
            "reciprocal_cosine" => SiMode::ReciprocalCosine,
            "one_minus_cosine" => SiMode::OneMinusCosine,
            other => return Err(invalid(format!("unknown si_mode '{other}'"))),
        };
    }
    if let Some(v) = &a.injection_scope {
        cfg.injection_scope = match v.as_str() {
            "union" => InjectionScope::Union,
            "long_tail_only" => InjectionScope::LongTailOnly,
            "high_freq_only" => InjectionScope::HighFreqOnly,
            other => return Err(invalid(format!("unknown injection_scope '{other}'"))),
        };
    }
    if let Some(v) = &a.cka_direction {
        cfg.cka_direction = match v.as_str() {
            "tail_only" => CkaDirection::TailOnly,
            "head_only" => CkaDirection::HeadOnly,
            "both" => CkaDirection::Both,
            other => return Err(invalid(format!("unknown cka_direction '{other}'"))),
        };
    }
    Ok(())
}

/// Builds an attribution batch the way a training step would see it:
/// seeded sentence sample, tail-side masking, and (for knowledge-injected
/// checkpoints) the projected graph embedding at non-masked target spans.
fn prepare_attribution_batch(
    model: &trelm_core::model::Model,
    vocab: &Vocab,
    corpus: &[trelm_core::corpus_kg::AnnotatedSequence],
    emb: Option<&trelm_core::corpus_kg::KgEmbeddings>,
    seed: u64,
    batch_size: usize,
) -> trelm_core::Result<Vec<PreparedSequence>> {
    use trelm_core::injection::knowledge_embedding;
    use trelm_core::objectives::PredictSide;
    if corpus.is_empty() {
        return Err(CoreError::InvalidArgument("empty corpus".into()));
    }
    let n = batch_size.min(corpus.len());
    let picked: Vec<&trelm_core::corpus_kg::AnnotatedSequence> = (0..n)
        .map(|i| {
            let idx = trelm_core::numerics::mix_seed(seed, i as u64) as usize % corpus.len();
            &corpus[idx]
        })
        .collect();
    let masked = mask_batch(&picked, vocab, 0.15, seed, PredictSide::Tail)?;
    let d = model.cfg.hidden_dim;
    picked
        .iter()
        .zip(&masked.seqs)
        .map(|(seq, msk)| {
            let mut ids = vec![vocab.cls_id()];
            ids.extend_from_slice(&msk.input_ids);
            let mut input = model.embed_ids(&ids)?;
            if let Some(emb) = emb {
                let know: Vec<usize> = msk.knowledge.iter().map(|&(p, _)| p).collect();
                let mut data = input.data().to_vec();
                for span in &seq.spans {
                    if know.iter().any(|&p| (span.start..=span.end).contains(&p)) {
                        continue;
                    }
                    let h_e = knowledge_embedding(span.entity, emb, model.params.w_proj())?;
                    for p in span.start..=span.end {
                        data[(p + 1) * d..(p + 2) * d].copy_from_slice(&h_e);
                    }
                }
                input = trelm_core::numerics::Tensor::new(ids.len(), d, data)?;
            }
            Ok(PreparedSequence {
                input,
                targets: msk.knowledge.iter().map(|&(p, y)| (p + 1, y)).collect(),
            })
        })
        .collect()
}
