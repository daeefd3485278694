use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use muco_core::contrast::{muco_loss_buffers, BufferView};
use muco_core::costmodel::{fit_table5, read_rows_csv, summarize, CostConfig};
use muco_core::datagen::{self, HttpProvider, MockProvider, PipelineOptions, ProviderConfig, SynthRecord};
use muco_core::encoder::EncoderState;
use muco_core::flatfile::{embeddings_from_flat, embeddings_to_flat, FlatFile};
use muco_core::gradcheck::{self, GradcheckConfig};
use muco_core::harness::{self, EvalPair, SyntheticSpec, TokenizerKind, TrainConfig};
use muco_core::template::{build_adapted_pair, mask_words, TemplateConfig, TemplateVariant};
use muco_core::types::{EmbeddingMatrix, LossConfig, MultiTurnSample};

/// Image prefix length given to samples converted from synthesized records.
const SYNTH_IMAGE_TOKENS: usize = 4;

#[derive(Parser)]
#[command(name = "muco", version, about = "Multi-turn contrastive training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder on a JSONL corpus of multi-turn samples or synthesized records.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, loss trajectory and run config.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score single-turn retrieval with a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL of {image_id, image_tokens, query, target}.
        #[arg(long)]
        pairs: PathBuf,
        /// Run config; defaults to `config.toml` beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Single-turn versus multi-turn training on the synthetic corpus.
    CompareScaling {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Finite-difference check of loss and encoder gradients.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        images: usize,
        #[arg(long, default_value_t = 2)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0.02)]
        temperature: f64,
    },
    /// Per-iteration training cost.
    Cost {
        #[arg(long)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        turns: usize,
        /// CSV with columns turns,batch,pflops to fit the model to.
        #[arg(long)]
        fit_table5: Option<PathBuf>,
    },
    /// Caption images and synthesize seven query/target pairs per image.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        provider: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        /// Use the deterministic offline provider.
        #[arg(long)]
        mock: bool,
    },
    /// Check a synthesized corpus and print statistics.
    ValidateCorpus {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Word masking and fine-tuning template preview.
    MaskDemo {
        #[arg(long)]
        text: String,
        #[arg(long, alias = "mask-ratio")]
        ratio: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        template_variant: Option<TemplateVariant>,
        /// Counterpart text; when given, the adapted pair is printed too.
        #[arg(long)]
        target: Option<String>,
        /// Markup and prompt config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Masked multi-pair loss over two embedding dumps.
    Loss {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        temperature: f64,
        #[arg(long)]
        no_mask_same_image: bool,
        #[arg(long)]
        no_mask_counterpart: bool,
        /// Write gradient dumps to `<prefix>.queries.flat` and `<prefix>.targets.flat`.
        #[arg(long)]
        grad_out: Option<PathBuf>,
    },
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<MultiTurnSample>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line).with_context(|| format!("line {}", n + 1))?;
        let sample = if value.get("dense_caption").is_some() {
            let record: SynthRecord = serde_json::from_value(value).with_context(|| format!("line {}", n + 1))?;
            record.to_sample(SYNTH_IMAGE_TOKENS)
        } else {
            serde_json::from_value(value).with_context(|| format!("line {}", n + 1))?
        };
        out.push(sample);
    }
    Ok(out)
}

fn read_eval_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("line {}", n + 1)))
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

const VOCAB_FILE: &str = "vocab.txt";
const CONFIG_FILE: &str = "config.toml";
const CKPT_FILE: &str = "encoder.flat";

fn train(corpus: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let samples = read_samples(corpus)?;
    let words = harness::corpus_vocabulary(&samples, &cfg.template);
    let tokenizer = harness::build_tokenizer(cfg.tokenizer, &cfg.template, &words)?;
    let outcome = harness::train(&samples, &cfg, tokenizer.as_ref())?;

    std::fs::create_dir_all(out)?;
    outcome.state.save(out.join(CKPT_FILE))?;
    harness::write_loss_csv(BufWriter::new(File::create(out.join("losses.csv"))?), &outcome.losses)?;
    std::fs::write(out.join(CONFIG_FILE), toml::to_string(&cfg)?)?;
    if cfg.tokenizer == TokenizerKind::Word {
        std::fs::write(out.join(VOCAB_FILE), words.join("\n"))?;
    }
    let stdout = std::io::stdout();
    harness::write_loss_csv(stdout.lock(), &outcome.losses)?;
    Ok(())
}

fn eval(ckpt: &Path, pairs: &Path, config: Option<&Path>) -> Result<()> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let beside = dir.join(CONFIG_FILE);
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None if beside.exists() => load_config(Some(&beside))?,
        None => TrainConfig::default(),
    };
    let words: Vec<String> = match cfg.tokenizer {
        TokenizerKind::Word => std::fs::read_to_string(dir.join(VOCAB_FILE))
            .context("word-level checkpoints need vocab.txt beside them")?
            .lines()
            .map(str::to_string)
            .collect(),
        TokenizerKind::Byte => Vec::new(),
    };
    let tokenizer = harness::build_tokenizer(cfg.tokenizer, &cfg.template, &words)?;
    let state = EncoderState::load(ckpt)?;
    if state.config().vocab_size != tokenizer.vocab_size() {
        bail!(
            "checkpoint vocabulary {} does not match the tokenizer ({})",
            state.config().vocab_size,
            tokenizer.vocab_size()
        );
    }
    let report = harness::evaluate(&state, &read_eval_pairs(pairs)?, &cfg, tokenizer.as_ref())?;
    print_json(&report)
}

fn compare_scaling(config: Option<&Path>, images: usize) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.tokenizer = TokenizerKind::Word;
    let corpus = harness::synthetic_corpus(&SyntheticSpec {
        images,
        turns: cfg.turns_per_image,
        seed: cfg.seed,
        ..SyntheticSpec::default()
    })?;
    let words = harness::corpus_vocabulary(&corpus.train, &cfg.template);
    let tokenizer = harness::build_tokenizer(cfg.tokenizer, &cfg.template, &words)?;
    let report = harness::compare_scaling(&corpus.train, &corpus.eval, &cfg, tokenizer.as_ref(), &CostConfig::default())?;
    print_json(&report)
}

fn cost(batch: usize, turns: usize, fit: Option<&Path>) -> Result<()> {
    let cfg = match fit {
        Some(path) => {
            let rows = read_rows_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?;
            fit_table5(&rows, &CostConfig::forward_calibrated())?.config
        }
        None => CostConfig::default(),
    };
    print_json(&summarize(&cfg, batch, turns))
}

fn synth(input: &Path, out: &Path, provider: Option<&Path>, concurrency: usize, mock: bool) -> Result<()> {
    let cfg = match provider {
        Some(p) => ProviderConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ProviderConfig::default(),
    };
    let records = datagen::read_image_records(input)?;
    let opts = PipelineOptions {
        concurrency,
        ..PipelineOptions::new(out)
    };
    let stats = if mock {
        datagen::run_pipeline(&records, &MockProvider, &cfg, &opts)?
    } else {
        if provider.is_none() {
            bail!("--provider is required unless --mock is given");
        }
        datagen::run_pipeline(&records, &HttpProvider::new(&cfg)?, &cfg, &opts)?
    };
    print_json(&stats)
}

fn validate_corpus(corpus: &Path) -> Result<()> {
    let tokenizer = harness::build_tokenizer(TokenizerKind::Byte, &TemplateConfig::default(), &[])?;
    print_json(&datagen::validate_corpus(corpus, tokenizer.as_ref())?)
}

#[derive(Serialize)]
struct MaskDemo {
    masked: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    adapted: Option<AdaptedView>,
}

#[derive(Serialize)]
struct AdaptedView {
    query: String,
    query_augmented: String,
    target: String,
    target_augmented: String,
}

fn mask_demo(
    text: &str,
    ratio: Option<f64>,
    seed: u64,
    variant: Option<TemplateVariant>,
    target: Option<&str>,
    config: Option<&Path>,
) -> Result<()> {
    let mut template = match config {
        Some(p) => TemplateConfig::load(p)?,
        None => TemplateConfig::default(),
    };
    if let Some(r) = ratio {
        template.prompts.mask_ratio = r;
    }
    if let Some(v) = variant {
        template.prompts.template_variant = v;
    }
    template.prompts.validate()?;
    let masked = mask_words(text, template.prompts.mask_ratio, seed, &template.markup.mask_token);
    let adapted = match target {
        Some(t) => {
            let pair = build_adapted_pair(text, t, &template.prompts, &template.markup, seed)?;
            Some(AdaptedView {
                query: pair.query.original().to_string(),
                query_augmented: pair.query.augmented(),
                target: pair.target.original().to_string(),
                target_augmented: pair.target.augmented(),
            })
        }
        None => None,
    };
    print_json(&MaskDemo { masked, adapted })
}

fn view(m: &EmbeddingMatrix) -> BufferView<'_> {
    BufferView {
        rows: m.len(),
        dim: m.dim(),
        data: m.values(),
        labels: m.rows(),
    }
}

#[derive(Serialize)]
struct LossSummary {
    loss: f64,
    queries: usize,
    targets: usize,
    dim: usize,
}

fn load_dump(path: &Path) -> Result<EmbeddingMatrix> {
    let flat = FlatFile::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(embeddings_from_flat(&flat)?)
}

fn loss(
    queries: &Path,
    targets: &Path,
    temperature: f64,
    no_same: bool,
    no_counterpart: bool,
    grad_out: Option<&Path>,
) -> Result<()> {
    let (q, t) = (load_dump(queries)?, load_dump(targets)?);
    let cfg = LossConfig {
        temperature,
        mask_same_image: !no_same,
        mask_counterpart: !no_counterpart,
    };
    let mut gq = vec![0.0; q.values().len()];
    let mut gt = vec![0.0; t.values().len()];
    let total = muco_loss_buffers(view(&q), view(&t), &cfg, &mut gq, &mut gt)?;
    if let Some(prefix) = grad_out {
        let write = |suffix: &str, m: &EmbeddingMatrix, g: Vec<f64>| -> Result<()> {
            // gradients are not unit rows, so reuse the header of the input dump
            let mut flat = embeddings_to_flat(m);
            flat.values = g;
            flat.fields.retain(|(k, _)| k != "kind");
            flat.fields.insert(0, ("kind".into(), "gradient".into()));
            let mut path = prefix.as_os_str().to_owned();
            path.push(suffix);
            flat.save(PathBuf::from(path))?;
            Ok(())
        };
        write(".queries.flat", &q, gq)?;
        write(".targets.flat", &t, gt)?;
    }
    print_json(&LossSummary {
        loss: total,
        queries: q.len(),
        targets: t.len(),
        dim: q.dim(),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { corpus, config, out } => train(&corpus, config.as_deref(), &out)?,
        Command::Eval { ckpt, pairs, config } => eval(&ckpt, &pairs, config.as_deref())?,
        Command::CompareScaling { config, images } => compare_scaling(config.as_deref(), images)?,
        Command::Gradcheck {
            dim,
            images,
            turns,
            seed,
            tol,
            temperature,
        } => {
            let report = gradcheck::run(&GradcheckConfig {
                dim,
                images,
                turns,
                seed,
                tol,
                temperature,
            })?;
            print_json(&report)?;
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Cost {
            batch,
            turns,
            fit_table5,
        } => cost(batch, turns, fit_table5.as_deref())?,
        Command::Synth {
            input,
            out,
            provider,
            concurrency,
            mock,
        } => synth(&input, &out, provider.as_deref(), concurrency, mock)?,
        Command::ValidateCorpus { corpus } => validate_corpus(&corpus)?,
        Command::MaskDemo {
            text,
            ratio,
            seed,
            template_variant,
            target,
            config,
        } => mask_demo(&text, ratio, seed, template_variant, target.as_deref(), config.as_deref())?,
        Command::Loss {
            queries,
            targets,
            temperature,
            no_mask_same_image,
            no_mask_counterpart,
            grad_out,
        } => loss(
            &queries,
            &targets,
            temperature,
            no_mask_same_image,
            no_mask_counterpart,
            grad_out.as_deref(),
        )?,
    }
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
