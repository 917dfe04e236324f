use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bimodal_core::analogy::{analogy_query, sweep_weight, AnalogyQuery, GalleryIndex, DEFAULT_WEIGHTS};
use bimodal_core::checkpoint::Checkpoint;
use bimodal_core::config::{ConfigSources, RunPhase};
use bimodal_core::corpus::{parse_prompt_list, FilterConfig, FilterReason, Language, TableScorer, DEFAULT_NSFW_PROMPTS};
use bimodal_core::eval::{crosslingual_heatmap, default_templates};
use bimodal_core::pipeline::{self, RunManifest};
use bimodal_core::toy::generate_toy_dataset_sized;
use bimodal_core::{Error, ErrorKind};

/// Bilingual image-text dual-encoder pre-training pipeline.
///
/// Training commands read a flat TOML config. Values resolve in this order,
/// later wins: built-in desk defaults, `--config` file, BIMODAL_* path
/// environment variables, `--set key=value` flags.
#[derive(Parser)]
#[command(name = "bimodal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Serialize)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn sources(&self) -> anyhow::Result<ConfigSources> {
        Ok(ConfigSources::from_path(self.config.as_deref())?.with_overrides(&self.set))
    }
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Contrastive checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary JSON written by `tokenizer-train`.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args, Serialize)]
struct GalleryArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Manifest whose images form the gallery.
    #[arg(long, conflicts_with = "index")]
    gallery: Option<PathBuf>,
    /// Saved gallery index to search instead of embedding a manifest.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Also save the gallery index built from `--gallery`.
    #[arg(long)]
    save_index: Option<PathBuf>,
    /// Query image.
    #[arg(long)]
    image: PathBuf,
    /// Query text added to the image embedding.
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// JSON output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic bilingual shapes dataset.
    GenToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        concepts: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: u32,
    },
    /// Train the byte-level BPE vocabulary on a manifest's captions.
    TokenizerTrain(ConfigArgs),
    /// Apply the size, similarity and NSFW rules to a manifest.
    FilterCorpus(FilterArgs),
    /// Masked-autoencoder pre-training of the vision encoder.
    PretrainMae(ConfigArgs),
    /// Contrastive training of both encoders.
    Train(ConfigArgs),
    /// Zero-shot classification with a manifest's captions as class names.
    EvalZeroshot(ZeroShotArgs),
    /// Image-text retrieval Recall@K.
    EvalRetrieval(RetrievalArgs),
    /// Cosine-similarity heatmap between two aligned phrase lists.
    Heatmap(HeatmapArgs),
    /// Image + text analogy search.
    Analogy {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
    },
    /// Analogy search across a grid of text weights.
    SweepW {
        #[command(flatten)]
        gallery: GalleryArgs,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_WEIGHTS.to_vec())]
        weights: Vec<f64>,
    },
}

#[derive(Args, Serialize)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the filtered manifest, stored images and report.
    #[arg(long)]
    out_dir: PathBuf,
    /// Precomputed `image_ref<TAB>sim<TAB>nsfw` scores.
    #[arg(long, conflicts_with = "checkpoint")]
    scores: Option<PathBuf>,
    /// Score with a trained dual encoder instead (needs `--vocab`).
    #[arg(long, requires = "vocab")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    min_side: u32,
    #[arg(long, default_value_t = 256)]
    store_size: u32,
    #[arg(long, default_value_t = 0.28)]
    sim_threshold: f64,
    #[arg(long, default_value_t = 0.22)]
    nsfw_threshold: f64,
    /// One prompt per line; defaults to the bundled list.
    #[arg(long)]
    nsfw_prompts: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ZeroShotArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Caption language used for class names.
    #[arg(long)]
    language: Language,
    /// Prompt template containing `{label}`; repeatable. Defaults per language.
    #[arg(long)]
    template: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RetrievalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict captions to one language.
    #[arg(long)]
    language: Option<Language>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10])]
    ks: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct HeatmapArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Row phrases, one per line.
    #[arg(long)]
    rows: PathBuf,
    /// Column phrases, one per line.
    #[arg(long)]
    cols: PathBuf,
    /// CSV output file.
    #[arg(long)]
    out: PathBuf,
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::create_dir_all(parent_dir(path)).with_context(|| format!("creating {}", parent_dir(path).display()))?;
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn dataset_name(manifest: &Path) -> String {
    parent_dir(manifest)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn echo<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenToyData {
            out,
            concepts,
            samples,
            seed,
            size,
        } => {
            let data = generate_toy_dataset_sized(concepts, samples, seed, size)?;
            data.write_to(&out)?;
            let config = serde_json::json!({ "concepts": concepts, "samples": samples, "seed": seed, "size": size });
            RunManifest::new("gen-toy-data", seed, config, vec![out.join("manifest.tsv")]).write(&out)?;
            println!("wrote {} images and {} captions to {}", data.samples.len(), data.records.len(), out.display());
        }
        Command::TokenizerTrain(args) => {
            let sources = args.sources()?;
            let phase = sources.file_phase()?.unwrap_or(RunPhase::Contrastive);
            let cfg = sources.resolve(phase)?;
            let vocab = pipeline::train_tokenizer(&cfg.manifest, cfg.vocab_size, &cfg.vocab)?;
            RunManifest::new("tokenizer-train", cfg.seed, cfg.echo(), vec![cfg.vocab.clone()]).write(parent_dir(&cfg.vocab))?;
            println!("vocabulary of {} ids ({} merges) -> {}", vocab.vocab_size(), vocab.num_merges(), cfg.vocab.display());
        }
        Command::FilterCorpus(args) => {
            let mut cfg = FilterConfig {
                min_side: args.min_side,
                store_size: args.store_size,
                sim_threshold: args.sim_threshold,
                nsfw_threshold: args.nsfw_threshold,
                nsfw_prompts: parse_prompt_list(DEFAULT_NSFW_PROMPTS),
            };
            if let Some(p) = &args.nsfw_prompts {
                cfg.nsfw_prompts = parse_prompt_list(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let outcome = match (&args.scores, &args.checkpoint, &args.vocab) {
                (Some(scores), _, _) => {
                    let text = fs::read_to_string(scores).map_err(|e| Error::Io {
                        path: scores.clone(),
                        source: e,
                    })?;
                    pipeline::filter_corpus(&args.manifest, &cfg, &TableScorer::parse(&text)?, &args.out_dir)?
                }
                (None, Some(ck), Some(vocab)) => {
                    let model = pipeline::load_dual_encoder(ck)?;
                    let vocab = pipeline::load_vocab(vocab)?;
                    let scorer = pipeline::ModelScorer::new(&model, &vocab, &cfg.nsfw_prompts)?;
                    pipeline::filter_corpus(&args.manifest, &cfg, &scorer, &args.out_dir)?
                }
                _ => bail!(Error::Config("filter-corpus needs --scores or --checkpoint with --vocab".into())),
            };
            let outputs = vec![args.out_dir.join("manifest.tsv"), args.out_dir.join("filter_report.jsonl")];
            RunManifest::new("filter-corpus", 0, echo(&args), outputs).write(&args.out_dir)?;
            println!(
                "kept {} | too_small {} | low_similarity {} | nsfw {}",
                outcome.count(FilterReason::Kept),
                outcome.count(FilterReason::TooSmall),
                outcome.count(FilterReason::LowSimilarity),
                outcome.count(FilterReason::Nsfw)
            );
        }
        Command::PretrainMae(args) => {
            let cfg = args.sources()?.resolve(RunPhase::Mae)?;
            let run = pipeline::run_mae(&cfg)?;
            let outputs = vec![run.checkpoint.clone(), run.export.clone(), run.log.clone()];
            RunManifest::new("pretrain-mae", cfg.seed, cfg.echo(), outputs).write(&cfg.checkpoint_dir)?;
            println!(
                "MAE loss {:.5} -> {:.5}; encoder export {}",
                run.initial_loss,
                run.final_loss,
                run.export.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.sources()?.resolve(RunPhase::Contrastive)?;
            let run = pipeline::run_contrastive(&cfg)?;
            let outputs = vec![run.checkpoint.clone(), run.log.clone()];
            RunManifest::new("train", cfg.seed, cfg.echo(), outputs).write(&cfg.checkpoint_dir)?;
            println!(
                "final loss {:.6}, tau {:.6}; checkpoint {}",
                run.final_loss,
                run.final_tau,
                run.checkpoint.display()
            );
        }
        Command::EvalZeroshot(args) => {
            let model = pipeline::load_dual_encoder(&args.model.checkpoint)?;
            let vocab = pipeline::load_vocab(&args.model.vocab)?;
            let data = pipeline::load_pairs(&args.manifest, model.vision.cfg.image_size as u32)?;
            let templates = if args.template.is_empty() {
                default_templates(args.language)
            } else {
                args.template.clone()
            };
            let (_, report) =
                pipeline::eval_zeroshot(&model, &vocab, &data, args.language, templates, &dataset_name(&args.manifest))?;
            write_json(&args.out, &report)?;
            RunManifest::new("eval-zeroshot", 0, echo(&args), vec![args.out.clone()]).write(parent_dir(&args.out))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::EvalRetrieval(args) => {
            let model = pipeline::load_dual_encoder(&args.model.checkpoint)?;
            let vocab = pipeline::load_vocab(&args.model.vocab)?;
            let data = pipeline::load_pairs(&args.manifest, model.vision.cfg.image_size as u32)?;
            let (_, report) =
                pipeline::eval_retrieval(&model, &vocab, &data, args.language, &args.ks, &dataset_name(&args.manifest))?;
            write_json(&args.out, &report)?;
            RunManifest::new("eval-retrieval", 0, echo(&args), vec![args.out.clone()]).write(parent_dir(&args.out))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Heatmap(args) => {
            let model = pipeline::load_dual_encoder(&args.model.checkpoint)?;
            let vocab = pipeline::load_vocab(&args.model.vocab)?;
            let rows = read_lines(&args.rows)?;
            let cols = read_lines(&args.cols)?;
            let map = crosslingual_heatmap(&model, &vocab, &rows, &cols)?;
            fs::create_dir_all(parent_dir(&args.out))?;
            let f = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            map.write_csv(f)?;
            RunManifest::new("heatmap", 0, echo(&args), vec![args.out.clone()]).write(parent_dir(&args.out))?;
            println!("diagonal argmax hits: {}/{}", map.diagonal_hits(), rows.len());
        }
        Command::Analogy { gallery, weight } => {
            let (index, image, text) = analogy_inputs(&gallery)?;
            let q = AnalogyQuery {
                image,
                text,
                weight,
                k: gallery.k,
            };
            let hits = analogy_query(&q, &index)?;
            let config = serde_json::json!({ "args": echo(&gallery), "weight": weight });
            write_json(&gallery.out, &hits)?;
            RunManifest::new("analogy", 0, config, vec![gallery.out.clone()]).write(parent_dir(&gallery.out))?;
            for h in &hits {
                println!("{:.5}\t{}", h.score, h.id);
            }
        }
        Command::SweepW { gallery, weights } => {
            let (index, image, text) = analogy_inputs(&gallery)?;
            let rows = sweep_weight(&image, &text, &weights, gallery.k, &index)?;
            let config = serde_json::json!({ "args": echo(&gallery), "weights": weights });
            write_json(&gallery.out, &rows)?;
            RunManifest::new("sweep-w", 0, config, vec![gallery.out.clone()]).write(parent_dir(&gallery.out))?;
            for r in &rows {
                let ids: Vec<&str> = r.hits.iter().map(|h| h.id.as_str()).collect();
                println!("w={}\t{}", r.weight, ids.join(" "));
            }
        }
    }
    Ok(())
}

type AnalogyInputs = (GalleryIndex, bimodal_core::ndarray::Array1<f64>, bimodal_core::ndarray::Array1<f64>);

fn analogy_inputs(args: &GalleryArgs) -> anyhow::Result<AnalogyInputs> {
    let model = pipeline::load_dual_encoder(&args.model.checkpoint)?;
    let vocab = pipeline::load_vocab(&args.model.vocab)?;
    let index = match (&args.index, &args.gallery) {
        (Some(path), _) => GalleryIndex::from_checkpoint(&Checkpoint::load(path)?)?,
        (None, Some(manifest)) => {
            let data = pipeline::load_pairs(manifest, model.vision.cfg.image_size as u32)?;
            let index = pipeline::build_gallery(&model, &data)?;
            if let Some(out) = &args.save_index {
                index.to_checkpoint().save(out)?;
            }
            index
        }
        (None, None) => bail!(Error::Config("analogy needs --gallery or --index".into())),
    };
    let image = pipeline::embed_image_file(&model, &args.image)?;
    let text = pipeline::embed_text(&model, &vocab, &args.text)?;
    Ok((index, image, text))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numerical) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
