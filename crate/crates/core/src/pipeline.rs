//! Run orchestration: manifests in, checkpoints, logs and run manifests out.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analogy::GalleryIndex;
use crate::checkpoint::{Checkpoint, Phase};
use crate::config::{require_input, RunConfig, RunPhase};
use crate::corpus::{filter_records, read_manifest, write_manifest, FilterConfig, FilterOutcome, Language, PairRecord, PairScorer};
use crate::error::{Error, Result};
use crate::eval::{embed_images, embed_texts, retrieval_eval, zeroshot_classify, LabelSet, MetricsReport, RetrievalReport, ZeroShotResult};
use crate::mae::{pretrain_mae, MaeModel};
use crate::raster::{resize_for_store, Raster};
use crate::tokenizer::{BpeTrainer, Vocabulary};
use crate::train::{train_contrastive, DualEncoder, PairDataset};

pub const MAE_CHECKPOINT: &str = "mae.ckpt";
pub const MAE_EXPORT: &str = "mae_export.ckpt";
pub const CONTRASTIVE_CHECKPOINT: &str = "contrastive.ckpt";

/// Config echo, seed and versions written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value, outputs: Vec<PathBuf>) -> Self {
        let versions = BTreeMap::from([
            ("bimodal-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint-format".to_string(), crate::checkpoint::FORMAT_VERSION.to_string()),
        ]);
        Self {
            command: command.into(),
            seed,
            config,
            versions,
            outputs,
        }
    }

    /// Writes `run_manifest.<command>.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("run_manifest.{}.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// A manifest's records with their decoded images, one per distinct reference.
#[derive(Debug, Clone)]
pub struct LoadedPairs {
    pub records: Vec<PairRecord>,
    pub image_refs: Vec<String>,
    pub images: Vec<Raster>,
    /// Image index of each record.
    pub record_image: Vec<usize>,
}

impl LoadedPairs {
    /// Records of the image at `idx`.
    pub fn captions_of(&self, idx: usize) -> Vec<usize> {
        (0..self.records.len()).filter(|&r| self.record_image[r] == idx).collect()
    }
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<PairRecord>> {
    require_input(path, "manifest")?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(BufReader::new(f))
}

/// Read a manifest and decode its images, resolved relative to the manifest's
/// directory. Square images of `side` are kept as they are; anything else is
/// resized on its shorter side and center-cropped.
pub fn load_pairs(manifest: &Path, side: u32) -> Result<LoadedPairs> {
    let records = read_manifest_file(manifest)?;
    if records.is_empty() {
        return Err(Error::Data(format!("manifest `{}` has no records", manifest.display())));
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut image_refs = Vec::new();
    let mut images = Vec::new();
    let mut record_image = Vec::with_capacity(records.len());
    for r in &records {
        let idx = match index.get(&r.image_ref) {
            Some(&i) => i,
            None => {
                let img = Raster::load(&root.join(&r.image_ref))?;
                let img = if img.dims() == (side, side) {
                    img
                } else {
                    resize_for_store(&img, side, 1)?
                };
                index.insert(r.image_ref.clone(), images.len());
                image_refs.push(r.image_ref.clone());
                images.push(img);
                images.len() - 1
            }
        };
        record_image.push(idx);
    }
    Ok(LoadedPairs {
        records,
        image_refs,
        images,
        record_image,
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    require_input(path, "vocabulary")?;
    Vocabulary::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Train a BPE vocabulary on every caption of `manifest` and write it to `out`.
pub fn train_tokenizer(manifest: &Path, vocab_size: usize, out: &Path) -> Result<Vocabulary> {
    let records = read_manifest_file(manifest)?;
    let vocab = BpeTrainer::new()
        .add_texts(records.iter().map(|r| r.caption.as_str()), 1)
        .train(vocab_size)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, vocab.to_json()?).map_err(|e| Error::io(out, e))?;
    Ok(vocab)
}

fn open_log(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(f)))
}

fn expect_phase(cfg: &RunConfig, phase: RunPhase) -> Result<()> {
    if cfg.phase == phase {
        Ok(())
    } else {
        Err(Error::PhaseMismatch {
            expected: phase.to_string(),
            found: cfg.phase.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MaeRun {
    pub checkpoint: PathBuf,
    pub export: PathBuf,
    pub log: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn run_mae(cfg: &RunConfig) -> Result<MaeRun> {
    expect_phase(cfg, RunPhase::Mae)?;
    cfg.validate()?;
    let data = load_pairs(&cfg.manifest, cfg.image_size as u32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MaeModel::new(cfg.vision(), cfg.mae(), &mut rng)?;
    let (log, mut writer) = open_log(&cfg.log_dir, "mae_metrics.jsonl")?;
    let steps = pretrain_mae(&mut model, &data.images, Some(&mut writer))?;
    writer.flush().map_err(|e| Error::io(&log, e))?;
    let last = steps.last().map(|s| s.step + 1).unwrap_or(0);
    let mut full = model.to_checkpoint(last);
    full.config["run"] = cfg.echo();
    let mut export = model.export_encoder(last);
    export.config["run"] = cfg.echo();
    let checkpoint = cfg.checkpoint_dir.join(MAE_CHECKPOINT);
    let export_path = cfg.checkpoint_dir.join(MAE_EXPORT);
    full.save(&checkpoint)?;
    export.save(&export_path)?;
    Ok(MaeRun {
        checkpoint,
        export: export_path,
        log,
        initial_loss: steps.first().map(|s| s.loss).unwrap_or(f64::NAN),
        final_loss: steps.last().map(|s| s.loss).unwrap_or(f64::NAN),
    })
}

/// Caption tokens paired with image indices.
pub fn pair_dataset(data: &LoadedPairs, vocab: &Vocabulary, max_len: usize) -> PairDataset {
    PairDataset {
        images: data.images.clone(),
        pairs: data
            .records
            .iter()
            .zip(&data.record_image)
            .map(|(r, &i)| (i, vocab.encode(&r.caption, max_len)))
            .collect(),
    }
}

/// Fresh or MAE-initialized dual encoder for `cfg`.
pub fn init_dual_encoder(cfg: &RunConfig, vocab: &Vocabulary) -> Result<DualEncoder> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let text = cfg.text(vocab.vocab_size());
    match &cfg.init_checkpoint {
        Some(path) => {
            let export = Checkpoint::load(path)?;
            export.expect_phase(Phase::MaeExport)?;
            export.expect_config("vision", &cfg.vision())?;
            DualEncoder::from_mae_export(&export, text, &mut rng)
        }
        None => DualEncoder::new(cfg.vision(), text, &mut rng),
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveRun {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: f64,
    pub final_tau: f64,
}

pub fn run_contrastive(cfg: &RunConfig) -> Result<ContrastiveRun> {
    expect_phase(cfg, RunPhase::Contrastive)?;
    cfg.validate()?;
    let vocab = load_vocab(&cfg.vocab)?;
    let data = load_pairs(&cfg.manifest, cfg.image_size as u32)?;
    let mut model = init_dual_encoder(cfg, &vocab)?;
    let dataset = pair_dataset(&data, &vocab, cfg.max_len);
    let (log, mut writer) = open_log(&cfg.log_dir, "train_metrics.jsonl")?;
    let result = train_contrastive(&mut model, &dataset, &cfg.train(), Some(&mut writer))?;
    writer.flush().map_err(|e| Error::io(&log, e))?;
    let mut ck = model.to_checkpoint(result.steps.len() as u64, cfg.seed);
    ck.config["run"] = cfg.echo();
    let checkpoint = cfg.checkpoint_dir.join(CONTRASTIVE_CHECKPOINT);
    ck.save(&checkpoint)?;
    Ok(ContrastiveRun {
        checkpoint,
        log,
        final_loss: result.final_loss().unwrap_or(f64::NAN),
        final_tau: model.temperature.tau(),
    })
}

/// Trained dual encoder from a contrastive checkpoint on disk.
pub fn load_dual_encoder(path: &Path) -> Result<DualEncoder> {
    require_input(path, "checkpoint")?;
    DualEncoder::from_checkpoint(&Checkpoint::load(path)?)
}

/// Scores pairs with a trained dual encoder: caption similarity and the
/// highest similarity to any NSFW prompt.
pub struct ModelScorer<'a> {
    model: &'a DualEncoder,
    vocab: &'a Vocabulary,
    prompts: ndarray::Array2<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a DualEncoder, vocab: &'a Vocabulary, nsfw_prompts: &[String]) -> Result<Self> {
        if nsfw_prompts.is_empty() {
            return Err(Error::Config("NSFW prompt list is empty".into()));
        }
        Ok(Self {
            model,
            vocab,
            prompts: embed_texts(model, vocab, nsfw_prompts)?,
        })
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, record: &PairRecord, image: &Raster) -> Result<(f64, f64)> {
        let side = self.model.vision.cfg.image_size as u32;
        let view = if image.dims() == (side, side) {
            image.clone()
        } else {
            resize_for_store(image, side, 1)?
        };
        let img = embed_images(self.model, &[&view])?;
        let txt = embed_texts(self.model, self.vocab, std::slice::from_ref(&record.caption))?;
        let sim = img.row(0).dot(&txt.row(0));
        let nsfw = self.prompts.dot(&img.row(0)).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((sim, nsfw))
    }
}

/// Filter `manifest`, storing kept images resized to the store size under
/// `store_dir` next to a rewritten manifest and a JSONL verdict report.
pub fn filter_corpus<S: PairScorer + ?Sized>(
    manifest: &Path,
    cfg: &FilterConfig,
    scorer: &S,
    store_dir: &Path,
) -> Result<FilterOutcome> {
    let records = read_manifest_file(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut cache: HashMap<String, Raster> = HashMap::new();
    let outcome = filter_records(&records, cfg, scorer, |r| {
        if let Some(img) = cache.get(&r.image_ref) {
            return Ok(img.clone());
        }
        let img = Raster::load(&root.join(&r.image_ref))?;
        cache.insert(r.image_ref.clone(), img.clone());
        Ok(img)
    })?;
    fs::create_dir_all(store_dir.join("images")).map_err(|e| Error::io(store_dir, e))?;
    let mut kept = Vec::with_capacity(outcome.kept.len());
    let mut stored: HashMap<String, String> = HashMap::new();
    for r in &outcome.kept {
        let new_ref = match stored.get(&r.image_ref) {
            Some(n) => n.clone(),
            None => {
                let n = format!("images/{:06}.png", stored.len());
                resize_for_store(&cache[&r.image_ref], cfg.store_size, cfg.min_side)?.save_png(&store_dir.join(&n))?;
                stored.insert(r.image_ref.clone(), n.clone());
                n
            }
        };
        let mut rec = r.clone();
        rec.image_ref = new_ref;
        kept.push(rec);
    }
    let out_manifest = store_dir.join("manifest.tsv");
    let f = File::create(&out_manifest).map_err(|e| Error::io(&out_manifest, e))?;
    write_manifest(BufWriter::new(f), &kept)?;
    let report = store_dir.join("filter_report.jsonl");
    let f = File::create(&report).map_err(|e| Error::io(&report, e))?;
    let mut w = BufWriter::new(f);
    outcome.write_report(&mut w)?;
    w.flush().map_err(|e| Error::io(&report, e))?;
    Ok(FilterOutcome {
        kept,
        report: outcome.report,
    })
}

/// Distinct captions of `lang` in first-appearance order, and each image's
/// caption index (`None` if the image has no caption in `lang`).
pub fn class_labels(data: &LoadedPairs, lang: Language) -> (Vec<String>, Vec<Option<usize>>) {
    let mut names: Vec<String> = Vec::new();
    let mut per_image = vec![None; data.images.len()];
    for (r, &img) in data.records.iter().zip(&data.record_image) {
        if r.language != lang {
            continue;
        }
        let k = match names.iter().position(|n| *n == r.caption) {
            Some(k) => k,
            None => {
                names.push(r.caption.clone());
                names.len() - 1
            }
        };
        per_image[img].get_or_insert(k);
    }
    (names, per_image)
}

/// Zero-shot accuracy where the class names are the distinct captions of `lang`.
pub fn eval_zeroshot(
    model: &DualEncoder,
    vocab: &Vocabulary,
    data: &LoadedPairs,
    lang: Language,
    templates: Vec<String>,
    dataset: &str,
) -> Result<(ZeroShotResult, MetricsReport)> {
    let (names, per_image) = class_labels(data, lang);
    let labelled: Vec<usize> = (0..per_image.len()).filter(|&i| per_image[i].is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Data(format!("no `{lang}` captions to use as class labels")));
    }
    let labels = LabelSet::new(names, templates)?;
    let images: Vec<&Raster> = labelled.iter().map(|&i| &data.images[i]).collect();
    let truth: Vec<usize> = labelled.iter().map(|&i| per_image[i].unwrap()).collect();
    let result = zeroshot_classify(model, vocab, &images, &labels)?;
    let report = MetricsReport::new("zeroshot", dataset, lang.as_str())
        .with("top1", result.accuracy(&truth)?)
        .with("chance", 100.0 / labels.class_names.len() as f64)
        .with("num_images", images.len() as f64);
    Ok((result, report))
}

/// Retrieval over distinct caption texts (of `lang`, or all languages).
/// A text query's ground truth is every image carrying that caption.
pub fn eval_retrieval(
    model: &DualEncoder,
    vocab: &Vocabulary,
    data: &LoadedPairs,
    lang: Option<Language>,
    ks: &[usize],
    dataset: &str,
) -> Result<(RetrievalReport, MetricsReport)> {
    let mut texts: Vec<String> = Vec::new();
    let mut image_captions = vec![Vec::new(); data.images.len()];
    for (r, &img) in data.records.iter().zip(&data.record_image) {
        if lang.is_some_and(|l| l != r.language) {
            continue;
        }
        let k = match texts.iter().position(|t| *t == r.caption) {
            Some(k) => k,
            None => {
                texts.push(r.caption.clone());
                texts.len() - 1
            }
        };
        if !image_captions[img].contains(&k) {
            image_captions[img].push(k);
        }
    }
    let keep: Vec<usize> = (0..data.images.len()).filter(|&i| !image_captions[i].is_empty()).collect();
    if keep.is_empty() {
        return Err(Error::Data("no captions to retrieve".into()));
    }
    let images: Vec<&Raster> = keep.iter().map(|&i| &data.images[i]).collect();
    let caps: Vec<Vec<usize>> = keep.iter().map(|&i| image_captions[i].clone()).collect();
    let img = embed_images(model, &images)?;
    let txt = embed_texts(model, vocab, &texts)?;
    let report = retrieval_eval(&img, &txt, &caps, ks)?;
    let mut metrics = MetricsReport::new("retrieval", dataset, lang.map_or("all", |l| l.as_str()));
    for (k, v) in &report.image_to_text.recall {
        metrics = metrics.with(&format!("i2t_r@{k}"), *v);
    }
    for (k, v) in &report.text_to_image.recall {
        metrics = metrics.with(&format!("t2i_r@{k}"), *v);
    }
    metrics = metrics
        .with("num_images", images.len() as f64)
        .with("num_texts", texts.len() as f64);
    Ok((report, metrics))
}

/// Gallery over every image of `data`, with image references as ids.
pub fn build_gallery(model: &DualEncoder, data: &LoadedPairs) -> Result<GalleryIndex> {
    let images: Vec<&Raster> = data.images.iter().collect();
    GalleryIndex::new(data.image_refs.clone(), &model.encode_images(&images)?)
}

pub fn embed_image_file(model: &DualEncoder, path: &Path) -> Result<ndarray::Array1<f64>> {
    let side = model.vision.cfg.image_size as u32;
    let img = Raster::load(path)?;
    let img = if img.dims() == (side, side) { img } else { resize_for_store(&img, side, 1)? };
    Ok(model.encode_images(&[&img])?.row(0).to_owned())
}

pub fn embed_text(model: &DualEncoder, vocab: &Vocabulary, text: &str) -> Result<ndarray::Array1<f64>> {
    let seq = vocab.encode(text, model.text.cfg.max_len);
    Ok(model.encode_texts(&[&seq])?.row(0).to_owned())
}
