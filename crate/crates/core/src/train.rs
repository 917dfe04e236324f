//! Contrastive fine-tuning of the dual encoder.
//!
//! The logits of the symmetric InfoNCE objective are `cos(x_i, y_j) / tau`,
//! with `tau` inside the exponent. `tau` is learned through
//! `log_inv_tau = ln(1/tau)` and floored after every update.

use std::io::Write;
use std::sync::mpsc;
use std::thread;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::checkpoint::{Checkpoint, Phase};
use crate::encoders::{TextEncoder, TextEncoderConfig, VisionEncoder, VisionEncoderConfig, TEXT_PREFIX, VISION_PREFIX};
use crate::error::{Error, Result};
use crate::optim::{AdamW, Schedule};
use crate::params::{ParamId, ParamStore};
use crate::raster::{CropBox, Raster};
use crate::tokenizer::TokenSequence;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_FLOOR: f64 = 0.01;
const TEMPERATURE_PARAM: &str = "logit.log_inv_tau";
const NORM_EPS: f64 = 1e-12;

/// Cosine similarities between two feature sets, `[n, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn transposed(&self) -> Self {
        Self {
            values: self.values.t().to_owned(),
        }
    }
}

/// Row-normalize, rejecting zero or non-finite rows.
pub fn normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature row {i} is not finite")));
        }
        let n = row.dot(&row).sqrt();
        if n <= NORM_EPS {
            return Err(Error::Data(format!("feature row {i} has zero norm")));
        }
        row /= n;
    }
    Ok(out)
}

pub fn cosine_similarity_matrix(x: &Array2<f64>, y: &Array2<f64>) -> Result<SimilarityMatrix> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!("feature widths {} and {} differ", x.ncols(), y.ncols())));
    }
    let xn = normalize_rows(x)?;
    let yn = normalize_rows(y)?;
    Ok(SimilarityMatrix {
        values: xn.dot(&yn.t()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// `-(1/N) sum_i log softmax_j(sim(i, j) / tau)[i]`; rows are images.
pub fn info_nce(sim: &SimilarityMatrix, tau: f64, direction: Direction) -> Result<f64> {
    let (n, m) = sim.values.dim();
    if n != m {
        return Err(Error::Shape(format!("InfoNCE needs a square matrix, got {n}x{m}")));
    }
    if n == 0 {
        return Err(Error::Shape("InfoNCE needs at least one pair".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let logits = match direction {
        Direction::ImageToText => sim.values.clone(),
        Direction::TextToImage => sim.values.t().to_owned(),
    } / tau;
    let mut total = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / n as f64)
}

/// `(L_I2T + L_T2I) / 2` over aligned feature rows.
pub fn contrastive_loss(img: &Array2<f64>, txt: &Array2<f64>, tau: f64) -> Result<f64> {
    if img.nrows() != txt.nrows() {
        return Err(Error::Shape(format!("{} image features vs {} text features", img.nrows(), txt.nrows())));
    }
    let sim = cosine_similarity_matrix(img, txt)?;
    Ok(0.5 * (info_nce(&sim, tau, Direction::ImageToText)? + info_nce(&sim, tau, Direction::TextToImage)?))
}

/// Learnable temperature with a hard lower bound.
#[derive(Debug, Clone)]
pub struct Temperature {
    id: ParamId,
    tau: f64,
    floor: f64,
}

impl Temperature {
    pub fn new(store: &mut ParamStore, tau_init: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0) || tau_init < floor {
            return Err(Error::Config(format!("temperature init {tau_init} must be at least the floor {floor}")));
        }
        let id = store.add(TEMPERATURE_PARAM, Array2::from_elem((1, 1), (1.0 / tau_init).ln()), false);
        Ok(Self {
            id,
            tau: tau_init,
            floor,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn param(&self) -> ParamId {
        self.id
    }

    pub fn log_inv_tau(&self, store: &ParamStore) -> f64 {
        store.value(self.id)[[0, 0]]
    }

    /// Read back the learnable value after an update and enforce `tau >= floor`.
    pub fn clamp(&mut self, store: &mut ParamStore) {
        let s = self.log_inv_tau(store);
        let tau = (-s).exp();
        if tau < self.floor || !tau.is_finite() {
            self.tau = self.floor;
            store.value_mut(self.id)[[0, 0]] = -self.floor.ln();
        } else {
            self.tau = tau;
        }
    }

    /// Set the temperature directly, e.g. when restoring a checkpoint.
    pub fn set(&mut self, store: &mut ParamStore, tau: f64) -> Result<()> {
        if !(tau >= self.floor) {
            return Err(Error::Checkpoint(format!("temperature {tau} below floor {}", self.floor)));
        }
        self.tau = tau;
        store.value_mut(self.id)[[0, 0]] = -tau.ln();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub global_size: u32,
    pub local_size: u32,
    pub num_local: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl CropConfig {
    pub fn new(global_size: u32, local_size: u32, num_local: usize) -> Self {
        Self {
            global_size,
            local_size,
            num_local,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    pub fn full_scale() -> Self {
        Self::new(224, 96, 1)
    }
}

#[derive(Debug, Clone)]
pub struct CropSet {
    pub global_view: Raster,
    pub local_views: Vec<Raster>,
    pub global_box: CropBox,
    pub local_boxes: Vec<CropBox>,
}

/// Random-resized-crop geometry: area fraction from `scale`, aspect ratio
/// log-uniform in `ratio`; falls back to the full image after ten misses.
pub fn random_resized_box<R: Rng + ?Sized>(rng: &mut R, w: u32, h: u32, scale: (f64, f64), ratio: (f64, f64)) -> CropBox {
    let area = (w * h) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as u32;
        let ch = (target / aspect).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            return CropBox {
                x,
                y,
                width: cw,
                height: ch,
            };
        }
    }
    CropBox {
        x: 0,
        y: 0,
        width: w,
        height: h,
    }
}

pub fn make_crops<R: Rng + ?Sized>(image: &Raster, cfg: &CropConfig, rng: &mut R) -> Result<CropSet> {
    let (w, h) = image.dims();
    if w.min(h) < cfg.local_size {
        return Err(Error::Data(format!("{w}x{h} image is smaller than the {}px local view", cfg.local_size)));
    }
    let global_box = random_resized_box(rng, w, h, cfg.global_scale, cfg.ratio);
    let global_view = image.crop_resize(global_box, cfg.global_size);
    let local_boxes: Vec<CropBox> = (0..cfg.num_local)
        .map(|_| random_resized_box(rng, w, h, cfg.local_scale, cfg.ratio))
        .collect();
    let local_views = local_boxes.iter().map(|b| image.crop_resize(*b, cfg.local_size)).collect();
    Ok(CropSet {
        global_view,
        local_views,
        global_box,
        local_boxes,
    })
}

/// Patch tokens per training step relative to global-only training,
/// classification tokens included.
pub fn multicrop_token_ratio(vision: &VisionEncoderConfig, num_local: usize) -> f64 {
    let global = vision.tokens_for(vision.image_size);
    let local = vision.tokens_for(vision.local_size);
    (global + num_local * local) as f64 / global as f64
}

/// Image tower, text tower and temperature over one parameter store.
pub struct DualEncoder {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub store: ParamStore,
    pub temperature: Temperature,
}

impl DualEncoder {
    pub fn new<R: Rng + ?Sized>(vision: VisionEncoderConfig, text: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        if vision.embed_dim != text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed_dim {} != text embed_dim {}",
                vision.embed_dim, text.embed_dim
            )));
        }
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(vision, &mut store, rng)?;
        let text = TextEncoder::new(text, &mut store, rng)?;
        let temperature = Temperature::new(&mut store, TAU_INIT, TAU_FLOOR)?;
        Ok(Self {
            vision,
            text,
            store,
            temperature,
        })
    }

    /// Fresh model whose vision tower comes from an MAE export.
    pub fn from_mae_export<R: Rng + ?Sized>(export: &Checkpoint, text: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        export.expect_phase(Phase::MaeExport)?;
        let vision: VisionEncoderConfig = serde_json::from_value(
            export
                .config
                .get("vision")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("export lacks a vision config".into()))?,
        )?;
        let mut model = Self::new(vision, text, rng)?;
        model.store.load_named(VISION_PREFIX, &export.tensors)?;
        Ok(model)
    }

    pub fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "vision": self.vision.cfg,
            "text": self.text.cfg,
            "tau_floor": self.temperature.floor(),
        })
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let mut tensors = self.store.export_prefix(VISION_PREFIX);
        tensors.extend(self.store.export_prefix(TEXT_PREFIX));
        tensors.extend(self.store.export_prefix(TEMPERATURE_PARAM));
        let mut ck = Checkpoint::new(Phase::Contrastive, self.config_echo(), tensors);
        ck.step = step;
        ck.seed = seed;
        ck.temperature = Some(self.temperature.tau());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_phase(Phase::Contrastive)?;
        let get = |k: &str| {
            ck.config
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint config lacks `{k}`")))
        };
        let vision: VisionEncoderConfig = serde_json::from_value(get("vision")?)?;
        let text: TextEncoderConfig = serde_json::from_value(get("text")?)?;
        // Values are overwritten below; the seed only shapes the initial store.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(vision, text, &mut rng)?;
        if let Some((name, _)) = ck.tensors.iter().find(|(n, _)| {
            !(n.starts_with(VISION_PREFIX) || n.starts_with(TEXT_PREFIX) || n.starts_with(TEMPERATURE_PARAM))
        }) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        for prefix in [VISION_PREFIX, TEXT_PREFIX, TEMPERATURE_PARAM] {
            let part: Vec<_> = ck.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect();
            model.store.load_named(prefix, &part)?;
        }
        let tau = ck.temperature.ok_or_else(|| Error::Checkpoint("contrastive checkpoint lacks a temperature".into()))?;
        if !(tau >= model.temperature.floor()) {
            return Err(Error::Checkpoint(format!("temperature {tau} below floor {}", model.temperature.floor())));
        }
        model.temperature.tau = tau;
        Ok(model)
    }

    /// Un-normalized image features, evaluated in chunks.
    pub fn encode_images(&self, images: &[&Raster]) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let v = self.vision.forward(&mut g, &self.store, chunk)?;
            rows.push(g.value(v).clone());
        }
        stack(rows)
    }

    pub fn encode_texts(&self, seqs: &[&TokenSequence]) -> Result<Array2<f64>> {
        let mut rows = Vec::new();
        for chunk in seqs.chunks(128) {
            let mut g = Graph::new();
            let v = self.text.forward(&mut g, &self.store, chunk)?;
            rows.push(g.value(v).clone());
        }
        stack(rows)
    }
}

fn stack(rows: Vec<Array2<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Symmetric InfoNCE on the tape. With `i2t_only`, only the image-to-text term.
pub fn contrastive_loss_graph(g: &mut Graph, img: Var, txt: Var, log_inv_tau: Var, i2t_only: bool) -> Result<Var> {
    for (what, v) in [("image", img), ("text", txt)] {
        if g.value(v).outer_iter().any(|r| !(r.dot(&r).sqrt() > NORM_EPS)) {
            return Err(Error::Data(format!("{what} feature with zero or non-finite norm")));
        }
    }
    let img = g.l2_normalize(img);
    let txt = g.l2_normalize(txt);
    let sim = g.matmul_t(img, txt);
    let logits = g.scale_exp(sim, log_inv_tau);
    let i2t = g.diag_cross_entropy(logits);
    if i2t_only {
        return Ok(i2t);
    }
    let lt = g.transpose(logits);
    let t2i = g.diag_cross_entropy(lt);
    Ok(g.mean(vec![i2t, t2i]))
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub crops: CropSet,
    pub tokens: TokenSequence,
}

/// Mean over views of the contrastive loss; every view pairs with the same captions.
pub fn total_loss(model: &DualEncoder, batch: &[TrainItem], local_i2t_only: bool) -> Result<(Graph, Var)> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("contrastive batch needs at least 2 pairs".into()));
    }
    let num_local = batch[0].crops.local_views.len();
    if batch.iter().any(|b| b.crops.local_views.len() != num_local) {
        return Err(Error::Shape("items disagree on the number of local views".into()));
    }
    let mut g = Graph::new();
    let seqs: Vec<&TokenSequence> = batch.iter().map(|b| &b.tokens).collect();
    let txt = model.text.forward(&mut g, &model.store, &seqs)?;
    let s = g.param(&model.store, model.temperature.param());
    let globals: Vec<&Raster> = batch.iter().map(|b| &b.crops.global_view).collect();
    let img = model.vision.forward(&mut g, &model.store, &globals)?;
    let mut views = vec![contrastive_loss_graph(&mut g, img, txt, s, false)?];
    for l in 0..num_local {
        let locals: Vec<&Raster> = batch.iter().map(|b| &b.crops.local_views[l]).collect();
        let img = model.vision.forward(&mut g, &model.store, &locals)?;
        views.push(contrastive_loss_graph(&mut g, img, txt, s, local_i2t_only)?);
    }
    let loss = g.mean(views);
    Ok((g, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss, one AdamW update at `lr`, then the temperature clamp.
pub fn train_step(
    model: &mut DualEncoder,
    opt: &mut AdamW,
    batch: &[TrainItem],
    lr: f64,
    local_i2t_only: bool,
) -> Result<StepMetrics> {
    let (mut g, loss) = total_loss(model, batch, local_i2t_only)?;
    let value = g.scalar(loss);
    let step = opt.steps_taken();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("contrastive loss = {value}"),
        });
    }
    let grads: ParamGrads = g.backward(loss);
    let grad_norm = grads.global_norm();
    opt.update(&mut model.store, &grads, lr)?;
    model.temperature.clamp(&mut model.store);
    Ok(StepMetrics {
        step,
        loss: value,
        tau: model.temperature.tau(),
        lr,
        grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: String,
    pub warmup_steps: u64,
    pub epochs: u64,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<u64>,
    pub num_local_views: usize,
    pub local_i2t_only: bool,
    pub seed: u64,
    /// Data-preparation worker threads; 0 prepares batches inline, in order.
    pub workers: usize,
}

impl TrainConfig {
    /// Full-scale fine-tuning hyper-parameters.
    pub fn full_scale() -> Self {
        Self {
            optimizer: "adamw".into(),
            learning_rate: 1.2e-3,
            weight_decay: 0.2,
            batch_size: 65_600,
            schedule: "cosine".into(),
            warmup_steps: 2000,
            epochs: 32,
            steps: None,
            num_local_views: 1,
            local_i2t_only: false,
            seed: 0,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.optimizer.eq_ignore_ascii_case("adamw") {
            return Err(Error::Config(format!("unsupported optimizer `{}`", self.optimizer)));
        }
        let schedule = self.schedule.to_ascii_lowercase().replace(['_', '-'], " ");
        if schedule != "cosine" && schedule != "cosine decay" {
            return Err(Error::Config(format!("unsupported schedule `{}`", self.schedule)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for contrastive learning".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, num_items: usize) -> u64 {
        self.steps
            .unwrap_or(self.epochs * (num_items / self.batch_size).max(1) as u64)
    }
}

/// Decoded images plus the (image index, caption tokens) pairs that reference them.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub images: Vec<Raster>,
    pub pairs: Vec<(usize, TokenSequence)>,
}

struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let batch = batch.min(n);
        if self.perm.len() != n || self.pos + batch > n {
            self.perm = (0..n).collect();
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

fn crop_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6372_6f70_7300_0000);
    rng.set_stream(step);
    rng
}

fn build_batch(data: &PairDataset, indices: &[usize], crops: &CropConfig, seed: u64, step: u64) -> Result<Vec<TrainItem>> {
    let mut rng = crop_rng(seed, step);
    indices
        .iter()
        .map(|&i| {
            let (img, tokens) = &data.pairs[i];
            Ok(TrainItem {
                crops: make_crops(&data.images[*img], crops, &mut rng)?,
                tokens: tokens.clone(),
            })
        })
        .collect()
}

/// Prepared batches in step order (inline) or arrival order (worker threads).
fn produce_batches<F>(data: &PairDataset, cfg: &TrainConfig, crops: &CropConfig, total: u64, mut consume: F) -> Result<()>
where
    F: FnMut(u64, Vec<TrainItem>) -> Result<()>,
{
    let mut order = BatchOrder::new(cfg.seed);
    let plan: Vec<Vec<usize>> = (0..total).map(|_| order.next(data.pairs.len(), cfg.batch_size)).collect();
    if cfg.workers == 0 {
        for (step, idx) in plan.iter().enumerate() {
            consume(step as u64, build_batch(data, idx, crops, cfg.seed, step as u64)?)?;
        }
        return Ok(());
    }
    let (tx, rx) = mpsc::sync_channel::<(u64, Result<Vec<TrainItem>>)>(cfg.workers * 2);
    thread::scope(|scope| {
        for w in 0..cfg.workers {
            let tx = tx.clone();
            let plan = &plan;
            scope.spawn(move || {
                for step in (w..plan.len()).step_by(cfg.workers) {
                    let batch = build_batch(data, &plan[step], crops, cfg.seed, step as u64);
                    if tx.send((step as u64, batch)).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (step, batch) in rx {
            consume(step, batch?)?;
        }
        Ok(())
    })
}

/// All step metrics of a finished run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Run the contrastive phase. Each step's metrics are appended to `log` as a JSON line.
pub fn train_contrastive(
    model: &mut DualEncoder,
    data: &PairDataset,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.pairs.len() < 2 {
        return Err(Error::Data("contrastive training needs at least 2 pairs".into()));
    }
    let crops = CropConfig::new(
        model.vision.cfg.image_size as u32,
        model.vision.cfg.local_size as u32,
        cfg.num_local_views,
    );
    let total = cfg.total_steps(data.pairs.len());
    let schedule = Schedule {
        peak_lr: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        total_steps: total,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut out = TrainLog::default();
    produce_batches(data, cfg, &crops, total, |_, batch| {
        let k = opt.steps_taken();
        let m = train_step(model, &mut opt, &batch, schedule.lr(k), cfg.local_i2t_only)?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        out.steps.push(m);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_reference_values() {
        let one = SimilarityMatrix { values: array![[0.3]] };
        assert_eq!(info_nce(&one, 0.07, Direction::ImageToText).unwrap(), 0.0);
        let eye = SimilarityMatrix { values: Array2::eye(2) };
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((info_nce(&eye, 1.0, Direction::ImageToText).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.31326).abs() < 1e-4);
        let flat = SimilarityMatrix {
            values: Array2::from_elem((5, 5), 0.4),
        };
        for tau in [0.01, 0.07, 1.0] {
            assert!((info_nce(&flat, tau, Direction::TextToImage).unwrap() - 5f64.ln()).abs() < 1e-9);
        }
        assert!(info_nce(&SimilarityMatrix { values: Array2::zeros((2, 3)) }, 1.0, Direction::ImageToText).is_err());
    }

    #[test]
    fn cosine_basics() {
        let eye = Array2::<f64>::eye(4);
        assert_eq!(cosine_similarity_matrix(&eye, &eye).unwrap().values, eye);
        let v = array![[1.0, -2.0, 3.0]];
        let neg = -&v;
        assert!((cosine_similarity_matrix(&v, &v).unwrap().values[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((cosine_similarity_matrix(&v, &neg).unwrap().values[[0, 0]] + 1.0).abs() < 1e-15);
        assert!(cosine_similarity_matrix(&v, &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn temperature_init_and_floor() {
        let mut store = ParamStore::new();
        let mut t = Temperature::new(&mut store, TAU_INIT, TAU_FLOOR).unwrap();
        assert_eq!(t.tau(), 0.07);
        store.value_mut(t.param())[[0, 0]] = 50.0;
        t.clamp(&mut store);
        assert_eq!(t.tau(), 0.01);
        assert!((-t.log_inv_tau(&store)).exp() >= 0.01);
        store.value_mut(t.param())[[0, 0]] = 2.0;
        t.clamp(&mut store);
        assert_eq!(t.tau(), (-2.0f64).exp());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut v = VisionEncoderConfig::desk();
        v.layers = 1;
        let t = TextEncoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            max_len: 8,
            vocab_size: 300,
            embed_dim: v.embed_dim,
        };
        let mut model = DualEncoder::new(v, t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        model.temperature.set(&mut model.store, 0.05).unwrap();
        let bytes = model.to_checkpoint(3, 1).to_bytes().unwrap();
        let back = DualEncoder::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.temperature.tau(), 0.05);
        for (id, e) in model.store.iter() {
            assert_eq!(&e.value, back.store.value(id), "{}", e.name);
        }
    }

    #[test]
    fn crops_geometry() {
        let img = Raster::from_fn(32, 32, |x, y| [x as f32 / 32.0, y as f32 / 32.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let none = make_crops(&img, &CropConfig::new(32, 16, 0), &mut rng).unwrap();
        assert!(none.local_views.is_empty());
        assert_eq!(none.global_view.dims(), (32, 32));
        let cfg = CropConfig::new(32, 16, 2);
        let a = make_crops(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_crops(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.global_box, b.global_box);
        assert_eq!(a.local_boxes, b.local_boxes);
        assert!(a.local_views.iter().all(|v| v.dims() == (16, 16)));
        for bx in &a.local_boxes {
            let frac = (bx.width * bx.height) as f64 / 1024.0;
            assert!(frac <= 0.5, "local crop covers {frac}");
        }
        let small = Raster::from_fn(12, 12, |_, _| [0.0; 3]);
        assert!(make_crops(&small, &cfg, &mut rng).is_err());
    }

    #[test]
    fn full_scale_crop_sizes() {
        let big = Raster::from_fn(256, 256, |_, _| [0.2; 3]);
        let set = make_crops(&big, &CropConfig::full_scale(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.global_view.dims(), (224, 224));
        assert_eq!(set.local_views.len(), 1);
        assert_eq!(set.local_views[0].dims(), (96, 96));
    }

    #[test]
    fn multicrop_overhead_at_full_geometry() {
        let r = multicrop_token_ratio(&VisionEncoderConfig::full_scale(), 1);
        assert!((r - 60.0 / 50.0).abs() < 1e-12);
        assert!(r <= 1.25);
    }

    #[test]
    fn train_config_checks() {
        let mut c = TrainConfig::full_scale();
        c.validate().unwrap();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::full_scale();
        c.optimizer = "sgd".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_order_is_epoch_permutation() {
        let mut o = BatchOrder::new(1);
        let mut epoch: Vec<usize> = (0..3).flat_map(|_| o.next(7, 2)).collect();
        epoch.sort();
        epoch.dedup();
        assert_eq!(epoch.len(), 6);
        let next = o.next(7, 2);
        assert_eq!(next.len(), 2);
    }
}
