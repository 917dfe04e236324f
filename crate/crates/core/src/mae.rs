//! Masked-autoencoder pre-training of the vision encoder.
//!
//! The encoder sees only the kept patches. A lighter decoder receives the
//! encoded tokens plus one shared mask token per hidden patch and regresses
//! the hidden patches' pixels; the loss is the MSE over masked patches only.

use std::io::Write;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, Phase};
use crate::encoders::{VisionEncoder, VisionEncoderConfig, VISION_PREFIX};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Transformer, INIT_STD};
use crate::optim::{AdamW, Schedule};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::raster::Raster;

pub const DECODER_PREFIX: &str = "decoder.";
const PIX_NORM_EPS: f64 = 1e-6;

/// Which patches of one image are visible to the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub num_patches: usize,
    /// Ascending patch indices fed to the encoder.
    pub kept: Vec<usize>,
    /// Ascending patch indices the decoder must reconstruct.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.num_patches != num_patches {
            return Err(Error::Shape(format!(
                "mask plan covers {} patches, image has {num_patches}",
                self.num_patches
            )));
        }
        let mut seen = vec![false; num_patches];
        for &i in self.kept.iter().chain(&self.masked) {
            if i >= num_patches || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Shape(format!("mask plan index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Shape("mask plan leaves patches unassigned".into()));
        }
        if self.kept.is_empty() {
            return Err(Error::Shape("mask plan keeps no patches".into()));
        }
        Ok(())
    }
}

/// Kept count for `num_patches` at `ratio`: `floor(L * (1 - ratio))`.
pub fn kept_count(num_patches: usize, ratio: f64) -> usize {
    // The tolerance keeps exact products such as 10 * (1 - 0.9) from rounding down.
    (num_patches as f64 * (1.0 - ratio) + 1e-9).floor() as usize
}

pub fn sample_mask<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let keep = kept_count(num_patches, ratio);
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} leaves no visible patch out of {num_patches}"
        )));
    }
    let mut perm: Vec<usize> = (0..num_patches).collect();
    perm.shuffle(rng);
    let mut kept = perm[..keep].to_vec();
    let mut masked = perm[keep..].to_vec();
    kept.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        num_patches,
        kept,
        masked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub epochs: u64,
    pub steps: Option<u64>,
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    /// Defaults to half the encoder width.
    pub decoder_width: Option<usize>,
    pub decoder_heads: usize,
    /// Regress per-patch standardized pixels instead of raw values.
    pub norm_pix_loss: bool,
    pub seed: u64,
}

impl MaeConfig {
    pub fn full_scale() -> Self {
        Self {
            optimizer: "adamw".into(),
            learning_rate: 1.5e-3,
            weight_decay: 0.5,
            batch_size: 40_960,
            warmup_steps: 1000,
            epochs: 3,
            steps: None,
            mask_ratio: 0.75,
            decoder_layers: 4,
            decoder_width: None,
            decoder_heads: 4,
            norm_pix_loss: false,
            seed: 0,
        }
    }

    pub fn decoder_width_for(&self, encoder_width: usize) -> usize {
        self.decoder_width.unwrap_or(encoder_width / 2)
    }

    pub fn validate(&self, vision: &VisionEncoderConfig) -> Result<()> {
        if !self.optimizer.eq_ignore_ascii_case("adamw") {
            return Err(Error::Config(format!("unsupported optimizer `{}`", self.optimizer)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if kept_count(vision.num_patches(), self.mask_ratio) == 0 {
            return Err(Error::Config(format!(
                "mask_ratio {} keeps no patch of {}",
                self.mask_ratio,
                vision.num_patches()
            )));
        }
        let w = self.decoder_width_for(vision.width);
        if w == 0 || self.decoder_heads == 0 || w % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {w} not divisible by {} heads",
                self.decoder_heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, num_images: usize) -> u64 {
        self.steps
            .unwrap_or(self.epochs * num_images.div_ceil(self.batch_size).max(1) as u64)
    }
}

pub struct MaeDecoder {
    embed: Linear,
    mask_token: ParamId,
    positional: ParamId,
    transformer: Transformer,
    norm: LayerNorm,
    pred: Linear,
}

pub struct MaeModel {
    pub encoder: VisionEncoder,
    pub decoder: MaeDecoder,
    pub store: ParamStore,
    pub cfg: MaeConfig,
}

impl MaeModel {
    pub fn new<R: Rng + ?Sized>(vision: VisionEncoderConfig, cfg: MaeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(&vision)?;
        let mut store = ParamStore::new();
        let encoder = VisionEncoder::new(vision, &mut store, rng)?;
        let vc = &encoder.cfg;
        let dw = cfg.decoder_width_for(vc.width);
        let p = DECODER_PREFIX;
        let decoder = MaeDecoder {
            embed: Linear::new(&mut store, &format!("{p}embed"), vc.width, dw, true, (vc.width as f64).powf(-0.5), rng),
            mask_token: store.add(format!("{p}mask_token"), trunc_normal(rng, 1, dw, INIT_STD), false),
            positional: store.add(format!("{p}positional"), trunc_normal(rng, vc.num_patches() + 1, dw, INIT_STD), false),
            transformer: Transformer::new(&mut store, &format!("{p}blocks"), dw, cfg.decoder_layers, cfg.decoder_heads, rng),
            norm: LayerNorm::new(&mut store, &format!("{p}norm"), dw),
            pred: Linear::new(&mut store, &format!("{p}pred"), dw, vc.patch_dim(), true, (dw as f64).powf(-0.5), rng),
        };
        Ok(Self {
            encoder,
            decoder,
            store,
            cfg,
        })
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({ "vision": self.encoder.cfg, "mae": self.cfg })
    }

    /// Full training state, decoder included.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(Phase::Mae, self.config_echo(), self.store.export_prefix(""));
        ck.step = step;
        ck.seed = self.cfg.seed;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_phase(Phase::Mae)?;
        let vision: VisionEncoderConfig = serde_json::from_value(
            ck.config.get("vision").cloned().ok_or_else(|| Error::Checkpoint("missing vision config".into()))?,
        )?;
        let cfg: MaeConfig = serde_json::from_value(
            ck.config.get("mae").cloned().ok_or_else(|| Error::Checkpoint("missing mae config".into()))?,
        )?;
        let mut model = Self::new(vision, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.store.load_named("", &ck.tensors)?;
        Ok(model)
    }

    /// Encoder weights only, for the contrastive phase.
    pub fn export_encoder(&self, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(
            Phase::MaeExport,
            serde_json::json!({ "vision": self.encoder.cfg }),
            self.store.export_prefix(VISION_PREFIX),
        );
        ck.step = step;
        ck.seed = self.cfg.seed;
        ck
    }

    /// Pixel targets per patch, standardized per patch when `norm_pix_loss` is set.
    pub fn targets(&self, patches: &Array2<f64>) -> Array2<f64> {
        let mut t = patches.clone();
        if self.cfg.norm_pix_loss {
            for mut row in t.outer_iter_mut() {
                let n = row.len() as f64;
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                row.mapv_inplace(|v| (v - mean) / (var + PIX_NORM_EPS).sqrt());
            }
        }
        t
    }

    /// Decoder predictions for every patch `[batch * L, patch_dim]` and the loss.
    pub fn forward(&self, g: &mut Graph, images: &[&Raster], plans: &[MaskPlan]) -> Result<MaeForward> {
        if images.len() != plans.len() || images.is_empty() {
            return Err(Error::Shape(format!("{} images but {} mask plans", images.len(), plans.len())));
        }
        let (patches, grid) = self.encoder.patchify_batch(images)?;
        if grid != self.encoder.cfg.grid() {
            return Err(Error::Shape(format!(
                "MAE expects {}px images, got a {grid}x{grid} patch grid",
                self.encoder.cfg.image_size
            )));
        }
        let l = grid * grid;
        for p in plans {
            p.validate(l)?;
        }
        let kept = plans[0].kept.len();
        if plans.iter().any(|p| p.kept.len() != kept) {
            return Err(Error::Shape("mask plans in a batch must keep the same count".into()));
        }
        let b = images.len();
        let mut visible = Array2::zeros((b * kept, patches.ncols()));
        let mut positions = Vec::with_capacity(b * kept);
        for (i, plan) in plans.iter().enumerate() {
            for (j, &p) in plan.kept.iter().enumerate() {
                visible.row_mut(i * kept + j).assign(&patches.row(i * l + p));
                positions.push(p);
            }
        }
        let enc = self.encoder.encode_tokens(g, &self.store, visible, &positions, grid, kept)?;
        let d = self.decoder.embed.forward(g, &self.store, enc);
        let mask = g.param(&self.store, self.decoder.mask_token);
        let pool = g.concat(d, mask);
        let mask_row = b * (kept + 1);
        let mut order = Vec::with_capacity(b * (l + 1));
        for (i, plan) in plans.iter().enumerate() {
            let base = i * (kept + 1);
            order.push(base);
            let mut slot = vec![mask_row; l];
            for (j, &p) in plan.kept.iter().enumerate() {
                slot[p] = base + 1 + j;
            }
            order.extend(slot);
        }
        let x = g.gather(pool, order);
        let pos_table = g.param(&self.store, self.decoder.positional);
        let pos = g.gather(pos_table, (0..b).flat_map(|_| 0..=l).collect());
        let x = g.add(x, pos);
        let x = self.decoder.transformer.forward(g, &self.store, x, l + 1, false);
        let x = self.decoder.norm.forward(g, &self.store, x);
        let x = g.gather(x, (0..b).flat_map(|i| (1..=l).map(move |p| i * (l + 1) + p)).collect());
        let pred = self.decoder.pred.forward(g, &self.store, x);
        let masked_rows: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.masked.iter().map(move |&m| i * l + m))
            .collect();
        let targets = self.targets(&patches);
        let loss = if masked_rows.is_empty() {
            let zero = g.constant(Array2::zeros((1, 1)));
            g.scale(zero, 0.0)
        } else {
            let picked = g.gather(pred, masked_rows.clone());
            let mut t = Array2::zeros((masked_rows.len(), targets.ncols()));
            for (r, &m) in masked_rows.iter().enumerate() {
                t.row_mut(r).assign(&targets.row(m));
            }
            g.mse(picked, t)
        };
        Ok(MaeForward {
            pred,
            loss,
            targets,
            masked_rows,
        })
    }
}

pub struct MaeForward {
    pub pred: Var,
    pub loss: Var,
    pub targets: Array2<f64>,
    pub masked_rows: Vec<usize>,
}

/// Mean squared error over the listed patch rows only.
pub fn masked_mse(pred: &Array2<f64>, target: &Array2<f64>, rows: &[usize]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &r in rows {
        let d = &pred.slice(s![r, ..]) - &target.slice(s![r, ..]);
        total += d.dot(&d);
    }
    Ok(total / (rows.len() * pred.ncols()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn mae_step(
    model: &mut MaeModel,
    opt: &mut AdamW,
    images: &[&Raster],
    plans: &[MaskPlan],
    lr: f64,
) -> Result<MaeStepMetrics> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, images, plans)?;
    let loss = g.scalar(fwd.loss);
    let step = opt.steps_taken();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("reconstruction loss = {loss}"),
        });
    }
    let grads = g.backward(fwd.loss);
    let grad_norm = grads.global_norm();
    opt.update(&mut model.store, &grads, lr)?;
    Ok(MaeStepMetrics {
        step,
        loss,
        lr,
        grad_norm,
    })
}

/// Reconstruction loss of `images` under fixed masks, without updating anything.
pub fn evaluate_loss(model: &MaeModel, images: &[&Raster], plans: &[MaskPlan]) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, images, plans)?;
    Ok(g.scalar(fwd.loss))
}

/// MAE pre-training over `images`; batches cycle through a per-epoch shuffle
/// and every step draws fresh masks. Step metrics go to `log` as JSON lines.
pub fn pretrain_mae(model: &mut MaeModel, images: &[Raster], mut log: Option<&mut dyn Write>) -> Result<Vec<MaeStepMetrics>> {
    if images.is_empty() {
        return Err(Error::Data("MAE pre-training needs at least one image".into()));
    }
    let cfg = model.cfg.clone();
    let total = cfg.total_steps(images.len());
    let schedule = Schedule {
        peak_lr: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        total_steps: total,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let batch = cfg.batch_size.min(images.len());
    let mut perm: Vec<usize> = Vec::new();
    let mut pos = images.len();
    let mut opt = AdamW::new(cfg.weight_decay);
    let l = model.encoder.cfg.num_patches();
    let mut out = Vec::with_capacity(total as usize);
    for step in 0..total {
        if pos + batch > images.len() {
            perm = (0..images.len()).collect();
            perm.shuffle(&mut order_rng);
            pos = 0;
        }
        let idx = &perm[pos..pos + batch];
        pos += batch;
        let imgs: Vec<&Raster> = idx.iter().map(|&i| &images[i]).collect();
        let plans = (0..batch)
            .map(|_| sample_mask(l, cfg.mask_ratio, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let m = mae_step(model, &mut opt, &imgs, &plans, schedule.lr(step))?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (VisionEncoderConfig, MaeConfig) {
        let v = VisionEncoderConfig {
            patch_size: 4,
            image_size: 8,
            local_size: 4,
            width: 8,
            layers: 1,
            heads: 2,
            embed_dim: 8,
        };
        let mut m = MaeConfig::full_scale();
        m.decoder_layers = 1;
        m.decoder_heads = 2;
        m.batch_size = 2;
        (v, m)
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_mask(49, 0.75, &mut rng).unwrap();
        assert_eq!(p.kept.len(), 12);
        assert_eq!(p.masked.len(), 37);
        p.validate(49).unwrap();
        assert_eq!(kept_count(10, 0.9), 1);
        assert_eq!(sample_mask(16, 0.0, &mut rng).unwrap().masked.len(), 0);
        assert!(sample_mask(3, 0.75, &mut rng).is_err());
        assert!(sample_mask(16, 1.0, &mut rng).is_err());
    }

    #[test]
    fn plan_validation() {
        let p = MaskPlan {
            num_patches: 4,
            kept: vec![0, 1],
            masked: vec![1, 3],
        };
        assert!(p.validate(4).is_err());
        let p = MaskPlan {
            num_patches: 4,
            kept: vec![0],
            masked: vec![1, 2, 3],
        };
        p.validate(4).unwrap();
        assert!(p.validate(9).is_err());
    }

    #[test]
    fn masked_mse_ignores_visible_rows() {
        let target = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let mut pred = target.clone();
        assert_eq!(masked_mse(&pred, &target, &[1, 2]).unwrap(), 0.0);
        pred.row_mut(0).fill(100.0);
        assert_eq!(masked_mse(&pred, &target, &[1, 2]).unwrap(), 0.0);
        assert!(masked_mse(&pred, &target, &[0]).unwrap() > 0.0);
    }

    #[test]
    fn graph_loss_matches_masked_mse() {
        let (v, m) = tiny();
        let model = MaeModel::new(v, m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let imgs: Vec<Raster> = (0..2)
            .map(|k| Raster::from_fn(8, 8, move |x, y| [(x + k) as f32 / 9.0, y as f32 / 8.0, 0.5]))
            .collect();
        let refs: Vec<&Raster> = imgs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plans: Vec<MaskPlan> = (0..2).map(|_| sample_mask(4, 0.5, &mut rng).unwrap()).collect();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &refs, &plans).unwrap();
        let want = masked_mse(g.value(f.pred), &f.targets, &f.masked_rows).unwrap();
        assert!((g.scalar(f.loss) - want).abs() < 1e-12);
        let bad = vec![plans[0].clone(), sample_mask(4, 0.25, &mut rng).unwrap()];
        assert!(model.forward(&mut Graph::new(), &refs, &bad).is_err());
    }

    #[test]
    fn export_has_only_encoder_tensors() {
        let (v, m) = tiny();
        let model = MaeModel::new(v, m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = model.export_encoder(7);
        assert_eq!(ck.phase, Phase::MaeExport);
        assert!(ck.tensors.iter().all(|(n, _)| n.starts_with(VISION_PREFIX)));
        assert!(!ck.tensors.is_empty());
        let full = model.to_checkpoint(7);
        assert!(full.tensors.iter().any(|(n, _)| n.starts_with(DECODER_PREFIX)));
        let back = MaeModel::from_checkpoint(&full).unwrap();
        assert_eq!(back.store.export_prefix(""), model.store.export_prefix(""));
    }

    #[test]
    fn norm_pix_targets_are_standardized() {
        let (v, mut m) = tiny();
        m.norm_pix_loss = true;
        let model = MaeModel::new(v, m, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = Array2::from_shape_fn((2, 6), |(i, j)| (i + j * j) as f64);
        let t = model.targets(&p);
        for row in t.outer_iter() {
            assert!(row.sum().abs() < 1e-9);
        }
    }
}
