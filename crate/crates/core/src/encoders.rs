//! The two towers: a causal text transformer read at `[EOS]` and a vision
//! transformer read at its classification token. Both end in a layer norm
//! and a bias-free projection into the shared embedding space.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Transformer, INIT_STD};
use crate::params::{trunc_normal, ParamStore};
use crate::raster::Raster;
use crate::tokenizer::{TokenSequence, DEFAULT_MAX_LEN, FULL_VOCAB_SIZE};

pub const TEXT_PREFIX: &str = "text.";
pub const VISION_PREFIX: &str = "vision.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl TextEncoderConfig {
    /// 12 layers, 512 wide, 8 heads, 76 tokens.
    pub fn full_scale() -> Self {
        Self {
            layers: 12,
            width: 512,
            heads: 8,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: FULL_VOCAB_SIZE,
            embed_dim: 512,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            max_len: 16,
            vocab_size,
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.layers, self.width, self.heads, self.max_len, self.vocab_size, self.embed_dim];
        if counts.contains(&0) {
            return Err(Error::Config("text encoder sizes must all be at least 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("text max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        self.vocab_size * w + self.max_len * w + Transformer::param_count(w, self.layers) + 2 * w + w * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub patch_size: usize,
    pub image_size: usize,
    /// Side of the low-resolution multi-crop views.
    pub local_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl VisionEncoderConfig {
    /// ViT-B/32 at 224px with 96px local views.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 32,
            image_size: 224,
            local_size: 96,
            width: 768,
            layers: 12,
            heads: 12,
            embed_dim: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            image_size: 32,
            local_size: 16,
            width: 64,
            layers: 2,
            heads: 4,
            embed_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.patch_size, self.image_size, self.local_size, self.width, self.layers, self.heads, self.embed_dim];
        if counts.contains(&0) {
            return Err(Error::Config("vision encoder sizes must all be at least 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.local_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "local_size {} not divisible by patch_size {}",
                self.local_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Tokens processed for one `side`-pixel view, classification token included.
    pub fn tokens_for(&self, side: usize) -> usize {
        let g = side / self.patch_size;
        g * g + 1
    }
}

pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    token_embedding: crate::params::ParamId,
    positional: crate::params::ParamId,
    transformer: Transformer,
    ln_final: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: TextEncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = TEXT_PREFIX;
        let w = cfg.width;
        let token_embedding = store.add(format!("{p}token_embedding"), trunc_normal(rng, cfg.vocab_size, w, INIT_STD), true);
        let positional = store.add(format!("{p}positional"), trunc_normal(rng, cfg.max_len, w, INIT_STD), false);
        let transformer = Transformer::new(store, &format!("{p}blocks"), w, cfg.layers, cfg.heads, rng);
        let ln_final = LayerNorm::new(store, &format!("{p}ln_final"), w);
        let proj = Linear::new(store, &format!("{p}proj"), w, cfg.embed_dim, false, INIT_STD, rng);
        Ok(Self {
            cfg,
            token_embedding,
            positional,
            transformer,
            ln_final,
            proj,
        })
    }

    /// Un-normalized embeddings `[batch, embed_dim]`, one row per sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[&TokenSequence]) -> Result<Var> {
        let t = self.cfg.max_len;
        if seqs.is_empty() {
            return Err(Error::Shape("empty text batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * t);
        let mut eos_rows = Vec::with_capacity(seqs.len());
        for (b, seq) in seqs.iter().enumerate() {
            if seq.ids.len() != t {
                return Err(Error::Shape(format!("token sequence length {} != max_len {t}", seq.ids.len())));
            }
            if seq.eos_position >= t {
                return Err(Error::Shape(format!("eos_position {} outside sequence", seq.eos_position)));
            }
            if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
                return Err(Error::Shape(format!("token id {bad} outside the {} embedding rows", self.cfg.vocab_size)));
            }
            ids.extend(seq.ids.iter().map(|&i| i as usize));
            eos_rows.push(b * t + seq.eos_position);
        }
        let table = g.param(store, self.token_embedding);
        let tok = g.gather(table, ids);
        let pos_table = g.param(store, self.positional);
        let pos = g.gather(pos_table, (0..seqs.len()).flat_map(|_| 0..t).collect());
        let x = g.add(tok, pos);
        let x = self.transformer.forward(g, store, x, t, true);
        let eos = g.gather(x, eos_rows);
        let eos = self.ln_final.forward(g, store, eos);
        Ok(self.proj.forward(g, store, eos))
    }
}

pub struct VisionEncoder {
    pub cfg: VisionEncoderConfig,
    patch_embed: Linear,
    class_token: crate::params::ParamId,
    positional: crate::params::ParamId,
    ln_pre: LayerNorm,
    transformer: Transformer,
    ln_post: LayerNorm,
    proj: Linear,
}

impl VisionEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: VisionEncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = VISION_PREFIX;
        let w = cfg.width;
        let patch_std = (cfg.patch_dim() as f64).powf(-0.5);
        let patch_embed = Linear::new(store, &format!("{p}patch_embed"), cfg.patch_dim(), w, true, patch_std, rng);
        let class_token = store.add(format!("{p}class_token"), trunc_normal(rng, 1, w, INIT_STD), false);
        let positional = store.add(format!("{p}positional"), trunc_normal(rng, cfg.num_patches() + 1, w, INIT_STD), false);
        let ln_pre = LayerNorm::new(store, &format!("{p}ln_pre"), w);
        let transformer = Transformer::new(store, &format!("{p}blocks"), w, cfg.layers, cfg.heads, rng);
        let ln_post = LayerNorm::new(store, &format!("{p}ln_post"), w);
        let proj = Linear::new(store, &format!("{p}proj"), w, cfg.embed_dim, false, INIT_STD, rng);
        Ok(Self {
            cfg,
            patch_embed,
            class_token,
            positional,
            ln_pre,
            transformer,
            ln_post,
            proj,
        })
    }

    /// Patch rows of same-sized square images stacked batch-major, and the grid side.
    pub fn patchify_batch(&self, images: &[&Raster]) -> Result<(Array2<f64>, usize)> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (w, h) = first.dims();
        if w != h {
            return Err(Error::Shape(format!("image must be square, got {w}x{h}")));
        }
        if w as usize % self.cfg.patch_size != 0 {
            return Err(Error::Shape(format!(
                "image side {w} not divisible by patch size {}",
                self.cfg.patch_size
            )));
        }
        let grid = w as usize / self.cfg.patch_size;
        let per = grid * grid;
        let mut out = Array2::zeros((images.len() * per, self.cfg.patch_dim()));
        for (b, img) in images.iter().enumerate() {
            if img.dims() != (w, h) {
                return Err(Error::Shape("images in a batch must share one size".into()));
            }
            let p = img.patchify(self.cfg.patch_size as u32)?;
            out.slice_mut(ndarray::s![b * per..(b + 1) * per, ..]).assign(&p);
        }
        Ok((out, grid))
    }

    /// Positional rows for the patch tokens of a `grid x grid` input,
    /// interpolated from the learned grid when the sizes differ.
    fn patch_positions(&self, g: &mut Graph, store: &ParamStore, grid: usize) -> Var {
        let table = g.param(store, self.positional);
        let learned = self.cfg.grid();
        let rows = g.gather(table, (1..=learned * learned).collect());
        if grid == learned {
            rows
        } else {
            let m = g.constant(interpolation_matrix(learned, grid));
            g.matmul(m, rows)
        }
    }

    /// Hidden states `[batch * (kept + 1), width]` after the final layer norm.
    /// `patches` holds `kept` rows per image; `positions[r]` is the grid index of row `r`.
    pub fn encode_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Array2<f64>,
        positions: &[usize],
        grid: usize,
        kept: usize,
    ) -> Result<Var> {
        let rows = patches.nrows();
        if kept == 0 || rows % kept != 0 || positions.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} patch rows, {} positions, {kept} per image",
                positions.len()
            )));
        }
        if positions.iter().any(|&p| p >= grid * grid) {
            return Err(Error::Shape("patch position outside the grid".into()));
        }
        let batch = rows / kept;
        let patches = g.constant(patches);
        let emb = self.patch_embed.forward(g, store, patches);
        let pos_rows = self.patch_positions(g, store, grid);
        let pos = g.gather(pos_rows, positions.to_vec());
        let emb = g.add(emb, pos);
        let table = g.param(store, self.positional);
        let cls_pos = g.gather(table, vec![0]);
        let cls = g.param(store, self.class_token);
        let cls = g.add(cls, cls_pos);
        let all = g.concat(cls, emb);
        let seq = kept + 1;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..kept).map(move |j| 1 + b * kept + j)))
            .collect();
        let x = g.gather(all, order);
        let x = self.ln_pre.forward(g, store, x);
        let x = self.transformer.forward(g, store, x, seq, false);
        Ok(self.ln_post.forward(g, store, x))
    }

    /// Un-normalized embeddings `[batch, embed_dim]` for square images whose
    /// side is a multiple of the patch size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&Raster]) -> Result<Var> {
        let (patches, grid) = self.patchify_batch(images)?;
        let per = grid * grid;
        let positions: Vec<usize> = (0..images.len()).flat_map(|_| 0..per).collect();
        let hidden = self.encode_tokens(g, store, patches, &positions, grid, per)?;
        let cls = g.gather(hidden, (0..images.len()).map(|b| b * (per + 1)).collect());
        Ok(self.proj.forward(g, store, cls))
    }
}

/// Bilinear (corner-aligned) resampling matrix from a `from x from` grid to a
/// `to x to` grid, shape `[to^2, from^2]`.
pub fn interpolation_matrix(from: usize, to: usize) -> Array2<f64> {
    let taps = |i: usize| -> [(usize, f64); 2] {
        let src = if to == 1 {
            (from - 1) as f64 / 2.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let i0 = (src.floor() as usize).min(from - 1);
        let i1 = (i0 + 1).min(from - 1);
        let frac = src - i0 as f64;
        [(i0, 1.0 - frac), (i1, frac)]
    };
    let mut m = Array2::zeros((to * to, from * from));
    for y in 0..to {
        for x in 0..to {
            for (sy, wy) in taps(y) {
                for (sx, wx) in taps(x) {
                    m[[y * to + x, sy * from + sx]] += wy * wx;
                }
            }
        }
    }
    m
}

/// Resample a `from x from` grid of vectors (rows in raster order) to `to x to`.
pub fn interpolate_pos_embed(pos: &Array2<f64>, from: usize, to: usize) -> Array2<f64> {
    assert_eq!(pos.nrows(), from * from, "grid rows mismatch");
    if from == to {
        return pos.clone();
    }
    interpolation_matrix(from, to).dot(pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = trunc_normal(&mut rng, 49, 5, 1.0);
        assert_eq!(interpolate_pos_embed(&pos, 7, 7), pos);
        let c = Array2::from_elem((49, 3), 0.37);
        for to in [1, 2, 3, 5, 9] {
            let out = interpolate_pos_embed(&c, 7, to);
            assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn interpolation_center_is_corner_mean() {
        let pos = array![[1.0], [2.0], [4.0], [8.0]];
        let out = interpolate_pos_embed(&pos, 2, 3);
        assert!((out[[4, 0]] - 15.0 / 4.0).abs() < 1e-15);
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[8, 0]], 8.0);
        // rows of the matrix are convex weights
        let m = interpolation_matrix(7, 3);
        for r in m.outer_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_counts() {
        let full = VisionEncoderConfig::full_scale();
        assert_eq!(full.tokens_for(224), 50);
        assert_eq!(full.tokens_for(96), 10);
        let desk = VisionEncoderConfig::desk();
        assert_eq!(desk.num_patches(), 16);
    }

    #[test]
    fn config_validation() {
        let mut c = VisionEncoderConfig::desk();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut t = TextEncoderConfig::desk(300);
        t.heads = 3;
        assert!(t.validate().is_err());
    }

    #[test]
    fn param_count_formula_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig::desk(300);
        TextEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), cfg.param_count());
    }

    #[test]
    fn vision_rejects_indivisible_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(VisionEncoderConfig::desk(), &mut store, &mut rng).unwrap();
        let img = Raster::from_fn(20, 20, |_, _| [0.5; 3]);
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &store, &[&img]).is_err());
        let img = Raster::from_fn(16, 16, |_, _| [0.5; 3]);
        let out = enc.forward(&mut g, &store, &[&img, &img]).unwrap();
        assert_eq!(g.value(out).dim(), (2, 64));
    }
}
