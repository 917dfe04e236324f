//! Procedurally rendered (shape, color) concepts captioned in two synthetic
//! languages with disjoint vocabularies. Language A is written in Latin
//! letters, language B in Hangul syllables, so the two share no words and no
//! non-space bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{manifest_to_string, Language, PairRecord};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_TOY_IMAGE_SIZE: u32 = 32;

const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];
const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.12, 0.80, 0.15]),
    ("blue", [0.12, 0.25, 0.95]),
    ("yellow", [0.95, 0.90, 0.12]),
    ("magenta", [0.90, 0.15, 0.85]),
    ("cyan", [0.12, 0.88, 0.90]),
];

const SHAPE_WORDS_A: [&str; 6] = ["tork", "sivu", "trel", "kaza", "rinu", "dimo"];
const COLOR_WORDS_A: [&str; 6] = ["rul", "gev", "bos", "yat", "mip", "cah"];
const SHAPE_WORDS_B: [&str; 6] = ["햐녀", "뎌뤄", "뭐붜", "숴줘", "춰퀘", "퉤풰"];
const COLOR_WORDS_B: [&str; 6] = ["갸뇨", "듀료", "뮤뷰", "슈쥬", "츄큐", "튜퓨"];

/// Number of distinct (shape, color) concepts the renderer supports.
pub const MAX_CONCEPTS: usize = SHAPES.len() * COLORS.len();

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub shape: usize,
    pub color: usize,
    pub name: String,
    pub caption_a: String,
    pub caption_b: String,
}

impl Concept {
    /// The `k`-th concept. Consecutive concepts differ in both shape and color
    /// for the first six; later ones reuse shapes with shifted colors.
    pub fn nth(k: usize) -> Result<Self> {
        if k >= MAX_CONCEPTS {
            return Err(Error::InvalidArgument(format!(
                "concept {k} exceeds the {MAX_CONCEPTS} renderable combinations"
            )));
        }
        let shape = k % SHAPES.len();
        let color = (k / SHAPES.len() + shape) % COLORS.len();
        Ok(Self {
            shape,
            color,
            name: format!("{} {}", COLORS[color].0, SHAPES[shape]),
            caption_a: format!("{} {}", COLOR_WORDS_A[color], SHAPE_WORDS_A[shape]),
            caption_b: format!("{} {}", SHAPE_WORDS_B[shape], COLOR_WORDS_B[color]),
        })
    }

    pub fn caption(&self, lang: Language) -> Option<&str> {
        match lang {
            Language::SyntheticA => Some(&self.caption_a),
            Language::SyntheticB => Some(&self.caption_b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image_ref: String,
    pub concept: usize,
    pub image: Raster,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub seed: u64,
    pub concepts: Vec<Concept>,
    pub samples: Vec<ToySample>,
    pub records: Vec<PairRecord>,
}

pub fn generate_toy_dataset(num_concepts: usize, samples_per_concept: usize, seed: u64) -> Result<ToyDataset> {
    generate_toy_dataset_sized(num_concepts, samples_per_concept, seed, DEFAULT_TOY_IMAGE_SIZE)
}

pub fn generate_toy_dataset_sized(
    num_concepts: usize,
    samples_per_concept: usize,
    seed: u64,
    size: u32,
) -> Result<ToyDataset> {
    if num_concepts < 2 {
        return Err(Error::InvalidArgument("toy dataset needs at least 2 concepts".into()));
    }
    if size < 8 {
        return Err(Error::InvalidArgument("toy images must be at least 8px".into()));
    }
    let concepts = (0..num_concepts).map(Concept::nth).collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(num_concepts * samples_per_concept);
    let mut records = Vec::with_capacity(2 * samples.capacity());
    for (k, concept) in concepts.iter().enumerate() {
        for i in 0..samples_per_concept {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * samples_per_concept + i) as u64);
            let image = render(concept, size, &mut rng);
            let image_ref = format!("images/c{k:02}_{i:04}.png");
            let source = format!("toy seed={seed} concept={k}");
            records.push(PairRecord::new(&image_ref, &concept.caption_a, Language::SyntheticA, &source)?);
            records.push(PairRecord::new(&image_ref, &concept.caption_b, Language::SyntheticB, &source)?);
            samples.push(ToySample {
                image_ref,
                concept: k,
                image,
            });
        }
    }
    Ok(ToyDataset {
        seed,
        concepts,
        samples,
        records,
    })
}

impl ToyDataset {
    /// Writes `manifest.tsv`, `concepts.json` and `images/*.png` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        for s in &self.samples {
            s.image.save_png(&dir.join(&s.image_ref))?;
        }
        let manifest = dir.join("manifest.tsv");
        fs::write(&manifest, manifest_to_string(&self.records)?).map_err(|e| Error::io(&manifest, e))?;
        let concepts = dir.join("concepts.json");
        fs::write(&concepts, serde_json::to_string_pretty(&self.concepts)?).map_err(|e| Error::io(&concepts, e))?;
        Ok(())
    }

    pub fn concept_of(&self, image_ref: &str) -> Option<usize> {
        self.samples.iter().find(|s| s.image_ref == image_ref).map(|s| s.concept)
    }

    pub fn captions(&self, lang: Language) -> Vec<String> {
        self.concepts
            .iter()
            .filter_map(|c| c.caption(lang).map(str::to_string))
            .collect()
    }
}

fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => {
            let d = (u * u + v * v).sqrt();
            (0.55..=1.0).contains(&d)
        }
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render(concept: &Concept, size: u32, rng: &mut ChaCha8Rng) -> Raster {
    let s = size as f32;
    let bg: f32 = rng.random_range(0.05..0.25);
    let cx = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let cy = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let r = rng.random_range(0.24..0.38) * s;
    let base = COLORS[concept.color].1;
    let color: [f32; 3] = std::array::from_fn(|c| (base[c] + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    let noise: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.04..0.04)).collect();
    let img = Raster::from_fn(size, size, |x, y| {
        let u = (x as f32 + 0.5 - cx) / r;
        let v = (y as f32 + 0.5 - cy) / r;
        let n = noise[(y * size + x) as usize];
        if inside(concept.shape, u, v) {
            color.map(|c| (c + n).clamp(0.0, 1.0))
        } else {
            [(bg + n).clamp(0.0, 1.0); 3]
        }
    });
    // Quantize through 8-bit so in-memory samples equal their PNG files.
    Raster::from_rgb8(&img.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_manifest() {
        let a = generate_toy_dataset(8, 64, 0).unwrap();
        let b = generate_toy_dataset(8, 64, 0).unwrap();
        assert_eq!(manifest_to_string(&a.records).unwrap(), manifest_to_string(&b.records).unwrap());
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.image == y.image));
        let c = generate_toy_dataset(8, 64, 1).unwrap();
        assert!(a.samples.iter().zip(&c.samples).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn counts() {
        let d = generate_toy_dataset(2, 4, 1).unwrap();
        assert_eq!(d.samples.len(), 8);
        assert_eq!(d.records.len(), 16);
    }

    #[test]
    fn every_image_has_one_record_per_language() {
        let d = generate_toy_dataset(5, 3, 9).unwrap();
        for s in &d.samples {
            let langs: Vec<Language> = d
                .records
                .iter()
                .filter(|r| r.image_ref == s.image_ref)
                .map(|r| r.language)
                .collect();
            assert_eq!(langs, vec![Language::SyntheticA, Language::SyntheticB]);
        }
    }

    #[test]
    fn vocabularies_disjoint() {
        let d = generate_toy_dataset(MAX_CONCEPTS, 1, 0).unwrap();
        let words = |lang| -> HashSet<String> {
            d.records
                .iter()
                .filter(|r| r.language == lang)
                .flat_map(|r| r.caption.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        let (a, b) = (words(Language::SyntheticA), words(Language::SyntheticB));
        assert_eq!(a.len(), 12);
        assert!(a.is_disjoint(&b));
        let bytes = |s: &HashSet<String>| -> HashSet<u8> { s.iter().flat_map(|w| w.bytes()).collect() };
        assert!(bytes(&a).is_disjoint(&bytes(&b)));
        // all concepts distinct
        let names: HashSet<_> = d.concepts.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), MAX_CONCEPTS);
    }

    #[test]
    fn too_many_concepts() {
        assert!(generate_toy_dataset(MAX_CONCEPTS + 1, 1, 0).is_err());
        assert!(generate_toy_dataset(1, 1, 0).is_err());
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_toy_dataset(2, 2, 3).unwrap();
        d.write_to(dir.path()).unwrap();
        let loaded = Raster::load(&dir.path().join(&d.samples[1].image_ref)).unwrap();
        assert_eq!(loaded, d.samples[1].image);
    }
}
