//! Zero-shot classification, cross-modal retrieval and cross-lingual heatmaps.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Language;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::train::{cosine_similarity_matrix, normalize_rows, DualEncoder, SimilarityMatrix};

pub const LABEL_SLOT: &str = "{label}";

/// Prompt templates for a language; synthetic languages use the bare label.
pub fn default_templates(lang: Language) -> Vec<String> {
    match lang {
        Language::En => vec!["a photo of a {label}".into()],
        Language::Ko => vec!["{label} 사진".into()],
        Language::SyntheticA | Language::SyntheticB => vec![LABEL_SLOT.into()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
}

impl LabelSet {
    pub fn new(class_names: Vec<String>, templates: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidArgument("label set has no classes".into()));
        }
        if templates.is_empty() {
            return Err(Error::InvalidArgument("label set has no templates".into()));
        }
        for t in &templates {
            if t.matches(LABEL_SLOT).count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "template `{t}` must contain {LABEL_SLOT} exactly once"
                )));
            }
        }
        Ok(Self {
            class_names,
            templates,
        })
    }

    pub fn prompts(&self, class: usize) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replace(LABEL_SLOT, &self.class_names[class]))
            .collect()
    }
}

fn tokenize_all(vocab: &Vocabulary, texts: &[String], max_len: usize) -> Vec<TokenSequence> {
    texts.iter().map(|t| vocab.encode(t, max_len)).collect()
}

/// Unit-norm caption embeddings, one row per text.
pub fn embed_texts(model: &DualEncoder, vocab: &Vocabulary, texts: &[String]) -> Result<Array2<f64>> {
    let seqs = tokenize_all(vocab, texts, model.text.cfg.max_len);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    normalize_rows(&model.encode_texts(&refs)?)
}

pub fn embed_images(model: &DualEncoder, images: &[&crate::raster::Raster]) -> Result<Array2<f64>> {
    normalize_rows(&model.encode_images(images)?)
}

/// Per class: the mean of its normalized template embeddings, renormalized.
pub fn class_embeddings(model: &DualEncoder, vocab: &Vocabulary, labels: &LabelSet) -> Result<Array2<f64>> {
    let c = labels.class_names.len();
    let t = labels.templates.len();
    let prompts: Vec<String> = (0..c).flat_map(|k| labels.prompts(k)).collect();
    let emb = embed_texts(model, vocab, &prompts)?;
    let mut out = Array2::zeros((c, emb.ncols()));
    for k in 0..c {
        let mut row = out.row_mut(k);
        for j in 0..t {
            row += &emb.row(k * t + j);
        }
    }
    normalize_rows(&out)
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub scores: Array2<f64>,
}

impl ZeroShotResult {
    /// Percent of predictions equal to `truth`.
    pub fn accuracy(&self, truth: &[usize]) -> Result<f64> {
        if truth.len() != self.predictions.len() || truth.is_empty() {
            return Err(Error::Shape(format!("{} labels for {} predictions", truth.len(), self.predictions.len())));
        }
        let hits = self.predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
        Ok(100.0 * hits as f64 / truth.len() as f64)
    }
}

pub fn zeroshot_from_features(image_feats: &Array2<f64>, class_feats: &Array2<f64>) -> Result<ZeroShotResult> {
    let scores = cosine_similarity_matrix(image_feats, class_feats)?.values;
    let predictions = scores.outer_iter().map(argmax).collect();
    Ok(ZeroShotResult { predictions, scores })
}

pub fn zeroshot_classify(
    model: &DualEncoder,
    vocab: &Vocabulary,
    images: &[&crate::raster::Raster],
    labels: &LabelSet,
) -> Result<ZeroShotResult> {
    let classes = class_embeddings(model, vocab, labels)?;
    zeroshot_from_features(&model.encode_images(images)?, &classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Recall@K in percent.
    pub recall: BTreeMap<usize, f64>,
    /// 0-based rank of the best-placed ground-truth item, per query.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: RetrievalResult,
    pub text_to_image: RetrievalResult,
}

/// Rank queries (rows of `scores`) against the gallery (columns). Gallery
/// order is a stable descending sort, so ties go to the lower index.
pub fn rank_queries(scores: &Array2<f64>, truth: &[Vec<usize>], ks: &[usize]) -> Result<RetrievalResult> {
    let (q, m) = scores.dim();
    if truth.len() != q {
        return Err(Error::Shape(format!("{} ground-truth lists for {q} queries", truth.len())));
    }
    let mut ranks = Vec::with_capacity(q);
    for (i, gt) in truth.iter().enumerate() {
        if gt.is_empty() {
            return Err(Error::Data(format!("query {i} has no ground truth")));
        }
        let row = scores.row(i);
        let mut best = usize::MAX;
        for &j in gt {
            if j >= m {
                return Err(Error::Shape(format!("ground-truth index {j} outside gallery of {m}")));
            }
            let sj = row[j];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(k, &sk)| sk > sj || (sk == sj && k < j))
                .count();
            best = best.min(rank);
        }
        ranks.push(best);
    }
    let recall = ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / q.max(1) as f64))
        .collect();
    Ok(RetrievalResult { recall, ranks })
}

/// Both retrieval directions from aligned features. `image_captions[i]` lists
/// the caption rows that belong to image `i`.
pub fn retrieval_eval(
    image_feats: &Array2<f64>,
    text_feats: &Array2<f64>,
    image_captions: &[Vec<usize>],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let sim = cosine_similarity_matrix(image_feats, text_feats)?;
    let mut text_images = vec![Vec::new(); text_feats.nrows()];
    for (i, caps) in image_captions.iter().enumerate() {
        for &c in caps {
            text_images
                .get_mut(c)
                .ok_or_else(|| Error::Shape(format!("caption index {c} outside {} texts", text_feats.nrows())))?
                .push(i);
        }
    }
    Ok(RetrievalReport {
        image_to_text: rank_queries(&sim.values, image_captions, ks)?,
        text_to_image: rank_queries(&sim.transposed().values, &text_images, ks)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub row_texts: Vec<String>,
    pub col_texts: Vec<String>,
    pub values: Array2<f64>,
}

impl Heatmap {
    pub fn from_features(row_texts: Vec<String>, col_texts: Vec<String>, rows: &Array2<f64>, cols: &Array2<f64>) -> Result<Self> {
        let SimilarityMatrix { values } = cosine_similarity_matrix(rows, cols)?;
        Ok(Self {
            row_texts,
            col_texts,
            values,
        })
    }

    pub fn row_argmax(&self) -> Vec<usize> {
        self.values.outer_iter().map(argmax).collect()
    }

    /// Number of rows whose maximum sits on the diagonal.
    pub fn diagonal_hits(&self) -> usize {
        self.row_argmax().iter().enumerate().filter(|(i, j)| i == *j).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        let mut header = vec![String::new()];
        header.extend(self.col_texts.iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for (text, row) in self.row_texts.iter().zip(self.values.outer_iter()) {
            let mut rec = vec![text.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("CSV output", e))
    }
}

/// Caption-by-caption similarity between aligned phrase lists in two languages.
pub fn crosslingual_heatmap(model: &DualEncoder, vocab: &Vocabulary, rows: &[String], cols: &[String]) -> Result<Heatmap> {
    let a = embed_texts(model, vocab, rows)?;
    let b = embed_texts(model, vocab, cols)?;
    Heatmap::from_features(rows.to_vec(), cols.to_vec(), &a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub dataset: String,
    pub language: String,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(task: &str, dataset: &str, language: &str) -> Self {
        Self {
            task: task.into(),
            dataset: dataset.into(),
            language: language.into(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn templates_need_one_slot() {
        assert!(LabelSet::new(vec!["cat".into()], vec!["a {label} {label}".into()]).is_err());
        assert!(LabelSet::new(vec!["cat".into()], vec!["a cat".into()]).is_err());
        let l = LabelSet::new(vec!["cat".into()], default_templates(Language::En)).unwrap();
        assert_eq!(l.prompts(0), vec!["a photo of a cat".to_string()]);
        assert_eq!(default_templates(Language::Ko)[0], "{label} 사진");
    }

    #[test]
    fn argmax_takes_lowest_tie() {
        assert_eq!(argmax(array![0.5, 0.9, 0.9].view()), 1);
        assert_eq!(argmax(array![1.0, 1.0].view()), 0);
    }

    #[test]
    fn ranks_with_ties() {
        let s = array![[0.5, 0.5, 0.1], [0.2, 0.9, 0.9]];
        let r = rank_queries(&s, &[vec![1], vec![2]], &[1, 2]).unwrap();
        assert_eq!(r.ranks, vec![1, 1]);
        assert_eq!(r.recall[&1], 0.0);
        assert_eq!(r.recall[&2], 100.0);
        let r = rank_queries(&s, &[vec![2, 0], vec![0]], &[1]).unwrap();
        assert_eq!(r.ranks, vec![0, 2]);
    }

    #[test]
    fn identity_retrieval_is_perfect() {
        let x = Array2::<f64>::eye(5);
        let caps: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let r = retrieval_eval(&x, &x, &caps, &[1, 5, 10]).unwrap();
        assert_eq!(r.image_to_text.recall[&1], 100.0);
        assert_eq!(r.text_to_image.recall[&1], 100.0);
    }

    #[test]
    fn heatmap_csv() {
        let h = Heatmap::from_features(
            vec!["a".into(), "b, c".into()],
            vec!["x".into(), "y".into()],
            &Array2::eye(2),
            &Array2::eye(2),
        )
        .unwrap();
        assert_eq!(h.diagonal_hits(), 2);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), ",x,y");
        assert!(text.contains("\"b, c\",0.000000,1.000000"));
    }
}
