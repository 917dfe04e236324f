//! Image-plus-text analogy search over a gallery of image embeddings.
//!
//! The query is `l2(x + w * y)` for an image embedding `x` and a text
//! embedding `y`; gallery items are ranked by cosine similarity to it.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{Error, Result};
use crate::train::normalize_rows;

pub const DEFAULT_WEIGHTS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
const FEATURES_TENSOR: &str = "gallery.features";

/// Unit-norm gallery embeddings with unique ids, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    features: Array2<f64>,
}

impl GalleryIndex {
    pub fn new(ids: Vec<String>, features: &Array2<f64>) -> Result<Self> {
        if ids.len() != features.nrows() {
            return Err(Error::Shape(format!("{} ids for {} feature rows", ids.len(), features.nrows())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate gallery id `{dup}`")));
        }
        Ok(Self {
            ids,
            features: normalize_rows(features)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            Phase::GalleryIndex,
            serde_json::json!({ "ids": self.ids }),
            vec![(FEATURES_TENSOR.into(), self.features.clone())],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_phase(Phase::GalleryIndex)?;
        let ids: Vec<String> = serde_json::from_value(
            ck.config.get("ids").cloned().ok_or_else(|| Error::Checkpoint("gallery index lacks ids".into()))?,
        )?;
        let feats = ck
            .tensor(FEATURES_TENSOR)
            .ok_or_else(|| Error::Checkpoint("gallery index lacks features".into()))?;
        let mut index = Self::new(ids, feats)?;
        // Stored rows are already unit norm; keep them bit-exact.
        index.features = feats.clone();
        Ok(index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogyQuery {
    pub image: Array1<f64>,
    pub text: Array1<f64>,
    pub weight: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

fn unit(v: &Array1<f64>, what: &str) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{what} vector is not finite")));
    }
    let n = v.dot(v).sqrt();
    if n <= 1e-12 {
        return Err(Error::Data(format!("{what} vector has zero norm")));
    }
    Ok(v / n)
}

/// The normalized combined query vector.
pub fn query_vector(q: &AnalogyQuery) -> Result<Array1<f64>> {
    if q.image.len() != q.text.len() {
        return Err(Error::Shape(format!("image dim {} vs text dim {}", q.image.len(), q.text.len())));
    }
    let x = unit(&q.image, "image")?;
    let y = unit(&q.text, "text")?;
    unit(&(&x + &(&y * q.weight)), "combined query")
}

/// Top `k` gallery items; equal scores keep gallery order.
pub fn analogy_query(q: &AnalogyQuery, index: &GalleryIndex) -> Result<Vec<Hit>> {
    let v = query_vector(q)?;
    if v.len() != index.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", v.len(), index.dim())));
    }
    let scores = index.features.dot(&v);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order
        .into_iter()
        .take(q.k)
        .map(|i| Hit {
            id: index.ids[i].clone(),
            score: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weight: f64,
    pub hits: Vec<Hit>,
}

/// The same query at every weight in `weights`.
pub fn sweep_weight(image: &Array1<f64>, text: &Array1<f64>, weights: &[f64], k: usize, index: &GalleryIndex) -> Result<Vec<SweepRow>> {
    weights
        .iter()
        .map(|&weight| {
            let q = AnalogyQuery {
                image: image.clone(),
                text: text.clone(),
                weight,
                k,
            };
            Ok(SweepRow {
                weight,
                hits: analogy_query(&q, index)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn index() -> GalleryIndex {
        GalleryIndex::new(
            vec!["a".into(), "b".into(), "c".into()],
            &array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn weight_moves_toward_text() {
        let idx = index();
        let x = array![1.0, 0.0];
        let y = array![0.0, 1.0];
        let rows = sweep_weight(&x, &y, &[0.0, 1.0, 5.0], 1, &idx).unwrap();
        let top: Vec<&str> = rows.iter().map(|r| r.hits[0].id.as_str()).collect();
        assert_eq!(top, vec!["a", "c", "b"]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GalleryIndex::new(vec!["a".into(), "a".into()], &Array2::eye(2)).is_err());
        let q = AnalogyQuery {
            image: array![1.0, 0.0],
            text: array![-1.0, 0.0],
            weight: 1.0,
            k: 1,
        };
        assert!(analogy_query(&q, &index()).is_err());
    }

    #[test]
    fn ties_keep_gallery_order() {
        let idx = GalleryIndex::new(vec!["z".into(), "y".into()], &array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let q = AnalogyQuery {
            image: array![1.0, 0.0],
            text: array![0.0, 1.0],
            weight: 0.5,
            k: 2,
        };
        let ids: Vec<String> = analogy_query(&q, &idx).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["z", "y"]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let idx = index();
        let back = GalleryIndex::from_checkpoint(&Checkpoint::from_bytes(&idx.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, idx);
    }
}
