//! Image-caption pair manifests and the size / similarity / NSFW filter.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Prompts shipped as the default NSFW probe list, one per line.
pub const DEFAULT_NSFW_PROMPTS: &str = include_str!("../assets/nsfw_prompts.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "en")]
    En,
    #[serde(rename = "ko")]
    Ko,
    #[serde(rename = "synthetic-A")]
    SyntheticA,
    #[serde(rename = "synthetic-B")]
    SyntheticB,
}

impl Language {
    pub const ALL: [Language; 4] = [Language::En, Language::Ko, Language::SyntheticA, Language::SyntheticB];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Ko => "ko",
            Language::SyntheticA => "synthetic-A",
            Language::SyntheticB => "synthetic-B",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Language::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown language tag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_ref: String,
    pub caption: String,
    pub language: Language,
    pub source: String,
}

impl PairRecord {
    pub fn new(
        image_ref: impl Into<String>,
        caption: impl Into<String>,
        language: Language,
        source: impl Into<String>,
    ) -> Result<Self> {
        let rec = Self {
            image_ref: image_ref.into(),
            caption: caption.into(),
            language,
            source: source.into(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Data(format!("empty caption for `{}`", self.image_ref)));
        }
        for (field, value) in [("image_ref", &self.image_ref), ("caption", &self.caption), ("source", &self.source)] {
            if value.contains(['\t', '\n', '\r']) {
                return Err(Error::Data(format!("{field} contains a tab or newline: {value:?}")));
            }
        }
        Ok(())
    }
}

/// Parse a TSV manifest: `image_ref \t caption \t language \t source`, LF separated.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("manifest line {}: {e}", lineno + 1)))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [image_ref, caption, language, source] = fields[..] else {
            return Err(Error::Data(format!(
                "manifest line {}: expected 4 tab-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        };
        let rec = PairRecord {
            image_ref: image_ref.to_string(),
            caption: caption.to_string(),
            language: language.parse()?,
            source: source.to_string(),
        };
        rec.validate()
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[PairRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
        writeln!(w, "{}\t{}\t{}\t{}", r.image_ref, r.caption, r.language, r.source)
            .map_err(|e| Error::io("manifest", e))?;
    }
    Ok(())
}

pub fn manifest_to_string(records: &[PairRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("manifest is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_side: u32,
    pub store_size: u32,
    pub sim_threshold: f64,
    pub nsfw_threshold: f64,
    pub nsfw_prompts: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_side: 32,
            store_size: 256,
            sim_threshold: 0.28,
            nsfw_threshold: 0.22,
            nsfw_prompts: parse_prompt_list(DEFAULT_NSFW_PROMPTS),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_side < 1 {
            return Err(Error::Config("min_side must be at least 1".into()));
        }
        if self.store_size < self.min_side {
            return Err(Error::Config("store_size must be at least min_side".into()));
        }
        for (k, v) in [("sim_threshold", self.sim_threshold), ("nsfw_threshold", self.nsfw_threshold)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} = {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// One prompt per non-empty line; `#` starts a comment line.
pub fn parse_prompt_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Kept,
    TooSmall,
    LowSimilarity,
    Nsfw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterVerdict {
    reason: FilterReason,
}

impl FilterVerdict {
    pub fn reason(self) -> FilterReason {
        self.reason
    }

    pub fn keep(self) -> bool {
        self.reason == FilterReason::Kept
    }
}

/// Rules apply in order size, similarity, NSFW; the first failure names the verdict.
/// A similarity exactly at the threshold is kept, and an NSFW score exactly at
/// its threshold is kept (only scores strictly above it are dropped).
pub fn filter_pair(
    _record: &PairRecord,
    image_dims: (u32, u32),
    sim_score: f64,
    nsfw_score: f64,
    cfg: &FilterConfig,
) -> FilterVerdict {
    let reason = if image_dims.0.min(image_dims.1) < cfg.min_side {
        FilterReason::TooSmall
    } else if sim_score < cfg.sim_threshold {
        FilterReason::LowSimilarity
    } else if nsfw_score > cfg.nsfw_threshold {
        FilterReason::Nsfw
    } else {
        FilterReason::Kept
    };
    FilterVerdict { reason }
}

/// Scores depend only on the decoded image and the caption.
pub trait PairScorer {
    /// Cosine similarity between the image and its caption, and the maximum
    /// cosine similarity between the image and any NSFW prompt.
    fn score(&self, record: &PairRecord, image: &Raster) -> Result<(f64, f64)>;
}

/// Scores precomputed elsewhere, keyed by `image_ref`.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    scores: std::collections::HashMap<String, (f64, f64)>,
}

impl TableScorer {
    /// Parse `image_ref \t sim \t nsfw` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let [image_ref, sim, nsfw] = f[..] else {
                return Err(Error::Data(format!("score line {}: expected 3 fields", i + 1)));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("score line {}: {e}", i + 1)))
            };
            scores.insert(image_ref.to_string(), (parse(sim)?, parse(nsfw)?));
        }
        Ok(Self { scores })
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, sim: f64, nsfw: f64) {
        self.scores.insert(image_ref.into(), (sim, nsfw));
    }
}

impl PairScorer for TableScorer {
    fn score(&self, record: &PairRecord, _image: &Raster) -> Result<(f64, f64)> {
        self.scores
            .get(&record.image_ref)
            .copied()
            .ok_or_else(|| Error::Data(format!("no score for `{}`", record.image_ref)))
    }
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub image_ref: String,
    pub reason: FilterReason,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<PairRecord>,
    pub report: Vec<ReportLine>,
}

impl FilterOutcome {
    pub fn count(&self, reason: FilterReason) -> usize {
        self.report.iter().filter(|r| r.reason == reason).count()
    }

    pub fn write_report<W: Write>(&self, mut w: W) -> Result<()> {
        for line in &self.report {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io("filter report", e))?;
        }
        Ok(())
    }
}

/// Apply [`filter_pair`] to each record. `load` maps a record to its decoded image.
/// Scoring is skipped for images that already fail the size rule.
pub fn filter_records<S, L>(records: &[PairRecord], cfg: &FilterConfig, scorer: &S, mut load: L) -> Result<FilterOutcome>
where
    S: PairScorer + ?Sized,
    L: FnMut(&PairRecord) -> Result<Raster>,
{
    cfg.validate()?;
    let mut out = FilterOutcome::default();
    for rec in records {
        let image = load(rec)?;
        let dims = image.dims();
        let (sim, nsfw) = if dims.0.min(dims.1) < cfg.min_side {
            (f64::NAN, f64::NAN)
        } else {
            scorer.score(rec, &image)?
        };
        let verdict = filter_pair(rec, dims, sim, nsfw, cfg);
        if verdict.keep() {
            out.kept.push(rec.clone());
        }
        out.report.push(ReportLine {
            image_ref: rec.image_ref.clone(),
            reason: verdict.reason(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec() -> PairRecord {
        PairRecord::new("img/1.jpg", "a dog on grass", Language::En, "test").unwrap()
    }

    #[test]
    fn verdict_table() {
        let cfg = FilterConfig::default();
        let r = rec();
        let cases = [
            ((512, 512), 0.30, 0.10, FilterReason::Kept),
            ((512, 512), 0.20, 0.10, FilterReason::LowSimilarity),
            ((512, 512), 0.30, 0.25, FilterReason::Nsfw),
            ((20, 512), 0.99, 0.00, FilterReason::TooSmall),
            ((512, 512), 0.28, 0.10, FilterReason::Kept),
            ((512, 512), 0.30, 0.22, FilterReason::Kept),
            ((32, 40), 0.30, 0.10, FilterReason::Kept),
            ((31, 40), 0.30, 0.10, FilterReason::TooSmall),
        ];
        for (dims, sim, nsfw, want) in cases {
            let v = filter_pair(&r, dims, sim, nsfw, &cfg);
            assert_eq!(v.reason(), want, "{dims:?} {sim} {nsfw}");
            assert_eq!(v.keep(), want == FilterReason::Kept);
        }
    }

    #[test]
    fn drop_order_is_size_then_similarity_then_nsfw() {
        let cfg = FilterConfig::default();
        let r = rec();
        assert_eq!(filter_pair(&r, (10, 10), 0.0, 0.9, &cfg).reason(), FilterReason::TooSmall);
        assert_eq!(filter_pair(&r, (64, 64), 0.0, 0.9, &cfg).reason(), FilterReason::LowSimilarity);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(PairRecord::new("x", "   ", Language::Ko, "s").is_err());
        assert!(PairRecord::new("x", "a\tb", Language::Ko, "s").is_err());
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let recs = vec![
            rec(),
            PairRecord::new("img/2.jpg", "잔디 위의 개", Language::Ko, "web").unwrap(),
        ];
        let text = manifest_to_string(&recs).unwrap();
        assert_eq!(text.matches('\n').count(), 2);
        assert_eq!(read_manifest(text.as_bytes()).unwrap(), recs);
        assert!(read_manifest("a\tb\ten\n".as_bytes()).is_err());
        assert!(read_manifest("a\tb\tfr\ts\n".as_bytes()).is_err());
    }

    #[test]
    fn default_prompts_ship() {
        assert!(!FilterConfig::default().nsfw_prompts.is_empty());
    }

    #[test]
    fn table_scorer_pipeline() {
        let recs = vec![
            PairRecord::new("a", "x", Language::En, "s").unwrap(),
            PairRecord::new("b", "y", Language::En, "s").unwrap(),
            PairRecord::new("c", "z", Language::En, "s").unwrap(),
        ];
        let scorer = TableScorer::parse("a\t0.5\t0.0\nb\t0.1\t0.0\nc\t0.5\t0.9\n").unwrap();
        let img = Raster::from_fn(40, 40, |_, _| [0.0; 3]);
        let out = filter_records(&recs, &FilterConfig::default(), &scorer, |_| Ok(img.clone())).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.count(FilterReason::LowSimilarity), 1);
        assert_eq!(out.count(FilterReason::Nsfw), 1);
        let mut buf = Vec::new();
        out.write_report(&mut buf).unwrap();
        let first = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"image_ref":"a","reason":"kept"}"#);
    }

    proptest! {
        #[test]
        fn monotone_in_similarity(s in -1.0f64..1.0, d in 0.0f64..1.0, nsfw in -1.0f64..1.0) {
            let cfg = FilterConfig::default();
            let r = rec();
            if filter_pair(&r, (64, 64), s, nsfw, &cfg).keep() {
                prop_assert!(filter_pair(&r, (64, 64), (s + d).min(1.0), nsfw, &cfg).keep());
            }
        }

        #[test]
        fn antitone_in_nsfw(s in -1.0f64..1.0, d in 0.0f64..1.0, nsfw in -1.0f64..1.0) {
            let cfg = FilterConfig::default();
            let r = rec();
            if filter_pair(&r, (64, 64), s, nsfw, &cfg).keep() {
                prop_assert!(filter_pair(&r, (64, 64), s, nsfw - d, &cfg).keep());
            }
        }
    }
}
