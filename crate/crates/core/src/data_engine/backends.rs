//! Pluggable annotation backends and the deterministic stubs shipped in-repo.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::image::{laplacian_variance, Image, Plane};

pub trait Segmenter {
    fn segment(&self, image_id: &str, image: &Image) -> Result<Vec<Plane>>;
}

pub trait RegionCaptioner {
    fn caption(&self, image_id: &str, image: &Image, mask: &Plane) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refinement {
    pub subject: String,
    pub noun_phrase: String,
}

pub trait CaptionRefiner {
    fn refine(&self, raw_caption: &str) -> Result<Refinement>;
}

pub trait QualityScorer {
    fn score(&self, image: &Image) -> f64;
}

/// Sharpness proxy: Laplacian variance squashed onto `[0, 100)`.
#[derive(Debug, Clone)]
pub struct SharpnessScorer {
    /// Laplacian variance mapped to a score of 50.
    pub half_point: f64,
}

impl Default for SharpnessScorer {
    fn default() -> Self {
        Self { half_point: 0.01 }
    }
}

impl QualityScorer for SharpnessScorer {
    fn score(&self, image: &Image) -> f64 {
        let v = laplacian_variance(image, None);
        100.0 * v / (v + self.half_point)
    }
}

/// Segmenter and captioner that answer from known ground truth, keyed by
/// image id. Stands in for the real segmentation and region-captioning models.
#[derive(Debug, Clone, Default)]
pub struct OracleAnnotator {
    regions: HashMap<String, Vec<(Plane, String)>>,
}

impl OracleAnnotator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, mask: Plane, description: impl Into<String>) {
        self.regions
            .entry(image_id.into())
            .or_default()
            .push((mask, description.into()));
    }
}

impl Segmenter for OracleAnnotator {
    fn segment(&self, image_id: &str, _image: &Image) -> Result<Vec<Plane>> {
        self.regions
            .get(image_id)
            .map(|r| r.iter().map(|(m, _)| m.clone()).collect())
            .ok_or_else(|| Error::BackendFailure {
                image_id: image_id.to_string(),
                detail: "no ground-truth regions recorded".into(),
            })
    }
}

impl RegionCaptioner for OracleAnnotator {
    fn caption(&self, image_id: &str, _image: &Image, mask: &Plane) -> Result<String> {
        let regions = self.regions.get(image_id).ok_or_else(|| Error::BackendFailure {
            image_id: image_id.to_string(),
            detail: "no ground-truth regions recorded".into(),
        })?;
        let overlap = |m: &Plane| {
            m.data
                .iter()
                .zip(&mask.data)
                .filter(|(&a, &b)| a > 0.5 && b > 0.5)
                .count()
        };
        regions
            .iter()
            .max_by_key(|(m, _)| overlap(m))
            .filter(|(m, _)| overlap(m) > 0)
            .map(|(_, d)| format!("There is a {d} in the image."))
            .ok_or_else(|| Error::BackendFailure {
                image_id: image_id.to_string(),
                detail: "mask overlaps no known region".into(),
            })
    }
}

/// Rule-based refiner: strips filler phrases, keeps the noun phrase, takes
/// its last word as the subject.
#[derive(Debug, Clone, Default)]
pub struct RuleRefiner;

const LEADING_FILLERS: [&str; 6] = ["there is ", "there are ", "this is ", "a ", "an ", "the "];
const TRAILING_FILLERS: [&str; 3] = [" in the image", " in the picture", " in the photo"];

impl CaptionRefiner for RuleRefiner {
    fn refine(&self, raw_caption: &str) -> Result<Refinement> {
        let mut s = raw_caption
            .trim()
            .trim_end_matches(['.', '!'])
            .to_lowercase();
        loop {
            let before = s.len();
            for f in LEADING_FILLERS {
                if let Some(rest) = s.strip_prefix(f) {
                    s = rest.to_string();
                }
            }
            for f in TRAILING_FILLERS {
                if let Some(rest) = s.strip_suffix(f) {
                    s = rest.to_string();
                }
            }
            if s.len() == before {
                break;
            }
        }
        let noun_phrase = s.split_whitespace().collect::<Vec<_>>().join(" ");
        let subject = noun_phrase
            .split_whitespace()
            .last()
            .ok_or_else(|| Error::BackendFailure {
                image_id: String::new(),
                detail: format!("no noun phrase in caption {raw_caption:?}"),
            })?
            .to_string();
        Ok(Refinement {
            subject,
            noun_phrase,
        })
    }
}

/// Wraps a refiner and deterministically corrupts subjects that appear in a
/// substitution table; models the spelling slips of a weak language model.
#[derive(Debug, Clone, Default)]
pub struct TypoRefiner {
    pub substitutions: HashMap<String, String>,
}

impl CaptionRefiner for TypoRefiner {
    fn refine(&self, raw_caption: &str) -> Result<Refinement> {
        let mut r = RuleRefiner.refine(raw_caption)?;
        if let Some(bad) = self.substitutions.get(&r.subject) {
            r.noun_phrase = r
                .noun_phrase
                .strip_suffix(r.subject.as_str())
                .map(|head| format!("{head}{bad}"))
                .unwrap_or_else(|| r.noun_phrase.clone());
            r.subject = bad.clone();
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_refiner_extracts_noun_phrase() {
        let r = RuleRefiner.refine("There is a red striped disk in the image.").unwrap();
        assert_eq!(r.noun_phrase, "red striped disk");
        assert_eq!(r.subject, "disk");
    }

    #[test]
    fn rule_refiner_rejects_empty() {
        assert!(RuleRefiner.refine("There is a .").is_err());
    }

    #[test]
    fn sharpness_score_in_range_and_monotone() {
        let flat = Image::from_fn(16, 16, |_, _| [0.5; 3]);
        let sharp = Image::from_fn(16, 16, |y, x| if (x + y) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let s = SharpnessScorer::default();
        assert_eq!(s.score(&flat), 0.0);
        assert!(s.score(&sharp) > 90.0 && s.score(&sharp) < 100.0);
    }
}
