//! Triplet production: quality gating, region annotation, iterative caption
//! refinement, subject merging, the synthetic corpus and on-disk datasets.

pub mod backends;
pub mod corpus;
pub mod dataset;

use std::collections::HashMap;
use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::image::{Image, Plane};

pub use backends::{
    CaptionRefiner, OracleAnnotator, QualityScorer, Refinement, RegionCaptioner, RuleRefiner, Segmenter,
    SharpnessScorer, TypoRefiner,
};
pub use corpus::{build_bokeh_corpus, build_synthetic_corpus, build_synthetic_scenes, Scene, ShapeRecord};
pub use dataset::{read_dataset, write_dataset, IndexRecord};

/// Masks covering less than this fraction of the image are dropped.
pub const MIN_MASK_AREA_FRACTION: f64 = 0.005;

pub const BOKEH_TAG: &str = "bokeh";
pub const GENERAL_TAG: &str = "general";

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub mask: Plane,
    pub raw_caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedRegion {
    pub noun_phrase: String,
    pub subject: String,
    pub source: RegionAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image_id: String,
    pub image: Arc<Image>,
    pub mask: Plane,
    pub caption: String,
    pub subject: String,
    pub task_tags: Vec<String>,
}

impl Triplet {
    pub fn is_bokeh(&self) -> bool {
        self.task_tags.iter().any(|t| t == BOKEH_TAG)
    }
}

/// `true` iff the shorter side is at least `min_side` and the score reaches
/// `min_score` (inclusive on both bounds).
pub fn filter_image(image: &Image, scorer: &dyn QualityScorer, min_side: usize, min_score: f64) -> bool {
    image.height.min(image.width) >= min_side && scorer.score(image) >= min_score
}

pub fn annotate_image(
    image_id: &str,
    image: &Image,
    segmenter: &dyn Segmenter,
    captioner: &dyn RegionCaptioner,
) -> Result<Vec<RegionAnnotation>> {
    let with_context = |e: Error| match e {
        Error::BackendFailure { detail, .. } => Error::BackendFailure {
            image_id: image_id.to_string(),
            detail,
        },
        other => Error::BackendFailure {
            image_id: image_id.to_string(),
            detail: other.to_string(),
        },
    };
    let masks = segmenter.segment(image_id, image).map_err(with_context)?;
    let area = (image.height * image.width) as f64;
    let mut out = Vec::new();
    for mask in masks {
        if mask.shape() != image.shape() {
            return Err(Error::BackendFailure {
                image_id: image_id.to_string(),
                detail: format!("segmenter mask shape {:?} != image {:?}", mask.shape(), image.shape()),
            });
        }
        let positive = mask.positive_count();
        if positive == 0 || (positive as f64) < MIN_MASK_AREA_FRACTION * area {
            continue;
        }
        let raw_caption = captioner.caption(image_id, image, &mask).map_err(with_context)?;
        out.push(RegionAnnotation {
            mask: mask.threshold(0.5),
            raw_caption,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOutcome {
    /// Accepted regions, in input order.
    pub regions: Vec<RefinedRegion>,
    /// Input indices still flagged after the final round; excluded.
    pub exhausted: Vec<usize>,
    /// Flagged count after each round.
    pub flagged_per_round: Vec<usize>,
}

/// Subject -> 1-based frequency rank (descending count, ties by name).
fn subject_ranks<'a>(subjects: impl Iterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in subjects {
        *counts.entry(s).or_default() += 1;
    }
    let mut order: Vec<(&str, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, (s, _))| (s.to_string(), i + 1))
        .collect()
}

/// Iterative refinement: tier 1 refines everything; items whose subject
/// ranks beyond `top_k` across the batch (or that failed) are re-refined by
/// the next tier, for `rounds` rounds in total. Only previously flagged items
/// can be flagged again.
pub fn refine_captions(
    annotations: &[RegionAnnotation],
    refiner_tiers: &[&dyn CaptionRefiner],
    top_k: usize,
    rounds: usize,
) -> Result<RefinementOutcome> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("rounds must be >= 1".into()));
    }
    if refiner_tiers.is_empty() {
        return Err(Error::InvalidConfig("at least one refiner tier is required".into()));
    }
    let mut current: Vec<Option<Refinement>> =
        annotations.iter().map(|a| refiner_tiers[0].refine(&a.raw_caption).ok()).collect();
    let mut flagged: Vec<bool> = vec![true; annotations.len()];
    let mut flagged_per_round = Vec::with_capacity(rounds);

    for round in 0..rounds {
        if round > 0 {
            let tier = refiner_tiers[round.min(refiner_tiers.len() - 1)];
            for (i, a) in annotations.iter().enumerate() {
                if flagged[i] {
                    // Keep the last successful refinement if the stronger tier fails.
                    if let Ok(r) = tier.refine(&a.raw_caption) {
                        current[i] = Some(r);
                    }
                }
            }
        }
        let ranks = subject_ranks(current.iter().flatten().map(|r| r.subject.as_str()));
        for (i, r) in current.iter().enumerate() {
            let bad = match r {
                None => true,
                Some(r) => ranks[&r.subject] > top_k,
            };
            flagged[i] = flagged[i] && bad;
        }
        flagged_per_round.push(flagged.iter().filter(|&&f| f).count());
    }

    let mut regions = Vec::new();
    let mut exhausted = Vec::new();
    for (i, (a, r)) in annotations.iter().zip(current).enumerate() {
        match (flagged[i], r) {
            (false, Some(r)) => regions.push(RefinedRegion {
                noun_phrase: r.noun_phrase,
                subject: r.subject,
                source: a.clone(),
            }),
            _ => {
                warn!("refinement exhausted for region {i} ({:?})", a.raw_caption);
                exhausted.push(i);
            }
        }
    }
    Ok(RefinementOutcome {
        regions,
        exhausted,
        flagged_per_round,
    })
}

/// Merge regions of one image that share a subject: masks are OR-ed and the
/// caption comes from the member with the largest mask.
pub fn merge_by_subject(
    image_id: &str,
    image: Arc<Image>,
    regions: &[RefinedRegion],
    task_tags: &[String],
) -> Result<Vec<Triplet>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&RefinedRegion>> = HashMap::new();
    for r in regions {
        if !groups.contains_key(r.subject.as_str()) {
            order.push(&r.subject);
        }
        groups.entry(&r.subject).or_default().push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for subject in order {
        let members = &groups[subject];
        let mut mask = members[0].source.mask.threshold(0.5);
        for m in &members[1..] {
            mask = mask.union(&m.source.mask)?;
        }
        let largest = members
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.source
                    .mask
                    .positive_count()
                    .cmp(&b.source.mask.positive_count())
                    .then(ib.cmp(ia))
            })
            .map(|(_, r)| *r)
            .expect("group is non-empty");
        out.push(Triplet {
            image_id: image_id.to_string(),
            image: image.clone(),
            mask,
            caption: largest.noun_phrase.clone(),
            subject: subject.to_string(),
            task_tags: task_tags.to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct FixedScorer(f64);
    impl QualityScorer for FixedScorer {
        fn score(&self, _: &Image) -> f64 {
            self.0
        }
    }

    #[test]
    fn gating_thresholds() {
        let img = Image::new(600, 800);
        assert!(filter_image(&img, &FixedScorer(65.0), 512, 60.0));
        assert!(filter_image(&img, &FixedScorer(60.0), 512, 60.0));
        assert!(!filter_image(&img, &FixedScorer(59.9), 512, 60.0));
        let small = Image::new(500, 800);
        assert!(!filter_image(&small, &FixedScorer(100.0), 512, 60.0));
    }

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Plane {
        Plane::from_fn(h, w, |y, x| {
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn annotate_keeps_all_large_masks() {
        let img = Image::new(64, 64);
        let mut oracle = OracleAnnotator::new();
        oracle.insert("a", rect(64, 64, 0, 20, 0, 20), "red disk");
        oracle.insert("a", rect(64, 64, 30, 60, 30, 60), "blue square");
        let ann = annotate_image("a", &img, &oracle, &oracle).unwrap();
        assert_eq!(ann.len(), 2);
        assert_eq!(ann[1].raw_caption, "There is a blue square in the image.");
    }

    #[test]
    fn annotate_drops_tiny_masks() {
        let img = Image::new(256, 256);
        let mut oracle = OracleAnnotator::new();
        oracle.insert("a", rect(256, 256, 0, 1, 0, 3), "speck");
        oracle.insert("a", rect(256, 256, 10, 100, 10, 100), "square");
        let ann = annotate_image("a", &img, &oracle, &oracle).unwrap();
        assert_eq!(ann.len(), 1);
    }

    #[test]
    fn annotate_reports_backend_failure_with_id() {
        let img = Image::new(8, 8);
        let oracle = OracleAnnotator::new();
        match annotate_image("missing-7", &img, &oracle, &oracle) {
            Err(Error::BackendFailure { image_id, .. }) => assert_eq!(image_id, "missing-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn ann(caption: &str) -> RegionAnnotation {
        RegionAnnotation {
            mask: Plane::new(4, 4, 1.0),
            raw_caption: caption.to_string(),
        }
    }

    #[test]
    fn rare_subject_stays_flagged() {
        let annotations = vec![ann("a red cat"), ann("a blue cat"), ann("a brown dog")];
        let weak = TypoRefiner {
            substitutions: [("dog".to_string(), "dogg".to_string())].into_iter().collect(),
        };
        let strong = RuleRefiner;
        let tiers: [&dyn CaptionRefiner; 2] = [&weak, &strong];
        let out = refine_captions(&annotations, &tiers, 1, 3).unwrap();
        // "dogg" ranks 2nd (> top_k=1) in round 1; tier 2 yields "dog", which
        // still ranks 2nd, so the item stays flagged and is excluded.
        assert_eq!(out.exhausted, vec![2]);

        // With top_k=2 the first-round output is already in range and kept.
        let out = refine_captions(&annotations, &tiers, 2, 3).unwrap();
        assert!(out.exhausted.is_empty());
        assert_eq!(out.regions[2].subject, "dogg");
    }

    #[test]
    fn typo_fixed_when_correct_subject_is_common() {
        let annotations = vec![ann("a big dog"), ann("a small dog"), ann("a brown dog"), ann("a spotted dog")];
        // Only the last caption is misspelled by the weak tier.
        struct OneTypo;
        impl CaptionRefiner for OneTypo {
            fn refine(&self, raw: &str) -> Result<Refinement> {
                let mut r = RuleRefiner.refine(raw)?;
                if raw.contains("spotted") {
                    r.subject = "dogg".into();
                    r.noun_phrase = "spotted dogg".into();
                }
                Ok(r)
            }
        }
        let tiers: [&dyn CaptionRefiner; 2] = [&OneTypo, &RuleRefiner];
        let out = refine_captions(&annotations, &tiers, 1, 3).unwrap();
        assert!(out.exhausted.is_empty());
        assert_eq!(out.regions[3].subject, "dog");
        assert_eq!(out.regions[3].noun_phrase, "spotted dog");
        assert_eq!(out.flagged_per_round, vec![1, 0, 0]);
    }

    #[test]
    fn fixed_point_when_all_within_top_k() {
        let annotations = vec![ann("a cat"), ann("a dog"), ann("a tree")];
        let tiers: [&dyn CaptionRefiner; 1] = [&RuleRefiner];
        let one = refine_captions(&annotations, &tiers, 200, 1).unwrap();
        let three = refine_captions(&annotations, &tiers, 200, 3).unwrap();
        assert_eq!(one.regions, three.regions);
        assert_eq!(three.flagged_per_round, vec![0, 0, 0]);
    }

    #[test]
    fn refine_validates_arguments() {
        let tiers: [&dyn CaptionRefiner; 1] = [&RuleRefiner];
        assert!(refine_captions(&[], &tiers, 200, 0).is_err());
        assert!(refine_captions(&[], &[], 200, 1).is_err());
    }

    fn region(subject: &str, phrase: &str, mask: Plane) -> RefinedRegion {
        RefinedRegion {
            noun_phrase: phrase.into(),
            subject: subject.into(),
            source: RegionAnnotation {
                mask,
                raw_caption: phrase.into(),
            },
        }
    }

    #[test]
    fn merge_disjoint_leaves() {
        let img = Arc::new(Image::new(10, 10));
        let a = rect(10, 10, 0, 3, 0, 3);
        let b = rect(10, 10, 5, 10, 5, 10);
        let out = merge_by_subject(
            "x",
            img,
            &[region("leaf", "small leaf", a), region("leaf", "big green leaf", b)],
            &[],
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask.positive_count(), 9 + 25);
        assert_eq!(out[0].caption, "big green leaf");
    }

    #[test]
    fn merge_single_passthrough() {
        let img = Arc::new(Image::new(10, 10));
        let m = rect(10, 10, 2, 6, 2, 6);
        let out = merge_by_subject("x", img, &[region("sky", "blue sky", m.clone())], &[]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask, m);
        assert_eq!(out[0].caption, "blue sky");
    }

    #[test]
    fn merge_groups_match_brute_force() {
        let img = Arc::new(Image::new(10, 10));
        let regions = [
            region("tree", "oak tree", rect(10, 10, 0, 2, 0, 2)),
            region("tree", "pine tree", rect(10, 10, 4, 8, 0, 2)),
            region("sky", "sky", rect(10, 10, 0, 2, 5, 10)),
        ];
        let out = merge_by_subject("x", img, &regions, &[]).unwrap();
        // brute force: count distinct subjects by pairwise comparison
        let distinct = (0..regions.len())
            .filter(|&i| (0..i).all(|j| regions[j].subject != regions[i].subject))
            .count();
        assert_eq!(out.len(), distinct);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].caption, "pine tree");
    }

    proptest! {
        #[test]
        fn merging_never_loses_pixels(
            subjects in proptest::collection::vec(0usize..3, 1..6),
            seeds in proptest::collection::vec(any::<u64>(), 6),
        ) {
            let names = ["a", "b", "c"];
            let regions: Vec<_> = subjects.iter().enumerate().map(|(i, &s)| {
                let seed = seeds[i];
                let m = Plane::from_fn(8, 8, |y, x| if (seed >> ((y * 8 + x) % 64)) & 1 == 1 { 1.0 } else { 0.0 });
                region(names[s], names[s], m)
            }).collect();
            let out = merge_by_subject("p", Arc::new(Image::new(8, 8)), &regions, &[]).unwrap();
            prop_assert!(out.len() <= regions.len());
            for t in &out {
                let max_member = regions.iter().filter(|r| r.subject == t.subject)
                    .map(|r| r.source.mask.positive_count()).max().unwrap();
                prop_assert!(t.mask.positive_count() >= max_member);
            }
        }
    }
}
