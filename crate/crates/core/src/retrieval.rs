//! Query answering: rank places by their best image similarity, optionally
//! after dropping places whose best similarity falls below the place threshold.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;

use crate::error::{Result, VprError};
use crate::similarity::{sq_norm, NormCache};
use crate::store::{Dataset, Descriptor};
use crate::thresholds::ThresholdTable;

/// Database images grouped by place, over a shared descriptor cache.
#[derive(Debug, Clone)]
pub struct PlaceDatabase<'a> {
    cache: NormCache<'a>,
    places: Vec<(u32, Vec<usize>)>,
}

impl<'a> PlaceDatabase<'a> {
    /// Every image of every place in the dataset.
    pub fn from_dataset(dataset: &'a Dataset) -> Result<Self> {
        let cache = NormCache::new(&dataset.descriptors)?;
        let places = dataset
            .manifest
            .places()
            .map(|(p, imgs)| (p, imgs.to_vec()))
            .collect();
        Self::new(cache, places)
    }

    /// `places` lists `(place_id, entry indices into the cache)`.
    pub fn new(cache: NormCache<'a>, places: Vec<(u32, Vec<usize>)>) -> Result<Self> {
        if places.is_empty() || places.iter().any(|(_, imgs)| imgs.is_empty()) {
            return Err(VprError::EmptyDatabase);
        }
        Ok(Self { cache, places })
    }

    pub fn places(&self) -> &[(u32, Vec<usize>)] {
        &self.places
    }

    pub fn dim(&self) -> usize {
        self.cache.dim()
    }

    /// Best similarity of `query` to each place, in database place order.
    pub(crate) fn best_similarities(&self, query: &Descriptor) -> Result<Vec<f64>> {
        if query.dim() != self.dim() {
            return Err(VprError::DimMismatch {
                expected: self.dim(),
                actual: query.dim(),
            });
        }
        let sq_q = sq_norm(query.values());
        if sq_q == 0.0 {
            return Err(VprError::ZeroNormQuery);
        }
        Ok(self
            .places
            .par_iter()
            .map(|(_, imgs)| {
                imgs.iter()
                    .map(|&j| self.cache.cosine_external(query.values(), sq_q, j).value())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect())
    }
}

/// One entry of the place similarity vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaceScore {
    pub place_id: u32,
    pub best_similarity: f64,
    /// `None` when scored without a threshold table.
    pub threshold: Option<f64>,
    /// `best_similarity - threshold`, with a missing threshold read as 0.
    pub margin: f64,
    pub passed: bool,
}

impl PlaceScore {
    fn new(place_id: u32, best_similarity: f64, threshold: Option<f64>) -> Self {
        let margin = best_similarity - threshold.unwrap_or(0.0);
        Self {
            place_id,
            best_similarity,
            threshold,
            margin,
            passed: margin >= 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingMode {
    Baseline,
    Filtered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub mode: RankingMode,
    pub places: Vec<PlaceScore>,
    /// Only ever true for a filtered ranking with no survivors.
    pub unknown_place: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BestMatch {
    Place(u32),
    Unknown,
}

impl fmt::Display for BestMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BestMatch::Place(p) => write!(f, "{p}"),
            BestMatch::Unknown => f.write_str("UNKNOWN"),
        }
    }
}

/// Scores a query against every place of the database.
pub fn score_places(
    query: &Descriptor,
    db: &PlaceDatabase<'_>,
    thresholds: Option<&ThresholdTable>,
) -> Result<Vec<PlaceScore>> {
    let best = db.best_similarities(query)?;
    db.places
        .iter()
        .zip(best)
        .map(|((place_id, _), s)| {
            let threshold = match thresholds {
                Some(t) => Some(t.get(*place_id).ok_or(VprError::MissingPlace(*place_id))?),
                None => None,
            };
            Ok(PlaceScore::new(*place_id, s, threshold))
        })
        .collect()
}

fn ranking_order(a: &PlaceScore, b: &PlaceScore) -> Ordering {
    b.best_similarity
        .total_cmp(&a.best_similarity)
        .then(a.place_id.cmp(&b.place_id))
}

/// All places by descending best similarity, ascending place id on ties.
pub fn rank_baseline(scores: &[PlaceScore]) -> RankedResult {
    let mut places = scores.to_vec();
    places.sort_by(ranking_order);
    RankedResult {
        mode: RankingMode::Baseline,
        places,
        unknown_place: false,
    }
}

/// The baseline ranking restricted to places that passed their threshold.
pub fn rank_filtered(scores: &[PlaceScore]) -> Result<RankedResult> {
    if scores.iter().any(|s| s.threshold.is_none()) {
        return Err(VprError::MissingThresholds);
    }
    let places: Vec<PlaceScore> = rank_baseline(scores)
        .places
        .into_iter()
        .filter(|s| s.passed)
        .collect();
    Ok(RankedResult {
        mode: RankingMode::Filtered,
        unknown_place: places.is_empty(),
        places,
    })
}

pub fn best_match(result: &RankedResult) -> BestMatch {
    result
        .places
        .first()
        .map_or(BestMatch::Unknown, |s| BestMatch::Place(s.place_id))
}

/// Zero-based position `target` would take in the baseline (no thresholds) or
/// filtered ranking, or `None` if the filter removes it. Equivalent to
/// searching the output of [`rank_baseline`] / [`rank_filtered`] without
/// sorting.
pub(crate) fn rank_position(
    place_ids: &[u32],
    best: &[f64],
    thresholds: Option<&[f64]>,
    target: usize,
) -> Option<usize> {
    let passes = |i: usize| thresholds.is_none_or(|t| best[i] - t[i] >= 0.0);
    if !passes(target) {
        return None;
    }
    let (tid, ts) = (place_ids[target], best[target]);
    Some(
        (0..best.len())
            .filter(|&i| i != target && passes(i))
            .filter(|&i| best[i] > ts || (best[i] == ts && place_ids[i] < tid))
            .count(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DatasetManifest, ImageKey};
    use crate::thresholds::ThresholdMethod;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn score(place_id: u32, s: f64, t: Option<f64>) -> PlaceScore {
        PlaceScore::new(place_id, s, t)
    }

    fn ids(r: &RankedResult) -> Vec<u32> {
        r.places.iter().map(|s| s.place_id).collect()
    }

    fn three_places() -> Dataset {
        let vecs: [[f32; 3]; 6] = [
            [1.0, 0.0, 0.0],
            [0.8, 0.6, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.6, 0.8],
            [0.0, 0.0, 1.0],
            [-0.6, 0.0, 0.8],
        ];
        let keys = (0..6).map(|i| ImageKey::new(i / 2 * 7, 0, i % 2)).collect();
        Dataset::new(
            DatasetManifest::new("t", "t", keys).unwrap(),
            vecs.iter().map(|v| Descriptor::new(v.to_vec()).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_query_scores_one() {
        let ds = three_places();
        let db = PlaceDatabase::from_dataset(&ds).unwrap();
        let scores = score_places(ds.descriptor(2), &db, None).unwrap();
        let s7 = scores.iter().find(|s| s.place_id == 7).unwrap();
        assert_eq!(s7.best_similarity, 1.0);
        assert_eq!(best_match(&rank_baseline(&scores)), BestMatch::Place(7));
    }

    #[test]
    fn scores_match_nested_loop() {
        let ds = three_places();
        let db = PlaceDatabase::from_dataset(&ds).unwrap();
        let q = Descriptor::new(vec![0.3, -0.2, 0.9]).unwrap();
        let scores = score_places(&q, &db, None).unwrap();
        for s in &scores {
            let mut best = f64::NEG_INFINITY;
            for &e in ds.manifest.place_images(s.place_id).unwrap() {
                let d = ds.descriptor(e).values();
                let dot: f64 = (0..3).map(|k| q.values()[k] as f64 * d[k] as f64).sum();
                let nq: f64 = q.values().iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nd: f64 = d.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                best = best.max(dot / (nq * nd));
            }
            assert!((s.best_similarity - best).abs() < 1e-12);
            assert_eq!(s.margin, s.best_similarity);
        }
    }

    #[test]
    fn floor_thresholds_pass_everything() {
        let ds = three_places();
        let db = PlaceDatabase::from_dataset(&ds).unwrap();
        let t = ThresholdTable::uniform(&ds.manifest, ThresholdMethod::SimpleAverage, -1.0).unwrap();
        let q = Descriptor::new(vec![-1.0, -1.0, -1.0]).unwrap();
        let scores = score_places(&q, &db, Some(&t)).unwrap();
        assert!(scores.iter().all(|s| s.passed));
        let filtered = rank_filtered(&scores).unwrap();
        let baseline = rank_baseline(&scores);
        assert_eq!(filtered.places, baseline.places);
        assert_eq!(best_match(&filtered), best_match(&baseline));
    }

    #[test]
    fn score_errors() {
        let ds = three_places();
        let db = PlaceDatabase::from_dataset(&ds).unwrap();
        let bad = Descriptor::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(score_places(&bad, &db, None), Err(VprError::DimMismatch { .. })));
        let t = ThresholdTable::new(ThresholdMethod::SimpleAverage, 1, 0, BTreeMap::from([(0, 0.1)])).unwrap();
        assert!(matches!(
            score_places(ds.descriptor(0), &db, Some(&t)),
            Err(VprError::MissingPlace(7))
        ));
        let cache = NormCache::new(&ds.descriptors).unwrap();
        assert!(matches!(PlaceDatabase::new(cache, vec![]), Err(VprError::EmptyDatabase)));
    }

    #[test]
    fn baseline_order_and_ties() {
        let r = rank_baseline(&[score(0, 0.9, None), score(1, 0.7, None), score(2, 0.8, None)]);
        assert_eq!(ids(&r), vec![0, 2, 1]);
        assert!(!r.unknown_place);
        let r = rank_baseline(&[score(5, 0.5, None), score(3, 0.5, None)]);
        assert_eq!(ids(&r), vec![3, 5]);
        assert_eq!(best_match(&rank_baseline(&[score(2, 0.1, None), score(0, 0.3, None)])), BestMatch::Place(0));
    }

    #[test]
    fn filter_drops_failing_places() {
        let r = rank_filtered(&[score(0, 0.9, Some(0.95)), score(1, 0.7, Some(0.5))]).unwrap();
        assert_eq!(ids(&r), vec![1]);
        let r = rank_filtered(&[score(0, 0.1, Some(0.2)), score(1, -0.3, Some(0.0))]).unwrap();
        assert!(r.places.is_empty() && r.unknown_place);
        assert_eq!(best_match(&r), BestMatch::Unknown);
        assert_eq!(BestMatch::Unknown.to_string(), "UNKNOWN");
        // Exactly at threshold passes.
        assert!(score(0, 0.25, Some(0.25)).passed);
        assert!(matches!(rank_filtered(&[score(0, 0.1, None)]), Err(VprError::MissingThresholds)));
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<PlaceScore>> {
        prop::collection::vec((-4i32..=4, -4i32..=4), 1..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (s, t))| score(i as u32 * 2, s as f64 / 4.0, Some(t as f64 / 4.0)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn baseline_matches_stable_sort_oracle(scores in scores_strategy()) {
            let mut oracle = scores.clone();
            // place ids are ascending already, so a stable sort on score alone breaks ties by id
            oracle.sort_by(|a, b| b.best_similarity.partial_cmp(&a.best_similarity).unwrap());
            prop_assert_eq!(rank_baseline(&scores).places, oracle);
        }

        #[test]
        fn filtered_is_baseline_subsequence(scores in scores_strategy()) {
            let baseline = rank_baseline(&scores);
            let filtered = rank_filtered(&scores).unwrap();
            let expected: Vec<PlaceScore> =
                baseline.places.iter().copied().filter(|s| s.passed).collect();
            prop_assert_eq!(&filtered.places, &expected);
            if baseline.places[0].passed {
                prop_assert_eq!(best_match(&filtered), best_match(&baseline));
            }
        }

        #[test]
        fn raising_one_threshold_only_removes(scores in scores_strategy(), pick in any::<prop::sample::Index>()) {
            let before = rank_filtered(&scores).unwrap();
            let mut raised = scores.clone();
            let i = pick.index(raised.len());
            raised[i] = score(raised[i].place_id, raised[i].best_similarity, Some(1.0 + 1e-9));
            let after = rank_filtered(&raised).unwrap();
            let kept: Vec<u32> = ids(&before).into_iter().filter(|p| *p != raised[i].place_id).collect();
            prop_assert_eq!(ids(&after), kept);
        }

        #[test]
        fn rank_position_agrees_with_rankings(scores in scores_strategy(), pick in any::<prop::sample::Index>()) {
            let ids_v: Vec<u32> = scores.iter().map(|s| s.place_id).collect();
            let best: Vec<f64> = scores.iter().map(|s| s.best_similarity).collect();
            let th: Vec<f64> = scores.iter().map(|s| s.threshold.unwrap()).collect();
            let target = pick.index(scores.len());
            let tid = ids_v[target];
            let base_pos = rank_baseline(&scores).places.iter().position(|s| s.place_id == tid);
            prop_assert_eq!(rank_position(&ids_v, &best, None, target), base_pos);
            let filt_pos = rank_filtered(&scores).unwrap().places.iter().position(|s| s.place_id == tid);
            prop_assert_eq!(rank_position(&ids_v, &best, Some(&th), target), filt_pos);
        }
    }
}
