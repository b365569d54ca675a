//! Per-place acceptance thresholds from negative similarity statistics.
//!
//! For every training image of a place, the scores against all training
//! images of *other* places form its negative set. Each run of a
//! cross-validation loop records the mean of that set per image; across runs
//! each image's means become one Gaussian component of the place's mixture,
//! and the place threshold is either the variance-weighted or the plain
//! average of the component means.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{io_err, Result, VprError};
use crate::similarity::{NormCache, SimilarityScore};
use crate::store::{Dataset, DatasetManifest, ImageKey};

/// Lower bound applied to a component's standard deviation before inverting it.
pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdMethod {
    WeightedAverage,
    SimpleAverage,
}

impl ThresholdMethod {
    pub const ALL: [ThresholdMethod; 2] = [Self::SimpleAverage, Self::WeightedAverage];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::WeightedAverage => "weighted",
            Self::SimpleAverage => "simple",
        }
    }
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdMethod {
    type Err = VprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Self::WeightedAverage),
            "simple" => Ok(Self::SimpleAverage),
            other => Err(VprError::InvalidArgument(format!(
                "unknown threshold method {other:?} (expected `simple` or `weighted`)"
            ))),
        }
    }
}

/// One normal component: `(mean, variance)` fitted to `count` samples.
///
/// `weight` is 1 for a freshly fitted component and is reassigned when the
/// component joins a [`PlaceMixture`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
    pub weight: f64,
}

/// Scores of one training image against every training image of every other place.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub owner: ImageKey,
    pub scores: Vec<SimilarityScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceMixture {
    pub place_id: u32,
    pub components: Vec<GaussianComponent>,
}

/// The held-out query and the remaining training images of one place.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaceSplit {
    pub test: ImageKey,
    pub train: Vec<ImageKey>,
}

/// Everything one cross-validation run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub split: BTreeMap<u32, PlaceSplit>,
    pub mean_bad_scores: BTreeMap<ImageKey, f64>,
}

impl RunRecord {
    /// Training images per place.
    pub fn train_index(&self) -> BTreeMap<u32, Vec<ImageKey>> {
        self.split
            .iter()
            .map(|(p, s)| (*p, s.train.clone()))
            .collect()
    }

    /// `image_key,mean_bad_score` lines in key order.
    pub fn audit_text(&self) -> String {
        self.mean_bad_scores
            .iter()
            .map(|(k, v)| format!("{k},{v}\n"))
            .collect()
    }

    /// Writes `run_NNNN.csv` into `dir`.
    pub fn write_audit(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(format!("run_{:04}.csv", self.run_index));
        fs::write(&path, self.audit_text()).map_err(io_err(path))
    }
}

/// Per-place thresholds computed by one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub method: ThresholdMethod,
    pub runs: usize,
    pub seed: u64,
    pub thresholds: BTreeMap<u32, f64>,
}

impl ThresholdTable {
    pub fn new(
        method: ThresholdMethod,
        runs: usize,
        seed: u64,
        thresholds: BTreeMap<u32, f64>,
    ) -> Result<Self> {
        if let Some((p, t)) = thresholds.iter().find(|(_, t)| !(-1.0..=1.0).contains(*t)) {
            return Err(VprError::InvalidArgument(format!(
                "threshold {t} for place {p} outside [-1, 1]"
            )));
        }
        Ok(Self {
            method,
            runs,
            seed,
            thresholds,
        })
    }

    /// The same threshold for every place of `manifest`.
    pub fn uniform(manifest: &DatasetManifest, method: ThresholdMethod, value: f64) -> Result<Self> {
        let thresholds = manifest.places().map(|(p, _)| (p, value)).collect();
        Self::new(method, 0, 0, thresholds)
    }

    pub fn get(&self, place_id: u32) -> Option<f64> {
        self.thresholds.get(&place_id).copied()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{},{},{}\n", self.method, self.runs, self.seed);
        for (p, t) in &self.thresholds {
            out.push_str(&format!("{p},{t}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path).map_err(io_err(path))?.parse()
    }
}

impl FromStr for ThresholdTable {
    type Err = VprError;

    fn from_str(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| VprError::ThresholdTable { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        let [method, runs, seed] = fields[..] else {
            return Err(err(1, "header must be `method,runs,seed`".into()));
        };
        let method: ThresholdMethod = method.parse()?;
        let runs = runs.parse().map_err(|_| err(1, format!("bad runs {runs:?}")))?;
        let seed = seed.parse().map_err(|_| err(1, format!("bad seed {seed:?}")))?;

        let mut thresholds = BTreeMap::new();
        for (line, raw) in lines {
            if raw.trim().is_empty() {
                continue;
            }
            let (p, t) = raw
                .split_once(',')
                .ok_or_else(|| err(line, format!("expected `place_id,theta`, got {raw:?}")))?;
            let p: u32 = p.parse().map_err(|_| err(line, format!("bad place id {p:?}")))?;
            let t: f64 = t.parse().map_err(|_| err(line, format!("bad theta {t:?}")))?;
            if thresholds.insert(p, t).is_some() {
                return Err(err(line, format!("duplicate place {p}")));
            }
        }
        ThresholdTable::new(method, runs, seed, thresholds)
    }
}

/// Mean and population variance of `values` as sequential folds.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().fold(0.0, |acc, v| acc + v) / n;
    let variance = values
        .iter()
        .fold(0.0, |acc, v| acc + (v - mean) * (v - mean))
        / n;
    (mean, variance)
}

fn fit_samples(values: &[f64]) -> Result<GaussianComponent> {
    if values.is_empty() {
        return Err(VprError::EmptyScores);
    }
    let (mean, variance) = moments(values);
    Ok(GaussianComponent {
        mean,
        variance,
        count: values.len(),
        weight: 1.0,
    })
}

/// Builds the negative set of training image `img`: its scores against the
/// training images of every other place, places in ascending id order and
/// images in the order given.
pub fn build_negative_set(
    img: ImageKey,
    train_index: &BTreeMap<u32, Vec<ImageKey>>,
    dataset: &Dataset,
) -> Result<NegativeSet> {
    if train_index.len() < 2 {
        return Err(VprError::TooFewPlaces(train_index.len()));
    }
    let is_training = train_index
        .get(&img.place_id)
        .is_some_and(|imgs| imgs.contains(&img));
    if !is_training {
        return Err(VprError::NotTrainingImage(img.to_string()));
    }
    let lookup = |k: &ImageKey| {
        dataset
            .manifest
            .index_of(k)
            .ok_or_else(|| VprError::MalformedKey(k.to_string()))
    };
    let owner = dataset.descriptor(lookup(&img)?);
    let mut scores = Vec::new();
    for (_, imgs) in train_index.iter().filter(|(p, _)| **p != img.place_id) {
        for k in imgs {
            scores.push(crate::similarity::cosine(owner, dataset.descriptor(lookup(k)?))?);
        }
    }
    Ok(NegativeSet { owner: img, scores })
}

/// Fits a normal distribution (mean, population variance) to a negative set.
pub fn fit_component(set: &NegativeSet) -> Result<GaussianComponent> {
    let values: Vec<f64> = set.scores.iter().map(|s| s.value()).collect();
    fit_samples(&values)
}

/// Combines components into a mixture with size-proportional weights.
pub fn assemble_mixture(place_id: u32, components: Vec<GaussianComponent>) -> Result<PlaceMixture> {
    if components.is_empty() {
        return Err(VprError::EmptyMixture);
    }
    if components.iter().any(|c| c.count == 0) {
        return Err(VprError::EmptyScores);
    }
    let total = components.iter().map(|c| c.count).sum::<usize>() as f64;
    let components = components
        .into_iter()
        .map(|c| GaussianComponent {
            weight: c.count as f64 / total,
            ..c
        })
        .collect();
    Ok(PlaceMixture {
        place_id,
        components,
    })
}

fn mean_range(m: &PlaceMixture) -> (f64, f64) {
    m.components
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.mean), hi.max(c.mean))
        })
}

/// Precision-weighted average of the component means:
/// `sum(w_i / s_i^2 * mu_i) / sum(w_j / s_j^2)` with `s = max(sigma, SIGMA_MIN)`.
pub fn weighted_threshold(m: &PlaceMixture) -> f64 {
    let (num, den) = m.components.iter().fold((0.0, 0.0), |(num, den), c| {
        let sigma = c.variance.sqrt().max(SIGMA_MIN);
        let tau_sq = 1.0 / (sigma * sigma);
        (num + c.weight * tau_sq * c.mean, den + c.weight * tau_sq)
    });
    let (lo, hi) = mean_range(m);
    // Rounding can push a convex combination a few ulps outside its hull.
    (num / den).clamp(lo, hi)
}

/// Unweighted mean of the component means.
pub fn simple_threshold(m: &PlaceMixture) -> f64 {
    let means: Vec<f64> = m.components.iter().map(|c| c.mean).collect();
    let (lo, hi) = mean_range(m);
    moments(&means).0.clamp(lo, hi)
}

pub fn threshold_for(m: &PlaceMixture, method: ThresholdMethod) -> f64 {
    match method {
        ThresholdMethod::WeightedAverage => weighted_threshold(m),
        ThresholdMethod::SimpleAverage => simple_threshold(m),
    }
}

/// Entry indices of one run's split.
#[derive(Debug, Clone)]
pub(crate) struct SplitIndices {
    /// `(place_id, test entry, train entries)` in ascending place order.
    pub places: Vec<(u32, usize, Vec<usize>)>,
}

fn split_rng(seed: u64, run_index: u64, place_id: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&run_index.to_le_bytes());
    key[16..20].copy_from_slice(&place_id.to_le_bytes());
    key[24..32].copy_from_slice(b"vprsplit");
    ChaCha8Rng::from_seed(key)
}

/// Draws one test image per place, uniformly, from a generator keyed by
/// `(seed, run_index, place_id)`.
pub(crate) fn sample_split(manifest: &DatasetManifest, seed: u64, run_index: usize) -> SplitIndices {
    let places = manifest
        .places()
        .map(|(place_id, images)| {
            let pick = split_rng(seed, run_index as u64, place_id).gen_range(0..images.len());
            let train = images
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != pick)
                .map(|(_, e)| *e)
                .collect();
            (place_id, images[pick], train)
        })
        .collect();
    SplitIndices { places }
}

/// Mean negative score of every training image in the split, as
/// `(entry, mean)` in place then manifest order.
///
/// Each mean is the same left-to-right fold that `fit_component` applies to
/// the image's negative set, so the two agree bit for bit.
pub(crate) fn split_mean_bad_scores(
    cache: &NormCache<'_>,
    split: &SplitIndices,
) -> Result<Vec<(usize, f64)>> {
    if split.places.len() < 2 {
        return Err(VprError::TooFewPlaces(split.places.len()));
    }
    let owners: Vec<(usize, usize)> = split
        .places
        .iter()
        .enumerate()
        .flat_map(|(slot, (_, _, train))| train.iter().map(move |e| (slot, *e)))
        .collect();
    Ok(owners
        .par_iter()
        .map(|&(slot, entry)| {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (other, (_, _, train)) in split.places.iter().enumerate() {
                if other == slot {
                    continue;
                }
                for &j in train {
                    sum += cache.cosine(entry, j).value();
                    count += 1;
                }
            }
            (entry, sum / count as f64)
        })
        .collect())
}

pub(crate) fn run_record(
    dataset: &Dataset,
    cache: &NormCache<'_>,
    seed: u64,
    run_index: usize,
) -> Result<(SplitIndices, RunRecord)> {
    let split = sample_split(&dataset.manifest, seed, run_index);
    let keys = dataset.manifest.entries();
    let means = split_mean_bad_scores(cache, &split)?;
    let record = RunRecord {
        run_index,
        seed,
        split: split
            .places
            .iter()
            .map(|(p, test, train)| {
                (
                    *p,
                    PlaceSplit {
                        test: keys[*test],
                        train: train.iter().map(|e| keys[*e]).collect(),
                    },
                )
            })
            .collect(),
        mean_bad_scores: means.into_iter().map(|(e, m)| (keys[e], m)).collect(),
    };
    Ok((split, record))
}

/// Runs `runs` seeded train/test splits, records each training image's mean
/// negative score per run, then aggregates the runs into a threshold table.
pub fn generate_thresholds(
    dataset: &Dataset,
    runs: usize,
    seed: u64,
    method: ThresholdMethod,
) -> Result<(ThresholdTable, Vec<RunRecord>)> {
    let records = generate_run_records(dataset, runs, seed)?;
    let table = calculate_place_averages(&records, &dataset.manifest, method)?;
    Ok((table, records))
}

/// The per-run half of [`generate_thresholds`], shared by every method.
pub fn generate_run_records(dataset: &Dataset, runs: usize, seed: u64) -> Result<Vec<RunRecord>> {
    if runs == 0 {
        return Err(VprError::InvalidArgument("runs must be at least 1".into()));
    }
    let cache = NormCache::new(&dataset.descriptors)?;
    (0..runs)
        .into_par_iter()
        .map(|run| run_record(dataset, &cache, seed, run).map(|(_, r)| r))
        .collect()
}

/// Aggregates run records into per-place thresholds.
///
/// Each image's per-run mean negative scores become one component (their mean
/// and population variance); components are weighted by sample count.
pub fn calculate_place_averages(
    records: &[RunRecord],
    manifest: &DatasetManifest,
    method: ThresholdMethod,
) -> Result<ThresholdTable> {
    let first = records
        .first()
        .ok_or_else(|| VprError::InvalidArgument("no run records".into()))?;
    for record in records {
        if let Some((p, _)) = manifest.places().find(|(p, _)| !record.split.contains_key(p)) {
            return Err(VprError::MissingPlace(p));
        }
    }

    let mut samples: BTreeMap<ImageKey, Vec<f64>> = BTreeMap::new();
    for record in records {
        for (key, mean) in &record.mean_bad_scores {
            samples.entry(*key).or_default().push(*mean);
        }
    }

    let keys = manifest.entries();
    let mut thresholds = BTreeMap::new();
    for (place_id, images) in manifest.places() {
        let components = images
            .iter()
            .filter_map(|e| samples.get(&keys[*e]))
            .map(|s| fit_samples(s))
            .collect::<Result<Vec<_>>>()?;
        if components.is_empty() {
            return Err(VprError::MissingPlace(place_id));
        }
        let mixture = assemble_mixture(place_id, components)?;
        thresholds.insert(place_id, threshold_for(&mixture, method));
    }
    ThresholdTable::new(method, records.len(), first.seed, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Descriptor;
    use rand::Rng;
    use proptest::prelude::*;

    fn comp(mean: f64, variance: f64, count: usize) -> GaussianComponent {
        GaussianComponent {
            mean,
            variance,
            count,
            weight: 1.0,
        }
    }

    fn scores(v: &[f64]) -> NegativeSet {
        // Only the values matter to fit_component.
        NegativeSet {
            owner: ImageKey::new(0, 0, 0),
            scores: v
                .iter()
                .map(|x| {
                    let a = Descriptor::new(vec![1.0, 0.0]).unwrap();
                    let angle = x.acos();
                    let b = Descriptor::new(vec![angle.cos() as f32, angle.sin() as f32]).unwrap();
                    crate::similarity::cosine(&a, &b).unwrap()
                })
                .collect(),
        }
    }

    fn dataset(places: &[&[[f32; 2]]]) -> Dataset {
        let mut keys = Vec::new();
        let mut descs = Vec::new();
        for (p, imgs) in places.iter().enumerate() {
            for (g, v) in imgs.iter().enumerate() {
                keys.push(ImageKey::new(p as u32, 0, g as u32));
                descs.push(Descriptor::new(v.to_vec()).unwrap());
            }
        }
        Dataset::new(DatasetManifest::new("t", "t.vprd", keys).unwrap(), descs).unwrap()
    }

    #[test]
    fn fit_single_score() {
        let c = fit_samples(&[0.5]).unwrap();
        assert_eq!((c.mean, c.variance, c.count), (0.5, 0.0, 1));
        let c = fit_component(&scores(&[0.5])).unwrap();
        assert!((c.mean - 0.5).abs() < 1e-6);
    }

    #[test]
    fn fit_uses_population_variance() {
        let c = fit_samples(&[0.2, 0.4]).unwrap();
        assert!((c.mean - 0.3).abs() < 1e-15);
        assert!((c.variance - 0.01).abs() < 1e-15);
        assert_eq!(c.count, 2);
    }

    #[test]
    fn fit_rejects_empty() {
        let empty = NegativeSet {
            owner: ImageKey::new(0, 0, 0),
            scores: vec![],
        };
        assert!(matches!(fit_component(&empty), Err(VprError::EmptyScores)));
    }

    #[test]
    fn fit_recovers_seeded_normal() {
        // Box-Muller over a seeded generator; N(0.1, 0.05^2), 10k samples.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                0.1 + 0.05 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let c = fit_samples(&samples).unwrap();
        assert!((c.mean - 0.1).abs() <= 3.0 * 0.05 / 100.0, "mean {}", c.mean);
        assert!((c.variance - 0.0025).abs() <= 0.1 * 0.0025, "var {}", c.variance);
    }

    #[test]
    fn mixture_weights() {
        let w = |counts: &[usize]| -> Vec<f64> {
            let comps = counts.iter().map(|&n| comp(0.0, 0.0, n)).collect();
            assemble_mixture(0, comps)
                .unwrap()
                .components
                .iter()
                .map(|c| c.weight)
                .collect()
        };
        assert_eq!(w(&[3, 3, 3]), vec![1.0 / 3.0; 3]);
        assert_eq!(w(&[1, 3]), vec![0.25, 0.75]);
        assert_eq!(w(&[7]), vec![1.0]);
        assert!(matches!(assemble_mixture(0, vec![]), Err(VprError::EmptyMixture)));
    }

    #[test]
    fn weighted_threshold_worked_example() {
        let m = PlaceMixture {
            place_id: 0,
            components: vec![
                GaussianComponent { mean: 0.2, variance: 0.01, count: 1, weight: 0.5 },
                GaussianComponent { mean: 0.4, variance: 0.04, count: 1, weight: 0.5 },
            ],
        };
        // tau^2 = [100, 25]: (0.5*100*0.2 + 0.5*25*0.4) / (0.5*100 + 0.5*25) = 15 / 62.5
        assert!((weighted_threshold(&m) - 0.24).abs() <= 1e-12);
        assert!((simple_threshold(&m) - 0.3).abs() <= 1e-15);
    }

    #[test]
    fn single_component_thresholds_are_its_mean() {
        for (var, w) in [(0.0, 1.0), (0.3, 1.0), (1e-20, 1.0)] {
            let m = PlaceMixture {
                place_id: 1,
                components: vec![GaussianComponent { mean: 0.33, variance: var, count: 4, weight: w }],
            };
            assert_eq!(weighted_threshold(&m), 0.33);
            assert_eq!(simple_threshold(&m), 0.33);
        }
    }

    #[test]
    fn zero_variance_uses_sigma_clamp() {
        let m = assemble_mixture(0, vec![comp(0.1, 0.0, 2), comp(0.5, 0.0, 2)]).unwrap();
        assert!((weighted_threshold(&m) - 0.3).abs() < 1e-15);
        // A zero-variance component dominates a wide one.
        let m = assemble_mixture(0, vec![comp(0.1, 0.0, 1), comp(0.5, 0.04, 1)]).unwrap();
        assert!((weighted_threshold(&m) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn simple_threshold_is_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let means: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = assemble_mixture(0, means.iter().map(|&mu| comp(mu, 0.01, 3)).collect()).unwrap();
        let mut sum = 0.0;
        for mu in &means {
            sum += mu;
        }
        assert!((simple_threshold(&m) - sum / 20.0).abs() <= 1e-15);
    }

    #[test]
    fn negative_set_counts_other_place_images() {
        let ds = dataset(&[&[[1.0, 0.0], [0.9, 0.1]], &[[0.0, 1.0], [0.1, 1.0], [0.2, 1.0]]]);
        let index: BTreeMap<u32, Vec<ImageKey>> = ds
            .manifest
            .places()
            .map(|(p, imgs)| (p, imgs.iter().map(|e| ds.manifest.entries()[*e]).collect()))
            .collect();
        let set = build_negative_set(ImageKey::new(0, 0, 0), &index, &ds).unwrap();
        assert_eq!(set.scores.len(), 3);

        let single: BTreeMap<_, _> = index.iter().take(1).map(|(k, v)| (*k, v.clone())).collect();
        assert!(matches!(
            build_negative_set(ImageKey::new(0, 0, 0), &single, &ds),
            Err(VprError::TooFewPlaces(1))
        ));
        let mut partial = index.clone();
        partial.get_mut(&0).unwrap().remove(0);
        assert!(matches!(
            build_negative_set(ImageKey::new(0, 0, 0), &partial, &ds),
            Err(VprError::NotTrainingImage(_))
        ));
    }

    #[test]
    fn orthogonal_places_give_zero_scores() {
        let ds = dataset(&[&[[1.0, 0.0], [2.0, 0.0]], &[[0.0, 1.0], [0.0, 3.0]]]);
        let index: BTreeMap<u32, Vec<ImageKey>> = ds
            .manifest
            .places()
            .map(|(p, imgs)| (p, imgs.iter().map(|e| ds.manifest.entries()[*e]).collect()))
            .collect();
        let set = build_negative_set(ImageKey::new(0, 0, 1), &index, &ds).unwrap();
        assert!(set.scores.iter().all(|s| s.value() == 0.0));
    }

    #[test]
    fn split_picks_one_test_per_place_deterministically() {
        let ds = dataset(&[
            &[[1.0, 0.0], [0.9, 0.1], [0.8, 0.2]],
            &[[0.0, 1.0], [0.1, 1.0]],
        ]);
        for run in 0..20 {
            let a = sample_split(&ds.manifest, 9, run);
            let b = sample_split(&ds.manifest, 9, run);
            assert_eq!(a.places, b.places);
            for (p, test, train) in &a.places {
                let all = ds.manifest.place_images(*p).unwrap();
                assert_eq!(train.len() + 1, all.len());
                assert!(!train.contains(test));
            }
        }
    }

    #[test]
    fn split_is_roughly_uniform() {
        let keys: Vec<ImageKey> = (0..3).map(|g| ImageKey::new(0, 0, g)).chain(
            (0..2).map(|g| ImageKey::new(1, 0, g))).collect();
        let m = DatasetManifest::new("m", "m", keys).unwrap();
        let mut hits = [0usize; 3];
        for run in 0..3000 {
            let s = sample_split(&m, 1, run);
            hits[s.places[0].1] += 1;
        }
        for h in hits {
            assert!((900..1100).contains(&h), "{hits:?}");
        }
    }

    #[test]
    fn fast_means_match_negative_set_fold() {
        let ds = dataset(&[
            &[[1.0, 0.2], [0.9, 0.1], [0.8, -0.3]],
            &[[0.0, 1.0], [0.1, 1.0]],
            &[[-1.0, 0.5], [-0.7, -0.6]],
        ]);
        let cache = NormCache::new(&ds.descriptors).unwrap();
        let (_, record) = run_record(&ds, &cache, 3, 0).unwrap();
        let index = record.train_index();
        for (key, mean) in &record.mean_bad_scores {
            let set = build_negative_set(*key, &index, &ds).unwrap();
            assert_eq!(fit_component(&set).unwrap().mean.to_bits(), mean.to_bits());
        }
    }

    #[test]
    fn two_by_two_hand_trace() {
        // Place 0: e1, (1,1); place 1: e2, (-1,1). One test image per place
        // leaves a single training image each, whose mean bad score is the
        // cosine to the other place's single training image.
        let ds = dataset(&[&[[1.0, 0.0], [1.0, 1.0]], &[[0.0, 1.0], [-1.0, 1.0]]]);
        let (table, records) = generate_thresholds(&ds, 1, 0, ThresholdMethod::SimpleAverage).unwrap();
        let r = &records[0];
        let cos = |a: [f64; 2], b: [f64; 2]| {
            (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt())
        };
        let vec_of = |k: &ImageKey| -> [f64; 2] {
            match (k.place_id, k.group_index) {
                (0, 0) => [1.0, 0.0],
                (0, 1) => [1.0, 1.0],
                (1, 0) => [0.0, 1.0],
                _ => [-1.0, 1.0],
            }
        };
        let a = vec_of(&r.split[&0].train[0]);
        let b = vec_of(&r.split[&1].train[0]);
        let expected = cos(a, b);
        assert!((table.get(0).unwrap() - expected).abs() < 1e-12);
        assert!((table.get(1).unwrap() - expected).abs() < 1e-12);
        let weighted = calculate_place_averages(&records, &ds.manifest, ThresholdMethod::WeightedAverage).unwrap();
        assert_eq!(weighted.thresholds, table.thresholds);
    }

    #[test]
    fn across_run_component_statistics() {
        let k0 = ImageKey::new(0, 0, 0);
        let k1 = ImageKey::new(0, 0, 1);
        let k2 = ImageKey::new(1, 0, 0);
        let k3 = ImageKey::new(1, 0, 1);
        let m = DatasetManifest::new("m", "m", vec![k0, k1, k2, k3]).unwrap();
        let rec = |run, a: f64| RunRecord {
            run_index: run,
            seed: 4,
            split: BTreeMap::from([
                (0, PlaceSplit { test: k1, train: vec![k0] }),
                (1, PlaceSplit { test: k3, train: vec![k2] }),
            ]),
            mean_bad_scores: BTreeMap::from([(k0, a), (k2, 0.5)]),
        };
        let records = [rec(0, 0.1), rec(1, 0.3)];
        let t = calculate_place_averages(&records, &m, ThresholdMethod::SimpleAverage).unwrap();
        assert!((t.get(0).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(t.get(1), Some(0.5));
        assert_eq!((t.runs, t.seed), (2, 4));

        let mut missing = rec(2, 0.0);
        missing.split.remove(&1);
        assert!(matches!(
            calculate_place_averages(&[missing], &m, ThresholdMethod::SimpleAverage),
            Err(VprError::MissingPlace(1))
        ));
    }

    #[test]
    fn generation_is_deterministic_and_rejects_zero_runs() {
        let ds = dataset(&[
            &[[1.0, 0.2], [0.9, 0.1], [0.8, -0.3]],
            &[[0.0, 1.0], [0.1, 1.0]],
            &[[-1.0, 0.5], [-0.7, -0.6]],
        ]);
        for method in ThresholdMethod::ALL {
            let a = generate_thresholds(&ds, 7, 42, method).unwrap();
            let b = generate_thresholds(&ds, 7, 42, method).unwrap();
            assert_eq!(a.0.to_text(), b.0.to_text());
            assert_eq!(a.1, b.1);
        }
        assert!(generate_thresholds(&ds, 0, 0, ThresholdMethod::SimpleAverage).is_err());
    }

    #[test]
    fn table_text_round_trip() {
        let t = ThresholdTable::new(
            ThresholdMethod::WeightedAverage,
            50,
            7,
            BTreeMap::from([(0, 0.1 + 0.2), (4, -0.000123456789), (9, 1.0)]),
        )
        .unwrap();
        let text = t.to_text();
        assert!(text.starts_with("weighted,50,7\n0,0.30000000000000004\n"));
        assert_eq!(text.parse::<ThresholdTable>().unwrap(), t);
        assert!("bogus,1,1\n".parse::<ThresholdTable>().is_err());
        assert!("simple,1\n".parse::<ThresholdTable>().is_err());
        assert!("simple,1,1\n0,1.5\n".parse::<ThresholdTable>().is_err());
    }

    #[test]
    fn audit_lines() {
        let k = ImageKey::new(2, 1, 0);
        let r = RunRecord {
            run_index: 3,
            seed: 0,
            split: BTreeMap::new(),
            mean_bad_scores: BTreeMap::from([(k, 0.25)]),
        };
        assert_eq!(r.audit_text(), "Place0002_Cond01_G00,0.25\n");
        let dir = tempfile::tempdir().unwrap();
        r.write_audit(dir.path()).unwrap();
        assert!(dir.path().join("run_0003.csv").exists());
    }

    fn mixture_strategy() -> impl Strategy<Value = PlaceMixture> {
        prop::collection::vec((-1.0f64..1.0, 0.0f64..0.5, 1usize..60), 1..12).prop_map(|v| {
            assemble_mixture(0, v.into_iter().map(|(m, var, n)| comp(m, var, n)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn thresholds_are_convex(m in mixture_strategy()) {
            let (lo, hi) = mean_range(&m);
            for t in [weighted_threshold(&m), simple_threshold(&m)] {
                prop_assert!(lo <= t && t <= hi);
            }
            let wsum: f64 = m.components.iter().map(|c| c.weight).sum();
            prop_assert!((wsum - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn uniform_variance_and_weight_reduces_to_mean(
            means in prop::collection::vec(-1.0f64..1.0, 1..16),
            var in 0.0f64..0.3,
            n in 1usize..40,
        ) {
            let m = assemble_mixture(0, means.iter().map(|&mu| comp(mu, var, n)).collect()).unwrap();
            prop_assert!((weighted_threshold(&m) - simple_threshold(&m)).abs() <= 1e-12);
        }
    }
}
