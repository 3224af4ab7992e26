//! Synthetic Gaussian-mixture classification data, stratified label splits
//! and the parametric multi-view augmentation.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub within_class_noise: f64,
    /// Gaussian components per class. Every component centre keeps
    /// `class_separation` from every other centre.
    #[serde(default = "one")]
    pub modes_per_class: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 32,
            samples_per_class: 500,
            class_separation: 6.0,
            within_class_noise: 1.0,
            modes_per_class: 1,
            seed: 0,
        }
    }
}

/// Points in `R^d`, row-major, with optional integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    dim: usize,
    features: Vec<S>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(dim: usize, features: Vec<S>, labels: Option<Vec<usize>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                shape: vec![dim],
                len: features.len(),
            });
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape {
                    shape: vec![n],
                    len: l.len(),
                });
            }
        }
        let num_classes = labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
            .unwrap_or(0);
        Ok(Self {
            dim,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn point(&self, i: usize) -> &[S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn features(&self) -> &[S] {
        &self.features
    }

    /// All points as an `n x d` tensor.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("non-empty dataset")
    }

    /// Rows `indices` as a `len x d` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        Tensor::new(vec![indices.len(), self.dim], data).expect("non-empty gather")
    }
}

/// Component centres of a class-conditional Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    spec: DatasetSpec,
    /// `num_classes * modes_per_class` centres, class-major.
    centres: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        if spec.num_classes < 1 || spec.dim == 0 || spec.modes_per_class == 0 {
            return Err(Error::Generation(format!("invalid dataset spec {spec:?}")));
        }
        if !(spec.class_separation > 0.0) || !(spec.within_class_noise >= 0.0) {
            return Err(Error::Generation(format!(
                "separation must be > 0 and noise >= 0, got {} and {}",
                spec.class_separation, spec.within_class_noise
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Centre spread chosen so typical pairwise distances sit a little
        // above the required separation.
        let spread = 1.25 * spec.class_separation / (2.0 * spec.dim as f64).sqrt();
        let wanted = spec.num_classes * spec.modes_per_class;
        let mut centres: Vec<Vec<f64>> = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while centres.len() < wanted {
            if attempts == MAX_REJECTIONS {
                return Err(Error::Generation(format!(
                    "could not place {wanted} centres {} apart in {} dimensions",
                    spec.class_separation, spec.dim
                )));
            }
            attempts += 1;
            let c: Vec<f64> = (0..spec.dim)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let far = centres.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= spec.class_separation
            });
            if far {
                centres.push(c);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            centres,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn class_mean(&self, class: usize, mode: usize) -> &[f64] {
        &self.centres[class * self.spec.modes_per_class + mode]
    }

    /// Draws `per_class` points for every class. `stream` selects an
    /// independent sample (0 is the training set).
    pub fn sample<S: Scalar>(&self, per_class: usize, stream: u64) -> Result<Dataset<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.spec.seed, 0x5a4d_504c, stream]));
        let (k, d) = (self.spec.num_classes, self.spec.dim);
        let mut features = Vec::with_capacity(per_class * k * d);
        let mut labels = Vec::with_capacity(per_class * k);
        for class in 0..k {
            for i in 0..per_class {
                let centre = self.class_mean(class, i % self.spec.modes_per_class);
                for &m in centre {
                    let eps: f64 = rng.sample(StandardNormal);
                    features.push(S::lit(m + self.spec.within_class_noise * eps));
                }
                labels.push(class);
            }
        }
        let mut ds = Dataset::new(d, features, Some(labels))?;
        ds.num_classes = k;
        Ok(ds)
    }
}

/// Gaussian-mixture training set for `spec`, deterministic per seed.
pub fn generate_dataset<S: Scalar>(spec: &DatasetSpec) -> Result<Dataset<S>> {
    GaussianMixture::new(spec)?.sample(spec.samples_per_class, 0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl LabeledSplit {
    /// Membership mask over the whole dataset.
    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.labeled {
            m[i] = true;
        }
        m
    }
}

/// Stratified random choice of `ceil(fraction * class_count)` labelled
/// points per class.
pub fn split_labels<S: Scalar>(
    dataset: &Dataset<S>,
    fraction: f64,
    seed: u64,
) -> Result<LabeledSplit> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Split("dataset has no labels".into()))?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1]")));
    }
    let classes = dataset.num_classes();
    let budget = fraction * dataset.len() as f64;
    if budget < classes as f64 {
        return Err(Error::Split(format!(
            "fraction {fraction} of {} points gives {budget} labels for {classes} classes",
            dataset.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x53504c54]));
    let mut labeled = Vec::new();
    for members in &mut by_class {
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..take.min(members.len())]);
    }
    labeled.sort_unstable();
    let mask = {
        let mut m = vec![false; dataset.len()];
        for &i in &labeled {
            m[i] = true;
        }
        m
    };
    let unlabeled = (0..dataset.len()).filter(|&i| !mask[i]).collect();
    Ok(LabeledSplit { labeled, unlabeled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub num_large: usize,
    pub num_small: usize,
    /// Additive noise level per view slot, large views first. A single
    /// value applies to every slot.
    pub noise_sigma: Vec<f64>,
    pub mask_fraction: f64,
    pub scale_jitter: (f64, f64),
    pub small_view_dims: usize,
}

impl AugmentationSpec {
    pub fn desk(dim: usize) -> Self {
        Self {
            num_large: 4,
            num_small: 2,
            noise_sigma: vec![0.5],
            mask_fraction: 0.25,
            scale_jitter: (0.8, 1.2),
            small_view_dims: dim / 2,
        }
    }

    /// All augmentation magnitudes zero.
    pub fn identity(dim: usize) -> Self {
        Self {
            num_large: 4,
            num_small: 2,
            noise_sigma: vec![0.0],
            mask_fraction: 0.0,
            scale_jitter: (1.0, 1.0),
            small_view_dims: dim,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad(format!(
                "mask fraction {} outside [0, 1)",
                self.mask_fraction
            ));
        }
        if self.small_view_dims > dim || self.small_view_dims == 0 {
            return bad(format!(
                "small view dims {} not in 1..={dim}",
                self.small_view_dims
            ));
        }
        if self.num_large == 0 {
            return bad("at least one large view is required".into());
        }
        let slots = self.num_large + self.num_small;
        if self.noise_sigma.is_empty()
            || (self.noise_sigma.len() != 1 && self.noise_sigma.len() != slots)
        {
            return bad(format!("noise_sigma needs 1 or {slots} entries"));
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0))
            || !(self.scale_jitter.0 <= self.scale_jitter.1)
        {
            return bad("noise must be >= 0 and the scale range ordered".into());
        }
        Ok(())
    }

    fn sigma(&self, slot: usize) -> f64 {
        if self.noise_sigma.len() == 1 {
            self.noise_sigma[0]
        } else {
            self.noise_sigma[slot]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet<S> {
    pub large: Vec<Vec<S>>,
    pub small: Vec<Vec<S>>,
    pub label: Option<usize>,
}

/// SplitMix64 finalizer over a sequence of words.
pub fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Counter-based random stream for one datum of one batch.
pub fn view_stream(seed: u64, epoch: u64, batch: u64, datum: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, 0x5649_4557, epoch, batch, datum]))
}

fn augment<S: Scalar, R: Rng>(
    x: &[S],
    spec: &AugmentationSpec,
    slot: usize,
    keep: Option<usize>,
    rng: &mut R,
) -> Vec<S> {
    let d = x.len();
    let sigma = spec.sigma(slot);
    let mut v: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let eps: f64 = rng.sample(StandardNormal);
            xi.as_f64() + sigma * eps
        })
        .collect();
    let masked = (spec.mask_fraction * d as f64).floor() as usize;
    if masked > 0 {
        for i in index::sample(rng, d, masked) {
            v[i] = 0.0;
        }
    }
    let (lo, hi) = spec.scale_jitter;
    let scale = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    for e in &mut v {
        *e *= scale;
    }
    if let Some(keep) = keep {
        if keep < d {
            let mut kept = vec![false; d];
            for i in index::sample(rng, d, keep) {
                kept[i] = true;
            }
            for (e, k) in v.iter_mut().zip(kept) {
                if !k {
                    *e = 0.0;
                }
            }
        }
    }
    v.into_iter().map(S::lit).collect()
}

/// Builds every view of one datum from its dedicated random stream.
pub fn make_views<S: Scalar, R: Rng>(
    x: &[S],
    label: Option<usize>,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> ViewSet<S> {
    let large = (0..spec.num_large)
        .map(|i| augment(x, spec, i, None, rng))
        .collect();
    let small = (0..spec.num_small)
        .map(|i| augment(x, spec, spec.num_large + i, Some(spec.small_view_dims), rng))
        .collect();
    ViewSet {
        large,
        small,
        label,
    }
}

/// Views of a whole batch stacked per slot: `large[i]` is the `B x d`
/// matrix of large view `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchViews<S> {
    pub large: Vec<Tensor<S>>,
    pub small: Vec<Tensor<S>>,
}

pub fn make_batch_views<S: Scalar>(
    dataset: &Dataset<S>,
    indices: &[usize],
    spec: &AugmentationSpec,
    seed: u64,
    epoch: u64,
    batch: u64,
) -> BatchViews<S> {
    let d = dataset.dim();
    let b = indices.len();
    let mut large = vec![Vec::with_capacity(b * d); spec.num_large];
    let mut small = vec![Vec::with_capacity(b * d); spec.num_small];
    for (pos, &i) in indices.iter().enumerate() {
        let mut rng = view_stream(seed, epoch, batch, pos as u64);
        let views = make_views(dataset.point(i), None, spec, &mut rng);
        for (dst, v) in large.iter_mut().zip(views.large) {
            dst.extend(v);
        }
        for (dst, v) in small.iter_mut().zip(views.small) {
            dst.extend(v);
        }
    }
    let stack = |v: Vec<Vec<S>>| -> Vec<Tensor<S>> {
        v.into_iter()
            .map(|data| Tensor::new(vec![b, d], data).expect("batch is non-empty"))
            .collect()
    };
    BatchViews {
        large: stack(large),
        small: stack(small),
    }
}

/// Reads comma-separated rows of `d` numeric fields plus an optional final
/// integer label.
pub fn ingest_csv<S: Scalar>(
    path: impl AsRef<Path>,
    has_labels: bool,
    skip_header: bool,
) -> Result<Dataset<S>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format {
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut dim: Option<usize> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let row = n + 1;
        let record = record.map_err(|e| Error::Format {
            row,
            msg: e.to_string(),
        })?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let fields = if has_labels {
            record.len().saturating_sub(1)
        } else {
            record.len()
        };
        if fields == 0 {
            return Err(Error::Format {
                row,
                msg: "row has no feature columns".into(),
            });
        }
        match dim {
            None => dim = Some(fields),
            Some(d) if d != fields => {
                return Err(Error::Format {
                    row,
                    msg: format!(
                        "expected {} fields, found {}",
                        d + has_labels as usize,
                        record.len()
                    ),
                })
            }
            _ => {}
        }
        for (c, field) in record.iter().take(fields).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Format {
                row,
                msg: format!("column {} is not a number: {field:?}", c + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    row,
                    msg: format!("column {} is not finite", c + 1),
                });
            }
            features.push(S::lit(v));
        }
        if has_labels {
            let field = record.get(fields).unwrap_or_default();
            let y: usize = field.parse().map_err(|_| Error::Format {
                row,
                msg: format!("label {field:?} is not a non-negative integer"),
            })?;
            labels.push(y);
        }
    }
    let Some(dim) = dim else {
        return Err(Error::EmptyDataset);
    };
    Dataset::new(dim, features, has_labels.then_some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 3,
            dim: 8,
            samples_per_class: 20,
            class_separation: 4.0,
            within_class_noise: 0.5,
            modes_per_class: 1,
            seed: 42,
        }
    }

    #[test]
    fn zero_noise_collapses_to_means() {
        let s = DatasetSpec {
            within_class_noise: 0.0,
            ..spec()
        };
        let mix = GaussianMixture::new(&s).unwrap();
        let ds: Dataset<f64> = mix.sample(s.samples_per_class, 0).unwrap();
        for i in 0..ds.len() {
            let y = ds.label(i).unwrap();
            assert_eq!(ds.point(i), mix.class_mean(y, 0));
        }
    }

    #[test]
    fn generation_is_deterministic_and_separated() {
        let a: Dataset<f64> = generate_dataset(&spec()).unwrap();
        let b: Dataset<f64> = generate_dataset(&spec()).unwrap();
        assert_eq!(a, b);
        let mix = GaussianMixture::new(&spec()).unwrap();
        for i in 0..3 {
            for j in 0..i {
                let d: f64 = mix
                    .class_mean(i, 0)
                    .iter()
                    .zip(mix.class_mean(j, 0))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 4.0);
            }
        }
    }

    #[test]
    fn well_separated_pair_is_perfectly_one_nn_separable() {
        let s = DatasetSpec {
            num_classes: 2,
            class_separation: 10.0,
            within_class_noise: 0.1,
            ..spec()
        };
        let ds: Dataset<f64> = generate_dataset(&s).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut best = (f64::INFINITY, 0);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = ds
                    .point(i)
                    .iter()
                    .zip(ds.point(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, ds.label(j).unwrap());
                }
            }
            correct += (best.1 == ds.label(i).unwrap()) as usize;
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn impossible_separation_reports_generation_error() {
        let s = DatasetSpec {
            num_classes: 50,
            dim: 1,
            class_separation: 1e6,
            ..spec()
        };
        assert!(matches!(
            GaussianMixture::new(&s),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn split_boundaries() {
        let ds: Dataset<f64> = generate_dataset(&DatasetSpec {
            num_classes: 10,
            samples_per_class: 100,
            ..spec()
        })
        .unwrap();
        let all = split_labels(&ds, 1.0, 0).unwrap();
        assert!(all.unlabeled.is_empty());
        let tenth = split_labels(&ds, 0.10, 0).unwrap();
        let labels = ds.labels().unwrap();
        for c in 0..10 {
            assert_eq!(
                tenth.labeled.iter().filter(|&&i| labels[i] == c).count(),
                10
            );
        }
        assert_eq!(tenth.labeled.len() + tenth.unlabeled.len(), ds.len());

        let tiny: Dataset<f64> = generate_dataset(&DatasetSpec {
            num_classes: 10,
            samples_per_class: 10,
            ..spec()
        })
        .unwrap();
        assert!(matches!(
            split_labels(&tiny, 0.001, 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn identity_augmentation_copies_the_point() {
        let x = [1.0f64, -2.0, 3.0, 0.5];
        let mut rng = view_stream(1, 0, 0, 0);
        let views = make_views(&x, Some(2), &AugmentationSpec::identity(4), &mut rng);
        assert_eq!(views.large.len(), 4);
        assert_eq!(views.small.len(), 2);
        for v in views.large.iter().chain(&views.small) {
            assert_eq!(v.as_slice(), &x);
        }
        assert_eq!(views.label, Some(2));
    }

    #[test]
    fn mask_fraction_zeroes_exact_count() {
        let x = [1.0f64; 8];
        let spec = AugmentationSpec {
            mask_fraction: 0.25,
            ..AugmentationSpec::identity(8)
        };
        let mut rng = view_stream(3, 1, 2, 3);
        let views = make_views(&x, None, &spec, &mut rng);
        for v in &views.large {
            assert_eq!(v.iter().filter(|&&e| e == 0.0).count(), 2);
        }
    }

    #[test]
    fn small_views_keep_a_coordinate_subset() {
        let x = [1.0f64; 8];
        let spec = AugmentationSpec {
            small_view_dims: 3,
            ..AugmentationSpec::identity(8)
        };
        let mut rng = view_stream(0, 0, 0, 0);
        let views = make_views(&x, None, &spec, &mut rng);
        for v in &views.small {
            assert_eq!(v.iter().filter(|&&e| e != 0.0).count(), 3);
        }
    }

    #[test]
    fn view_stream_is_pure() {
        let x = [0.3f64, 0.1, -0.2, 0.9, 1.1, -0.4, 0.0, 0.2];
        let spec = AugmentationSpec::desk(8);
        let a = make_views(&x, None, &spec, &mut view_stream(5, 2, 7, 11));
        let b = make_views(&x, None, &spec, &mut view_stream(5, 2, 7, 11));
        let c = make_views(&x, None, &spec, &mut view_stream(5, 2, 7, 12));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .large
            .iter()
            .chain(&a.small)
            .flatten()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn augmentation_spec_validation() {
        let mut s = AugmentationSpec::desk(8);
        assert!(s.validate(8).is_ok());
        s.mask_fraction = 1.0;
        assert!(s.validate(8).is_err());
        let mut s = AugmentationSpec::desk(8);
        s.small_view_dims = 9;
        assert!(s.validate(8).is_err());
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_smoke() {
        let f = write_tmp("1.0,2.0,0\n3.0,4.0,1\n");
        let ds: Dataset<f64> = ingest_csv(f.path(), true, false).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels().unwrap(), &[0, 1]);
        assert_eq!(ds.point(1), &[3.0, 4.0]);

        let f = write_tmp("a,b\n1.0,2.0\n");
        let ds: Dataset<f64> = ingest_csv(f.path(), false, true).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.labels().is_none());
    }

    #[test]
    fn csv_ragged_row_names_its_index() {
        let f = write_tmp("1.0,2.0\n3.0,4.0\n5.0,6.0,7.0\n");
        match ingest_csv::<f64>(f.path(), false, false) {
            Err(Error::Format { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("1.0,x,0\n");
        assert!(matches!(
            ingest_csv::<f64>(f.path(), true, false),
            Err(Error::Format { row: 1, .. })
        ));
    }

    #[test]
    fn csv_empty_file() {
        let f = write_tmp("");
        assert!(matches!(
            ingest_csv::<f64>(f.path(), true, false),
            Err(Error::EmptyDataset)
        ));
    }
}
