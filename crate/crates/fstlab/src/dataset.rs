//! Labeled image datasets and the synthetic benchmark generator.
//!
//! The generator builds one smooth template per class (a coarse random
//! grid, bilinearly upsampled), then emits images as template plus
//! Gaussian pixel noise, clamped to [0, 1]. Classes are well separated
//! at the default noise level, so small models reach high accuracy in
//! seconds; that keeps whole attack/defense studies on a desk scale.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;

/// A dataset of images ([n, height, width, channels], values in [0, 1])
/// with one integer label per image.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<ImageDataset> {
        let ds = ImageDataset { name: name.into(), images, labels, class_count };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::input(format!(
                "dataset {:?}: images must be [n,h,w,c], got {:?}",
                self.name,
                self.images.shape()
            )));
        }
        let n = self.images.shape()[0];
        if self.labels.len() != n {
            return Err(Error::input(format!(
                "dataset {:?}: {n} images but {} labels",
                self.name,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::input(format!(
                "dataset {:?}: label {bad} out of range for {} classes",
                self.name, self.class_count
            )));
        }
        if let Some(&bad) = self.images.data().iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::input(format!(
                "dataset {:?}: pixel value {bad} outside [0, 1]",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// [height, width, channels].
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Batch tensor and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> ImageDataset {
        ImageDataset {
            name: name.into(),
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Std-dev of per-pixel Gaussian noise around the class template.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Side length of the coarse template grid before upsampling.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_class_count() -> usize {
    10
}
fn default_train_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    100
}
fn default_side() -> usize {
    16
}
fn default_channels() -> usize {
    1
}
fn default_noise_sigma() -> f64 {
    0.15
}
fn default_grid() -> usize {
    4
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: default_class_count(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            height: default_side(),
            width: default_side(),
            channels: default_channels(),
            noise_sigma: default_noise_sigma(),
            grid: default_grid(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("synthetic generator needs at least 2 classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("perClass sample counts must be positive"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.grid == 0 {
            return Err(Error::config("image dimensions and grid must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!("noiseSigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Generate (train, test) datasets. Both halves share the same class
/// templates; train and test noise come from independent streams, so the
/// test set is a genuinely held-out draw. A fixed `spec` (including its
/// seed) reproduces the same bytes every time.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(ImageDataset, ImageDataset)> {
    spec.validate()?;
    let templates = class_templates(spec);
    let train = noisy_split(spec, &templates, spec.train_per_class, 0, "train")?;
    let test = noisy_split(spec, &templates, spec.test_per_class, 1, "test")?;
    Ok((train, test))
}

fn class_templates(spec: &SyntheticSpec) -> Vec<Tensor> {
    use rand::Rng;
    let mut rng = RngState::new(spec.seed, rng::stream::DATASET_TEMPLATES).rng();
    (0..spec.class_count)
        .map(|_| {
            let coarse: Vec<f64> = (0..spec.grid * spec.grid * spec.channels)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            upsample_bilinear(&coarse, spec.grid, spec.grid, spec.channels, spec.height, spec.width)
        })
        .collect()
}

fn noisy_split(
    spec: &SyntheticSpec,
    templates: &[Tensor],
    per_class: usize,
    noise_substream: u64,
    tag: &str,
) -> Result<ImageDataset> {
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::config(format!("noiseSigma {}: {e}", spec.noise_sigma)))?;
    let mut rng = RngState::new(spec.seed, rng::stream::DATASET_NOISE).substream(noise_substream).rng();
    let n = spec.class_count * per_class;
    let pixels = spec.height * spec.width * spec.channels;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            if spec.noise_sigma == 0.0 {
                data.extend_from_slice(template.data());
            } else {
                data.extend(template.data().iter().map(|&t| {
                    (t + noise.sample(&mut rng)).clamp(0.0, 1.0)
                }));
            }
            labels.push(class);
        }
    }
    let images = Tensor::from_vec(&[n, spec.height, spec.width, spec.channels], data)?;
    let name = format!(
        "synthetic-k{}-{}x{}x{}-n{}-s{}-{tag}",
        spec.class_count, spec.height, spec.width, spec.channels, spec.noise_sigma, spec.seed
    );
    ImageDataset::new(name, images, labels, spec.class_count)
}

/// Bilinear upsample of a [gh, gw, c] grid to [h, w, c].
pub(crate) fn upsample_bilinear(
    coarse: &[f64],
    gh: usize,
    gw: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let mut out = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        let u = if h > 1 { i as f64 * (gh - 1) as f64 / (h - 1) as f64 } else { 0.0 };
        let i0 = (u.floor() as usize).min(gh - 1);
        let i1 = (i0 + 1).min(gh - 1);
        let fu = u - i0 as f64;
        for j in 0..w {
            let v = if w > 1 { j as f64 * (gw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            let j0 = (v.floor() as usize).min(gw - 1);
            let j1 = (j0 + 1).min(gw - 1);
            let fv = v - j0 as f64;
            for ch in 0..c {
                let g = |a: usize, b: usize| coarse[(a * gw + b) * c + ch];
                let top = g(i0, j0) * (1.0 - fv) + g(i0, j1) * fv;
                let bot = g(i1, j0) * (1.0 - fv) + g(i1, j1) * fv;
                out.data_mut()[(i * w + j) * c + ch] = top * (1.0 - fu) + bot * fu;
            }
        }
    }
    out
}

/// How to carve a clean tuning subset out of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of the training set that becomes the tuning set.
    pub tune_fraction: f64,
    pub seed: u64,
}

/// Split `train` into (remainder, tune).
///
/// The tune set holds exactly floor(tuneFraction * n) samples, allocated
/// across classes by largest remainder so class balance tracks the source;
/// which samples go is a seeded uniform draw per class. Splitting happens
/// before any poisoning, so the tune set is clean by construction.
pub fn split_tune(train: &ImageDataset, spec: &SplitSpec) -> Result<(ImageDataset, ImageDataset)> {
    if !(spec.tune_fraction > 0.0 && spec.tune_fraction < 1.0) {
        return Err(Error::config(format!(
            "tuneFraction must be in (0, 1), got {}",
            spec.tune_fraction
        )));
    }
    let n = train.len();
    let total = (spec.tune_fraction * n as f64).floor() as usize;
    if total == 0 {
        return Err(Error::input(format!(
            "tuneFraction {} of {n} samples rounds down to an empty tune set",
            spec.tune_fraction
        )));
    }

    let groups = train.class_indices();
    // Largest-remainder allocation: floor each class share, then hand the
    // remaining slots to the classes with the biggest fractional parts
    // (ties to the lower class id).
    let exact: Vec<f64> = groups.iter().map(|g| spec.tune_fraction * g.len() as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &class in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if counts[class] < groups[class].len() {
            counts[class] += 1;
            leftover -= 1;
        }
    }

    let mut tune_indices = Vec::with_capacity(total);
    let mut rng = RngState::new(spec.seed, rng::stream::TUNE_SPLIT).rng();
    for (class, group) in groups.iter().enumerate() {
        let mut shuffled = group.clone();
        rng::shuffle(&mut shuffled, &mut rng);
        tune_indices.extend_from_slice(&shuffled[..counts[class]]);
    }
    tune_indices.sort_unstable();
    let in_tune: std::collections::HashSet<usize> = tune_indices.iter().copied().collect();
    let rest_indices: Vec<usize> = (0..n).filter(|i| !in_tune.contains(i)).collect();

    let tune = train.subset(&tune_indices, format!("{}-tune", train.name));
    let rest = train.subset(&rest_indices, format!("{}-rest", train.name));
    Ok((rest, tune))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_in_range() {
        let spec = SyntheticSpec { train_per_class: 5, test_per_class: 2, ..Default::default() };
        let (tr1, te1) = gen_synthetic(&spec).unwrap();
        let (tr2, te2) = gen_synthetic(&spec).unwrap();
        assert_eq!(tr1.images, tr2.images);
        assert_eq!(te1.images, te2.images);
        assert_eq!(tr1.labels, tr2.labels);
        assert_eq!(tr1.images.shape(), &[50, 16, 16, 1]);
        assert_eq!(te1.images.shape(), &[20, 16, 16, 1]);
        assert!(tr1.images.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_noise_collapses_each_class_to_its_template() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            train_per_class: 3,
            test_per_class: 1,
            ..Default::default()
        };
        let (train, test) = gen_synthetic(&spec).unwrap();
        for class in 0..10 {
            let base = train.images.slab(class * 3).to_vec();
            for k in 1..3 {
                assert_eq!(train.images.slab(class * 3 + k), &base[..]);
            }
            // Test images of the class equal the same template.
            assert_eq!(test.images.slab(class), &base[..]);
        }
    }

    #[test]
    fn different_seeds_give_different_templates() {
        let a = gen_synthetic(&SyntheticSpec { train_per_class: 1, test_per_class: 1, ..Default::default() }).unwrap();
        let b = gen_synthetic(&SyntheticSpec {
            train_per_class: 1,
            test_per_class: 1,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.0.images, b.0.images);
    }

    #[test]
    fn upsample_is_exact_on_grid_corners_and_flat_grids() {
        // A constant grid upsamples to a constant image.
        let flat = vec![0.7; 4 * 4];
        let up = upsample_bilinear(&flat, 4, 4, 1, 16, 16);
        assert!(up.data().iter().all(|&x| (x - 0.7).abs() < 1e-12));

        // Corners of the output hit grid corners exactly.
        let mut grid = vec![0.0; 4];
        grid[0] = 1.0; // (0,0)
        grid[3] = 0.5; // (1,1)
        let up = upsample_bilinear(&grid, 2, 2, 1, 8, 8);
        assert!((up.data()[0] - 1.0).abs() < 1e-12);
        assert!((up.data()[8 * 8 - 1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_match_largest_remainder_allocation() {
        let spec = SyntheticSpec { train_per_class: 50, test_per_class: 1, ..Default::default() };
        let (train, _) = gen_synthetic(&spec).unwrap();
        // 2% of 500 = 10 total, exactly 1 per class of 50.
        let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.02, seed: 0 }).unwrap();
        assert_eq!(tune.len(), 10);
        assert_eq!(rest.len(), 490);
        let per_class: Vec<usize> = tune.class_indices().iter().map(Vec::len).collect();
        assert_eq!(per_class, vec![1; 10]);
    }

    #[test]
    fn split_total_is_floor_of_fraction_even_when_classes_do_not_divide() {
        let spec = SyntheticSpec {
            class_count: 3,
            train_per_class: 33,
            test_per_class: 1,
            ..Default::default()
        };
        let (train, _) = gen_synthetic(&spec).unwrap();
        // floor(0.05 * 99) = 4 across 3 classes of 33: floors give 1 each,
        // the leftover goes to the largest remainder (all tied at 0.65 -> class 0).
        let (rest, tune) = split_tune(&train, &SplitSpec { tune_fraction: 0.05, seed: 3 }).unwrap();
        assert_eq!(tune.len(), 4);
        assert_eq!(rest.len(), 95);
        let per_class: Vec<usize> = tune.class_indices().iter().map(Vec::len).collect();
        assert_eq!(per_class, vec![2, 1, 1]);
    }

    #[test]
    fn split_is_disjoint_and_seed_stable() {
        let spec = SyntheticSpec { train_per_class: 20, test_per_class: 1, ..Default::default() };
        let (train, _) = gen_synthetic(&spec).unwrap();
        let s = SplitSpec { tune_fraction: 0.1, seed: 7 };
        let (rest_a, tune_a) = split_tune(&train, &s).unwrap();
        let (_, tune_b) = split_tune(&train, &s).unwrap();
        assert_eq!(tune_a.images, tune_b.images);
        assert_eq!(rest_a.len() + tune_a.len(), train.len());
        // Different seed picks different members.
        let (_, tune_c) = split_tune(&train, &SplitSpec { tune_fraction: 0.1, seed: 8 }).unwrap();
        assert_ne!(tune_a.images, tune_c.images);
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let spec = SyntheticSpec { train_per_class: 5, test_per_class: 1, ..Default::default() };
        let (train, _) = gen_synthetic(&spec).unwrap();
        assert!(split_tune(&train, &SplitSpec { tune_fraction: 0.0, seed: 0 }).is_err());
        assert!(split_tune(&train, &SplitSpec { tune_fraction: 1.0, seed: 0 }).is_err());
        // 0.001 of 50 samples rounds to zero.
        assert!(split_tune(&train, &SplitSpec { tune_fraction: 0.001, seed: 0 }).is_err());
    }

    #[test]
    fn validate_rejects_bad_labels_and_values() {
        let images = Tensor::zeros(&[2, 4, 4, 1]);
        assert!(ImageDataset::new("x", images.clone(), vec![0, 5], 3).is_err());
        assert!(ImageDataset::new("x", images.clone(), vec![0], 3).is_err());
        let mut hot = images;
        hot.data_mut()[0] = 1.5;
        assert!(ImageDataset::new("x", hot, vec![0, 1], 3).is_err());
    }
}
