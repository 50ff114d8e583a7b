//! How far apart do clean target-class samples and triggered samples sit
//! in the model's feature space?
//!
//! A live backdoor maps triggered inputs into the target-class region, so
//! the two groups blend together (low ratio). After a defense that truly
//! shifts the features, triggered samples drift away from the clean
//! cluster and the ratio grows. All distances are Euclidean in the
//! extractor's output space.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::model::ModelSplit;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeparationReport {
    /// Distance between the two cluster centroids.
    pub inter_centroid: f64,
    /// Mean distance of samples to their own centroid, averaged over the
    /// two clusters with equal weight.
    pub mean_intra: f64,
    /// interCentroid / meanIntra: the headline separability score.
    pub ratio: f64,
    /// Mean silhouette over all samples, with the cluster assignment fixed
    /// to clean-vs-triggered (not re-derived from the geometry).
    pub silhouette: f64,
    pub clean_count: usize,
    pub triggered_count: usize,
}

/// Feature-space separation between clean samples of one class and
/// triggered samples. Both sets need at least 2 samples.
pub fn feature_separation(
    model: &ModelSplit,
    clean: &ImageDataset,
    triggered: &ImageDataset,
) -> Result<SeparationReport> {
    if clean.len() < 2 || triggered.len() < 2 {
        return Err(Error::input(format!(
            "separation needs at least 2 samples per side, got {} clean and {} triggered",
            clean.len(),
            triggered.len()
        )));
    }
    let all: Vec<usize> = (0..clean.len()).collect();
    let (clean_batch, _) = clean.batch(&all);
    let all_t: Vec<usize> = (0..triggered.len()).collect();
    let (trig_batch, _) = triggered.batch(&all_t);
    let clean_feats = model.forward_features(&clean_batch)?;
    let trig_feats = model.forward_features(&trig_batch)?;
    separation_from_features(&clean_feats, &trig_feats)
}

/// The same computation on precomputed [n, d] feature matrices.
pub fn separation_from_features(
    clean: &Tensor,
    triggered: &Tensor,
) -> Result<SeparationReport> {
    let (nc, nt) = (clean.shape()[0], triggered.shape()[0]);
    if nc < 2 || nt < 2 {
        return Err(Error::input("separation needs at least 2 feature rows per side"));
    }
    if clean.shape()[1] != triggered.shape()[1] {
        return Err(Error::input(format!(
            "feature widths differ: {} vs {}",
            clean.shape()[1],
            triggered.shape()[1]
        )));
    }
    let mu_c = centroid(clean);
    let mu_t = centroid(triggered);
    let inter = dist(&mu_c, &mu_t);
    let intra_c = mean_dist_to(clean, &mu_c);
    let intra_t = mean_dist_to(triggered, &mu_t);
    let mean_intra = 0.5 * (intra_c + intra_t);
    if mean_intra == 0.0 {
        return Err(Error::numeric(
            "both clusters collapsed to points; the separation ratio is undefined",
        ));
    }
    Ok(SeparationReport {
        inter_centroid: inter,
        mean_intra,
        ratio: inter / mean_intra,
        silhouette: fixed_silhouette(clean, triggered),
        clean_count: nc,
        triggered_count: nt,
    })
}

fn centroid(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    mu
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_dist_to(x: &Tensor, mu: &[f64]) -> f64 {
    let n = x.shape()[0];
    (0..n).map(|i| dist(x.row(i), mu)).sum::<f64>() / n as f64
}

/// Silhouette with the two clusters given, not discovered:
/// a(i) = mean distance to the rest of own cluster,
/// b(i) = mean distance to the other cluster,
/// s(i) = (b - a) / max(a, b), with s(i) = 0 when both are zero.
fn fixed_silhouette(clean: &Tensor, triggered: &Tensor) -> f64 {
    let score = |own: &Tensor, other: &Tensor| -> f64 {
        let n = own.shape()[0];
        let mut total = 0.0;
        for i in 0..n {
            let a = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist(own.row(i), own.row(j)))
                .sum::<f64>()
                / (n - 1) as f64;
            let m = other.shape()[0];
            let b = (0..m).map(|j| dist(own.row(i), other.row(j))).sum::<f64>() / m as f64;
            let denom = a.max(b);
            total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
        }
        total
    };
    let nc = clean.shape()[0] as f64;
    let nt = triggered.shape()[0] as f64;
    (score(clean, triggered) + score(triggered, clean)) / (nc + nt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Tensor {
        let d = data[0].len();
        let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[data.len(), d], flat).unwrap()
    }

    #[test]
    fn hand_computed_two_cluster_geometry() {
        // Clean at (0,0) and (2,0): centroid (1,0), intra = 1.
        // Triggered at (10,0) and (10,2): centroid (10,1), intra = 1.
        // Inter = sqrt(81 + 1) = sqrt(82); ratio = sqrt(82).
        let clean = rows(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let trig = rows(&[&[10.0, 0.0], &[10.0, 2.0]]);
        let r = separation_from_features(&clean, &trig).unwrap();
        assert!((r.inter_centroid - 82.0f64.sqrt()).abs() < 1e-12);
        assert!((r.mean_intra - 1.0).abs() < 1e-12);
        assert!((r.ratio - 82.0f64.sqrt()).abs() < 1e-12);
        assert_eq!((r.clean_count, r.triggered_count), (2, 2));
    }

    #[test]
    fn hand_computed_silhouette() {
        // Clean: (0,0), (1,0). Triggered: (10,0), (11,0).
        // For (0,0): a = 1, b = (10+11)/2 = 10.5, s = 9.5/10.5.
        // For (1,0): a = 1, b = (9+10)/2 = 9.5, s = 8.5/9.5.
        // Symmetric on the other side.
        let clean = rows(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let trig = rows(&[&[10.0, 0.0], &[11.0, 0.0]]);
        let r = separation_from_features(&clean, &trig).unwrap();
        let want = (9.5 / 10.5 + 8.5 / 9.5 + 8.5 / 9.5 + 9.5 / 10.5) / 4.0;
        assert!((r.silhouette - want).abs() < 1e-12);
    }

    #[test]
    fn interleaved_clusters_score_at_or_below_zero() {
        // Both groups are the same four corners: centroids coincide, and
        // every sample has an exact twin in the other cluster, so b < a
        // and the fixed-assignment silhouette is negative.
        let clean = rows(&[&[0.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let trig = rows(&[&[1.0, 1.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let r = separation_from_features(&clean, &trig).unwrap();
        assert!(r.inter_centroid < 1e-12);
        assert!(r.ratio < 1e-10);
        assert!(r.silhouette < 0.0);
    }

    #[test]
    fn collapsed_clusters_are_a_numeric_error() {
        let clean = rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let trig = rows(&[&[2.0, 2.0], &[2.0, 2.0]]);
        let err = separation_from_features(&clean, &trig).unwrap_err();
        assert_eq!(err.code(), "numeric/degenerate");
    }

    #[test]
    fn too_few_samples_are_rejected() {
        let one = rows(&[&[0.0, 0.0]]);
        let two = rows(&[&[1.0, 0.0], &[2.0, 0.0]]);
        assert!(separation_from_features(&one, &two).is_err());
        assert!(separation_from_features(&two, &one).is_err());
    }

    #[test]
    fn ratio_grows_monotonically_with_distance() {
        let clean = rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.5, 0.5]]);
        let mut last = 0.0;
        for shift in [2.0, 5.0, 20.0] {
            let trig = rows(&[&[shift, 0.0], &[shift + 1.0, 0.0], &[shift + 0.5, 0.5]]);
            let r = separation_from_features(&clean, &trig).unwrap();
            assert!(r.ratio > last);
            last = r.ratio;
        }
    }
}
