//! Test-time inference (coordinate regression, region classification),
//! evaluation metrics, K-means region construction and the Naive Bayes
//! baseline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::sampler::{test_chain, ConditionalMode};

/// IUGG mean Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Per-document prediction output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_index: usize,
    pub area_samples: Vec<usize>,
    /// Predicted (lat, lon), degrees.
    pub coords: [f64; 2],
    pub region: usize,
    /// Summed log region-posterior scores, one per region.
    pub region_scores: Vec<f64>,
}

/// Precision-weighted mean of the sampled area centers.
pub fn coords_from_samples(model: &TrainedModel, samples: &[usize]) -> [f64; 2] {
    assert!(!samples.is_empty());
    let mut num = [0.0f64; 2];
    let mut den = 0.0f64;
    for &p in samples {
        let w = 1.0 / model.gaussians.sigma2[p];
        num[0] += model.gaussians.mu[p][0] * w;
        num[1] += model.gaussians.mu[p][1] * w;
        den += w;
    }
    [num[0] / den, num[1] / den]
}

/// Region argmax of the product of sampled posterior rows, computed as a
/// log-score sum. Ties break toward the lowest region id.
pub fn region_from_samples(model: &TrainedModel, samples: &[usize]) -> (usize, Vec<f64>) {
    let n_regions = model.schema.num_regions();
    let mut scores = vec![0.0f64; n_regions];
    for &p in samples {
        for (c, s) in scores.iter_mut().enumerate() {
            *s += model.region_posterior[p][c].ln();
        }
    }
    let mut best = 0;
    for c in 1..n_regions {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    (best, scores)
}

/// One chain of S area samples feeds both the regression and the
/// classification formulas.
pub fn predict_doc<R: Rng + ?Sized>(
    model: &TrainedModel,
    doc: &Document,
    doc_index: usize,
    mode: ConditionalMode,
    rng: &mut R,
) -> Prediction {
    let hp = &model.hyperparams;
    let samples = test_chain(model, doc, mode, hp.test_sweeps, hp.samples, rng);
    let coords = coords_from_samples(model, &samples);
    let (region, region_scores) = region_from_samples(model, &samples);
    Prediction {
        doc_index,
        area_samples: samples,
        coords,
        region,
        region_scores,
    }
}

/// Predict every document. Each document owns an RNG stream derived from
/// the master seed and its index, so results are identical whether the loop
/// runs sequentially or on a worker pool.
pub fn predict_corpus(
    model: &TrainedModel,
    docs: &[Document],
    mode: ConditionalMode,
    seed: u64,
    threads: usize,
) -> Vec<Prediction> {
    let predict_one = |(k, doc): (usize, &Document)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        predict_doc(model, doc, k, mode, &mut rng)
    };
    if threads == 1 {
        docs.iter().enumerate().map(predict_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build prediction thread pool");
        pool.install(|| docs.par_iter().enumerate().map(predict_one).collect())
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Great-circle distance between two (lat, lon) points in degrees.
pub fn haversine_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let lat1 = a[0].to_radians();
    let lat2 = b[0].to_radians();
    let dlat = (b[0] - a[0]).to_radians();
    let dlon = (b[1] - a[1]).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub mde_km: f64,
    pub n_docs: usize,
    /// Row = true region, column = predicted region.
    pub per_region_confusion: Vec<Vec<usize>>,
}

/// Score (region, coords) predictions against held-out labels.
pub fn score_predictions(
    predictions: &[(usize, [f64; 2])],
    truth: &[Document],
    n_regions: usize,
) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::validation("empty test set"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::validation(format!(
            "prediction count {} does not match test set size {}",
            predictions.len(),
            truth.len()
        )));
    }
    let mut correct = 0usize;
    let mut dist_sum = 0.0f64;
    let mut confusion = vec![vec![0usize; n_regions]; n_regions];
    for ((pred_region, pred_coords), doc) in predictions.iter().zip(truth) {
        let true_region = doc
            .region
            .ok_or_else(|| Error::validation("test document lacks a region label"))?;
        let true_coords = doc
            .coords
            .ok_or_else(|| Error::validation("test document lacks coordinates"))?;
        if *pred_region == true_region {
            correct += 1;
        }
        confusion[true_region][*pred_region] += 1;
        dist_sum += haversine_km(*pred_coords, true_coords);
    }
    Ok(Metrics {
        precision: correct as f64 / truth.len() as f64,
        mde_km: dist_sum / truth.len() as f64,
        n_docs: truth.len(),
        per_region_confusion: confusion,
    })
}

/// Predict + score in one pass; labels are stripped before prediction.
pub fn evaluate(
    model: &TrainedModel,
    test_docs: &[Document],
    mode: ConditionalMode,
    seed: u64,
    threads: usize,
) -> Result<Metrics> {
    if test_docs.is_empty() {
        return Err(Error::validation("empty test set"));
    }
    let stripped: Vec<Document> = test_docs
        .iter()
        .map(|d| Document {
            tokens: d.tokens.clone(),
            feature_values: d.feature_values.clone(),
            region: None,
            coords: None,
        })
        .collect();
    let preds = predict_corpus(model, &stripped, mode, seed, threads);
    let pairs: Vec<(usize, [f64; 2])> = preds.iter().map(|p| (p.region, p.coords)).collect();
    score_predictions(&pairs, test_docs, model.schema.num_regions())
}

// ---------------------------------------------------------------------------
// K-means region construction
// ---------------------------------------------------------------------------

const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's algorithm on planar (lat, lon) with K-means++ seeding.
pub fn kmeans_regions<R: Rng + ?Sized>(
    coords: &[[f64; 2]],
    k: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<[f64; 2]>)> {
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for &c in coords {
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    if distinct.len() < k {
        return Err(Error::validation(format!(
            "k-means needs at least {k} distinct points, got {}",
            distinct.len()
        )));
    }

    // K-means++ seeding.
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    centers.push(coords[rng.gen_range(0..coords.len())]);
    while centers.len() < k {
        let d2: Vec<f64> = coords
            .iter()
            .map(|&p| {
                centers
                    .iter()
                    .map(|&c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = coords.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            coords[pick]
        } else {
            // all points coincide with existing centers; fall back to a
            // distinct point not already chosen
            *distinct
                .iter()
                .find(|&&p| !centers.contains(&p))
                .expect("checked distinct count above")
        };
        if centers.contains(&next) {
            // resample deterministically from remaining distinct points
            let fallback = *distinct
                .iter()
                .find(|&&p| !centers.contains(&p))
                .expect("checked distinct count above");
            centers.push(fallback);
        } else {
            centers.push(next);
        }
    }

    let mut labels = vec![0usize; coords.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, &p) in coords.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, centers[0]);
            for (c, &center) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(p, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in coords.iter().enumerate() {
            sums[labels[i]][0] += p[0];
            sums[labels[i]][1] += p[1];
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if !changed {
            break;
        }
    }
    Ok((labels, centers))
}

// ---------------------------------------------------------------------------
// Naive Bayes baseline
// ---------------------------------------------------------------------------

/// Multinomial NB over the categorical features with add-1 smoothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveBayes {
    pub class_log_prior: Vec<f64>,
    /// [feature][class][category] log-likelihoods.
    pub feature_log_likelihood: Vec<Vec<Vec<f64>>>,
}

pub fn naive_bayes_train(
    docs: &[Document],
    n_regions: usize,
    cat_sizes: &[usize],
) -> Result<NaiveBayes> {
    if docs.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let mut class_counts = vec![0usize; n_regions];
    let num_features = cat_sizes.len();
    let mut counts: Vec<Vec<Vec<usize>>> = cat_sizes
        .iter()
        .map(|&c| vec![vec![0usize; c]; n_regions])
        .collect();
    for doc in docs {
        let r = doc
            .region
            .ok_or_else(|| Error::validation("training document lacks a region label"))?;
        class_counts[r] += 1;
        for u in 0..num_features {
            counts[u][r][doc.feature_values[u]] += 1;
        }
    }
    // Empirical class prior (unsmoothed: a region never seen in training
    // must never be predicted); Laplace smoothing applies to the feature
    // likelihoods only.
    let total = docs.len() as f64;
    let class_log_prior = class_counts
        .iter()
        .map(|&c| (c as f64 / total).ln())
        .collect();
    let feature_log_likelihood = counts
        .iter()
        .enumerate()
        .map(|(u, per_class)| {
            per_class
                .iter()
                .enumerate()
                .map(|(r, cats)| {
                    let denom = class_counts[r] as f64 + cat_sizes[u] as f64;
                    cats.iter()
                        .map(|&c| ((c as f64 + 1.0) / denom).ln())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(NaiveBayes {
        class_log_prior,
        feature_log_likelihood,
    })
}

/// Argmax posterior region; ties break toward the lowest region id.
pub fn naive_bayes_predict(nb: &NaiveBayes, doc: &Document) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (r, &prior) in nb.class_log_prior.iter().enumerate() {
        let mut score = prior;
        for (u, &v) in doc.feature_values.iter().enumerate() {
            score += nb.feature_log_likelihood[u][r][v];
        }
        if score > best_score {
            best = r;
            best_score = score;
        }
    }
    best
}
