//! Forward sampling of corpora with known ground-truth parameters, for
//! parameter-recovery tests and oracle validation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::RawRecord;
use crate::error::{Error, Result};
use crate::model::Hyperparams;

/// Every sampled quantity of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub psi: Vec<f64>,
    /// [area][topic][word]
    pub phi: Vec<Vec<Vec<f64>>>,
    /// [feature][area][category]
    pub feature_dists: Vec<Vec<Vec<f64>>>,
    /// [area][region]
    pub region_dists: Vec<Vec<f64>>,
    pub mu: Vec<[f64; 2]>,
    pub sigma2: Vec<f64>,
    pub doc_area: Vec<usize>,
    pub doc_theta: Vec<Vec<f64>>,
    pub doc_z: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub hyperparams: Hyperparams,
    pub docs: usize,
    pub tokens_per_doc: usize,
    pub vocab_size: usize,
    /// Category counts per feature; at most 3 (the canonical feature slots).
    pub category_sizes: Vec<usize>,
    pub regions: usize,
    pub seed: u64,
}

/// Symmetric Dirichlet draw via normalized Gamma variates. A tiny floor
/// guards against exact-zero components when the concentration is small.
fn dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    let mut draw: Vec<f64> = (0..dim).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draw.iter().sum();
    for x in &mut draw {
        *x /= total;
    }
    draw
}

fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn make_record(tokens: &[usize], features: &[usize], region: usize, y: [f64; 2]) -> RawRecord {
    let mut record = RawRecord {
        text: tokens
            .iter()
            .map(|&w| format!("w{w:04}"))
            .collect::<Vec<_>>()
            .join(" "),
        region: Some(format!("r{region}")),
        // Gaussian draws can stray past the coordinate ranges; the corpus
        // layer rejects such records, so clamp at emission.
        lat: Some(y[0].clamp(-90.0, 90.0)),
        lon: Some(y[1].clamp(-180.0, 180.0)),
        ..Default::default()
    };
    for (u, &v) in features.iter().enumerate() {
        record.set_feature(u, format!("u{u}c{v}"));
    }
    record
}

struct AreaParams {
    psi: Vec<f64>,
    phi: Vec<Vec<Vec<f64>>>,
    feature_dists: Vec<Vec<Vec<f64>>>,
    region_dists: Vec<Vec<f64>>,
    mu: Vec<[f64; 2]>,
    sigma2: Vec<f64>,
}

/// Documents sampled under fixed area-level parameters (the shared second
/// half of the generative process).
#[allow(clippy::type_complexity)]
fn sample_documents<R: Rng + ?Sized>(
    params: &AreaParams,
    cfg_docs: usize,
    tokens_per_doc: usize,
    alpha: f64,
    topics: usize,
    rng: &mut R,
) -> (Vec<RawRecord>, Vec<usize>, Vec<Vec<f64>>, Vec<Vec<usize>>) {
    // the four parallel outputs feed straight into GroundTruth fields
    let num_features = params.feature_dists.len();
    let mut records = Vec::with_capacity(cfg_docs);
    let mut doc_area = Vec::with_capacity(cfg_docs);
    let mut doc_theta = Vec::with_capacity(cfg_docs);
    let mut doc_z = Vec::with_capacity(cfg_docs);

    for _ in 0..cfg_docs {
        let p = sample_categorical(rng, &params.psi);
        let theta = dirichlet(rng, alpha, topics);
        let mut tokens = Vec::with_capacity(tokens_per_doc);
        let mut zs = Vec::with_capacity(tokens_per_doc);
        for _ in 0..tokens_per_doc {
            let z = sample_categorical(rng, &theta);
            let w = sample_categorical(rng, &params.phi[p][z]);
            zs.push(z);
            tokens.push(w);
        }
        let features: Vec<usize> = (0..num_features)
            .map(|u| sample_categorical(rng, &params.feature_dists[u][p]))
            .collect();
        let c = sample_categorical(rng, &params.region_dists[p]);
        let sigma = params.sigma2[p].sqrt();
        let normal_lat = Normal::new(params.mu[p][0], sigma).expect("positive sigma");
        let normal_lon = Normal::new(params.mu[p][1], sigma).expect("positive sigma");
        let y = [normal_lat.sample(rng), normal_lon.sample(rng)];

        records.push(make_record(&tokens, &features, c, y));
        doc_area.push(p);
        doc_theta.push(theta);
        doc_z.push(zs);
    }
    (records, doc_area, doc_theta, doc_z)
}

/// Execute the full generative process with the configured priors and
/// return both the corpus and the retained ground truth.
pub fn forward_sample(cfg: &GeneratorConfig) -> Result<(Vec<RawRecord>, GroundTruth)> {
    let hp = &cfg.hyperparams;
    hp.validate()?;
    if cfg.vocab_size < 1 || cfg.regions < 1 {
        return Err(Error::validation("generator dimensions must be >= 1"));
    }
    if cfg.category_sizes.len() > 3 {
        return Err(Error::validation(
            "at most 3 categorical features fit the record format",
        ));
    }
    if hp.mu_prior_scale.is_nan()
        || hp.mu_prior_scale <= 0.0
        || hp.sigma2_prior_rate.is_nan()
        || hp.sigma2_prior_rate <= 0.0
    {
        return Err(Error::validation("b and d must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = hp.areas;
    let t = hp.topics;

    let psi = dirichlet(&mut rng, hp.gamma, l);
    let mut phi = Vec::with_capacity(l);
    let mut feature_dists: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(l); cfg.category_sizes.len()];
    let mut region_dists = Vec::with_capacity(l);
    let mut mu = Vec::with_capacity(l);
    let mut sigma2 = Vec::with_capacity(l);

    let mu_normal = Normal::new(hp.mu_prior_mean, hp.mu_prior_scale).expect("positive scale");
    // shape-rate parametrization: scale = 1/rate
    let sigma2_gamma = Gamma::new(hp.sigma2_prior_shape, 1.0 / hp.sigma2_prior_rate)
        .map_err(|e| Error::validation(format!("invalid gamma prior: {e}")))?;

    for _ in 0..l {
        phi.push(
            (0..t)
                .map(|_| dirichlet(&mut rng, hp.beta, cfg.vocab_size))
                .collect::<Vec<_>>(),
        );
        for (u, &c_u) in cfg.category_sizes.iter().enumerate() {
            feature_dists[u].push(dirichlet(&mut rng, hp.delta, c_u));
        }
        region_dists.push(dirichlet(&mut rng, hp.delta_tilde, cfg.regions));
        mu.push([mu_normal.sample(&mut rng), mu_normal.sample(&mut rng)]);
        sigma2.push(sigma2_gamma.sample(&mut rng).max(1e-6));
    }

    let params = AreaParams {
        psi,
        phi,
        feature_dists,
        region_dists,
        mu,
        sigma2,
    };
    let (records, doc_area, doc_theta, doc_z) =
        sample_documents(&params, cfg.docs, cfg.tokens_per_doc, hp.alpha, t, &mut rng);

    Ok((
        records,
        GroundTruth {
            psi: params.psi,
            phi: params.phi,
            feature_dists: params.feature_dists,
            region_dists: params.region_dists,
            mu: params.mu,
            sigma2: params.sigma2,
            doc_area,
            doc_theta,
            doc_z,
        },
    ))
}

/// Construction knobs for a well-separated recovery scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub areas: usize,
    pub topics: usize,
    pub spread_deg: f64,
    pub sigma_deg: f64,
    pub docs: usize,
    pub tokens_per_doc: usize,
    pub vocab_size: usize,
    pub category_sizes: Vec<usize>,
    /// Probability mass concentrated on each area's own word block.
    pub high_mass: f64,
    /// Off-diagonal mass of the per-area region distribution; 0 = identity.
    pub region_smoothing: f64,
    pub alpha: Option<f64>,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            areas: 5,
            topics: 1,
            spread_deg: 10.0,
            sigma_deg: 0.5,
            docs: 5000,
            tokens_per_doc: 12,
            vocab_size: 500,
            category_sizes: vec![6, 6],
            high_mass: 0.9,
            region_smoothing: 0.0,
            alpha: None,
            delta: 0.01,
            seed: 0,
        }
    }
}

/// Like [`forward_sample`] but with the area-level draws overridden by a
/// constructed well-separated configuration: grid centers `spread_deg`
/// apart, fixed variance, identity region rows, disjoint high-mass word
/// blocks and a uniform area distribution. Regions equal area indices.
pub fn separated_scenario(cfg: &ScenarioConfig) -> Result<(Vec<RawRecord>, GroundTruth)> {
    if cfg.spread_deg <= 4.0 * cfg.sigma_deg {
        return Err(Error::validation(format!(
            "separation violated: spread {} must exceed 4 * sigma {}",
            cfg.spread_deg, cfg.sigma_deg
        )));
    }
    if cfg.vocab_size < cfg.areas {
        return Err(Error::validation(
            "vocabulary too small for disjoint blocks",
        ));
    }
    if !(0.0..1.0).contains(&cfg.region_smoothing) || !(0.0..=1.0).contains(&cfg.high_mass) {
        return Err(Error::validation(
            "high_mass and region_smoothing must be in [0, 1)",
        ));
    }
    let l = cfg.areas;
    let t = cfg.topics.max(1);
    let v = cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Grid of centers in mid-latitudes.
    let cols = (l as f64).sqrt().ceil() as usize;
    let mu: Vec<[f64; 2]> = (0..l)
        .map(|i| {
            let row = i / cols;
            let col = i % cols;
            [
                10.0 + row as f64 * cfg.spread_deg,
                -20.0 + col as f64 * cfg.spread_deg,
            ]
        })
        .collect();
    let sigma2 = vec![cfg.sigma_deg * cfg.sigma_deg; l];

    // Disjoint high-mass word blocks per area, shared by all its topics.
    let block = v / l;
    let phi: Vec<Vec<Vec<f64>>> = (0..l)
        .map(|i| {
            let start = i * block;
            let end = if i == l - 1 { v } else { start + block };
            let inside = cfg.high_mass / (end - start) as f64;
            let outside = if v == end - start {
                0.0
            } else {
                (1.0 - cfg.high_mass) / (v - (end - start)) as f64
            };
            let row: Vec<f64> = (0..v)
                .map(|w| {
                    if (start..end).contains(&w) {
                        inside
                    } else {
                        outside
                    }
                })
                .collect();
            vec![row; t]
        })
        .collect();

    let region_dists: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..l)
                .map(|c| {
                    if c == i {
                        1.0 - cfg.region_smoothing
                    } else {
                        cfg.region_smoothing / (l - 1).max(1) as f64
                    }
                })
                .collect()
        })
        .collect();

    let mut feature_dists: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(l); cfg.category_sizes.len()];
    for _ in 0..l {
        for (u, &c_u) in cfg.category_sizes.iter().enumerate() {
            feature_dists[u].push(dirichlet(&mut rng, cfg.delta, c_u));
        }
    }

    let params = AreaParams {
        psi: vec![1.0 / l as f64; l],
        phi,
        feature_dists,
        region_dists,
        mu,
        sigma2,
    };
    let alpha = cfg.alpha.unwrap_or(50.0 / (l as f64 * t as f64));
    let (records, doc_area, doc_theta, doc_z) =
        sample_documents(&params, cfg.docs, cfg.tokens_per_doc, alpha, t, &mut rng);

    Ok((
        records,
        GroundTruth {
            psi: params.psi,
            phi: params.phi,
            feature_dists: params.feature_dists,
            region_dists: params.region_dists,
            mu: params.mu,
            sigma2: params.sigma2,
            doc_area,
            doc_theta,
            doc_z,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_schema, index_corpus, preprocess_record};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn generator(l: usize, t: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            hyperparams: Hyperparams::with_dims(l, t),
            docs: 50,
            tokens_per_doc: 5,
            vocab_size: 20,
            category_sizes: vec![3],
            regions: 4,
            seed,
        }
    }

    #[test]
    fn single_area_assigns_everything_to_zero() {
        let (_, truth) = forward_sample(&generator(1, 1, 0)).unwrap();
        assert!(truth.doc_area.iter().all(|&p| p == 0));
    }

    #[test]
    fn ground_truth_distributions_sum_to_one() {
        let (_, truth) = forward_sample(&generator(3, 2, 1)).unwrap();
        let close = |s: f64| (s - 1.0).abs() < 1e-12;
        assert!(close(truth.psi.iter().sum()));
        for area in &truth.phi {
            for topic in area {
                assert!(close(topic.iter().sum()));
            }
        }
        for feature in &truth.feature_dists {
            for row in feature {
                assert!(close(row.iter().sum()));
            }
        }
        for row in &truth.region_dists {
            assert!(close(row.iter().sum()));
        }
        for theta in &truth.doc_theta {
            assert!(close(theta.iter().sum()));
        }
    }

    #[test]
    fn huge_gamma_gives_uniform_area_frequencies() {
        let mut cfg = generator(4, 1, 7);
        cfg.hyperparams.gamma = 1e6;
        cfg.docs = 100_000;
        cfg.tokens_per_doc = 0;
        let (_, truth) = forward_sample(&cfg).unwrap();
        let n = truth.doc_area.len() as f64;
        let p = 0.25;
        let sigma = (p * (1.0 - p) / n).sqrt();
        for area in 0..4 {
            let freq = truth.doc_area.iter().filter(|&&a| a == area).count() as f64 / n;
            assert!((freq - p).abs() < 3.0 * sigma, "area {area}: freq {freq}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_corpus_bytes() {
        let (r1, t1) = forward_sample(&generator(3, 1, 42)).unwrap();
        let (r2, t2) = forward_sample(&generator(3, 1, 42)).unwrap();
        assert_eq!(
            serde_json::to_vec(&r1).unwrap(),
            serde_json::to_vec(&r2).unwrap()
        );
        assert_eq!(
            serde_json::to_vec(&t1).unwrap(),
            serde_json::to_vec(&t2).unwrap()
        );
    }

    #[test]
    fn word_frequencies_match_phi_chi_square() {
        let mut cfg = generator(1, 1, 3);
        cfg.hyperparams.beta = 0.5;
        cfg.docs = 1000;
        cfg.tokens_per_doc = 100;
        cfg.vocab_size = 25;
        let (records, truth) = forward_sample(&cfg).unwrap();
        let phi = &truth.phi[0][0];
        let mut counts = vec![0usize; cfg.vocab_size];
        let mut n = 0usize;
        for r in &records {
            for tok in preprocess_record(r) {
                let w: usize = tok.trim_start_matches('w').parse().unwrap();
                counts[w] += 1;
                n += 1;
            }
        }
        assert_eq!(n, 100_000);
        let statistic: f64 = counts
            .iter()
            .zip(phi)
            .map(|(&c, &p)| {
                let expected = p * n as f64;
                (c as f64 - expected).powi(2) / expected.max(1e-12)
            })
            .sum();
        let critical = ChiSquared::new((cfg.vocab_size - 1) as f64)
            .unwrap()
            .inverse_cdf(0.999);
        assert!(
            statistic < critical,
            "chi-square statistic {statistic} exceeds critical {critical}"
        );
    }

    #[test]
    fn generated_corpus_survives_indexing_round_trip() {
        let (records, _) = forward_sample(&generator(2, 1, 9)).unwrap();
        let schema = build_schema(&records, 1).unwrap();
        let docs = index_corpus(&records, &schema).unwrap();
        assert_eq!(docs.len(), records.len());
        for (doc, record) in docs.iter().zip(&records) {
            assert_eq!(doc.tokens.len(), preprocess_record(record).len());
            assert!(doc.region.is_some());
            assert!(doc.coords.is_some());
        }
    }

    #[test]
    fn scenario_centers_are_separated() {
        let cfg = ScenarioConfig {
            areas: 3,
            docs: 10,
            vocab_size: 30,
            ..Default::default()
        };
        let (_, truth) = separated_scenario(&cfg).unwrap();
        for i in 0..3 {
            for j in 0..i {
                let d = ((truth.mu[i][0] - truth.mu[j][0]).powi(2)
                    + (truth.mu[i][1] - truth.mu[j][1]).powi(2))
                .sqrt();
                assert!(
                    d >= cfg.spread_deg - 1e-9,
                    "centers {i},{j} at distance {d}"
                );
            }
        }
    }

    #[test]
    fn scenario_rejects_bad_separation() {
        let cfg = ScenarioConfig {
            spread_deg: 1.0,
            sigma_deg: 0.5,
            ..Default::default()
        };
        assert!(separated_scenario(&cfg).is_err());
    }

    #[test]
    fn scenario_coords_concentrate_near_centers() {
        let cfg = ScenarioConfig {
            areas: 4,
            docs: 20_000,
            tokens_per_doc: 0,
            vocab_size: 40,
            category_sizes: vec![],
            seed: 11,
            ..Default::default()
        };
        let (records, truth) = separated_scenario(&cfg).unwrap();
        let mut within = 0usize;
        for (r, &p) in records.iter().zip(&truth.doc_area) {
            let d = ((r.lat.unwrap() - truth.mu[p][0]).powi(2)
                + (r.lon.unwrap() - truth.mu[p][1]).powi(2))
            .sqrt();
            if d <= 4.0 * cfg.sigma_deg {
                within += 1;
            }
        }
        assert!(within as f64 / records.len() as f64 >= 0.999);
    }

    #[test]
    fn scenario_region_equals_area_without_smoothing() {
        let cfg = ScenarioConfig {
            areas: 3,
            docs: 500,
            vocab_size: 30,
            region_smoothing: 0.0,
            ..Default::default()
        };
        let (records, truth) = separated_scenario(&cfg).unwrap();
        for (r, &p) in records.iter().zip(&truth.doc_area) {
            assert_eq!(r.region.as_deref().unwrap(), format!("r{p}"));
        }
    }
}
