//! Gibbs-EM training loop: collapsed Gibbs E-step alternated with the
//! closed-form M-step for area centers and variances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSchema, Document};
use crate::error::{Error, Result};
use crate::model::{init_state, AreaGaussians, Hyperparams, TrainedModel};
use crate::predict::{haversine_km, kmeans_regions};
use crate::sampler::{e_step, joint_log_prob, mode_disagreement, ConditionalMode, Snapshot};

/// Per-run training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Collapsed log-joint of the last snapshot of each EM iteration.
    pub log_joint_trace: Vec<f64>,
    /// Max over areas of center movement per iteration, km.
    pub mu_movement_km: Vec<f64>,
    /// Variance vector per iteration.
    pub sigma2_trace: Vec<Vec<f64>>,
    /// Areas that had no pooled members in some iteration.
    pub empty_area_events: Vec<(usize, usize)>,
    /// Final number of documents per area.
    pub final_occupancy: Vec<u32>,
    /// Mean TV distance between the two conditional modes at the final state.
    pub mode_tv_disagreement: f64,
}

/// Pooled per-area coordinate sums over all S snapshots.
#[allow(clippy::type_complexity)]
fn pooled_members(
    snapshots: &[Snapshot],
    corpus: &[Document],
    areas: usize,
) -> (Vec<[f64; 2]>, Vec<u64>, Vec<Vec<[f64; 2]>>) {
    let mut sums = vec![[0.0f64; 2]; areas];
    let mut counts = vec![0u64; areas];
    let mut members: Vec<Vec<[f64; 2]>> = vec![Vec::new(); areas];
    for snap in snapshots {
        for (k, doc) in corpus.iter().enumerate() {
            let p = snap.p[k];
            let y = doc.coords.expect("training document lacks coordinates");
            sums[p][0] += y[0];
            sums[p][1] += y[1];
            counts[p] += 1;
            members[p].push(y);
        }
    }
    (sums, counts, members)
}

/// Mean of member coordinates pooled over all snapshots. Areas with no
/// pooled members keep their previous center; their indices are returned.
pub fn m_step_mu(
    snapshots: &[Snapshot],
    corpus: &[Document],
    previous: &[[f64; 2]],
) -> (Vec<[f64; 2]>, Vec<usize>) {
    let areas = previous.len();
    let (sums, counts, _) = pooled_members(snapshots, corpus, areas);
    let mut empty = Vec::new();
    let mu = (0..areas)
        .map(|p| {
            if counts[p] == 0 {
                empty.push(p);
                previous[p]
            } else {
                [sums[p][0] / counts[p] as f64, sums[p][1] / counts[p] as f64]
            }
        })
        .collect();
    (mu, empty)
}

/// Positive root of lambda*s^4 + s^2 - abar = 0 where abar is the pooled
/// mean squared distance divided by 3. Degenerate areas get the floor.
pub fn m_step_sigma(
    snapshots: &[Snapshot],
    corpus: &[Document],
    mu: &[[f64; 2]],
    lambda: f64,
    sigma2_floor: f64,
) -> Vec<f64> {
    let areas = mu.len();
    let (_, counts, members) = pooled_members(snapshots, corpus, areas);
    (0..areas)
        .map(|p| {
            if counts[p] == 0 {
                return sigma2_floor;
            }
            let ss: f64 = members[p]
                .iter()
                .map(|y| (y[0] - mu[p][0]).powi(2) + (y[1] - mu[p][1]).powi(2))
                .sum();
            let abar = ss / (3.0 * counts[p] as f64);
            if abar <= 0.0 {
                return sigma2_floor;
            }
            // (-1 + sqrt(1 + 4*lambda*abar)) / (2*lambda), rationalized to
            // avoid cancellation for small lambda; exact at lambda = 0.
            let s2 = 2.0 * abar / (1.0 + (1.0 + 4.0 * lambda * abar).sqrt());
            s2.max(sigma2_floor)
        })
        .collect()
}

/// Initial Gaussians: K-means on the training coordinates with L clusters,
/// sigma^2 from the per-cluster mean squared distance / 3.
fn init_gaussians(
    corpus: &[Document],
    hp: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> Result<AreaGaussians> {
    let coords: Vec<[f64; 2]> = corpus
        .iter()
        .map(|d| d.coords.expect("training document lacks coordinates"))
        .collect();
    let (labels, centers) = match kmeans_regions(&coords, hp.areas, rng) {
        Ok(res) => res,
        Err(_) => {
            // fewer distinct points than areas: stack all centers on the mean
            let n = coords.len() as f64;
            let mean = coords
                .iter()
                .fold([0.0, 0.0], |m, c| [m[0] + c[0] / n, m[1] + c[1] / n]);
            (vec![0; coords.len()], vec![mean; hp.areas])
        }
    };
    let mut ss = vec![0.0f64; hp.areas];
    let mut counts = vec![0u64; hp.areas];
    for (i, &y) in coords.iter().enumerate() {
        let c = labels[i];
        ss[c] += (y[0] - centers[c][0]).powi(2) + (y[1] - centers[c][1]).powi(2);
        counts[c] += 1;
    }
    let sigma2 = (0..hp.areas)
        .map(|c| {
            if counts[c] == 0 {
                hp.sigma2_floor
            } else {
                (ss[c] / (3.0 * counts[c] as f64)).max(hp.sigma2_floor)
            }
        })
        .collect();
    Ok(AreaGaussians {
        mu: centers,
        sigma2,
    })
}

/// Full Gibbs-EM training run. Counts from the last snapshot of the final
/// E-step are frozen into the returned model.
pub fn train(
    corpus: &[Document],
    schema: &CorpusSchema,
    hp: &Hyperparams,
    mode: ConditionalMode,
) -> Result<(TrainedModel, TrainReport)> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut gaussians = init_gaussians(corpus, hp, &mut rng)?;
    let mut state = init_state(corpus, schema, hp, &mut rng)?;

    let mut report = TrainReport {
        log_joint_trace: Vec::with_capacity(hp.em_iters),
        mu_movement_km: Vec::with_capacity(hp.em_iters),
        sigma2_trace: Vec::with_capacity(hp.em_iters),
        empty_area_events: Vec::new(),
        final_occupancy: Vec::new(),
        mode_tv_disagreement: 0.0,
    };

    for iter in 0..hp.em_iters {
        let snapshots = e_step(&mut state, corpus, schema, &gaussians, hp, mode, &mut rng)?;
        let (mu, empty) = m_step_mu(&snapshots, corpus, &gaussians.mu);
        for p in empty {
            report.empty_area_events.push((iter, p));
        }
        let sigma2 = m_step_sigma(&snapshots, corpus, &mu, hp.lambda, hp.sigma2_floor);
        let movement = gaussians
            .mu
            .iter()
            .zip(&mu)
            .map(|(&a, &b)| haversine_km(a, b))
            .fold(0.0, f64::max);
        gaussians = AreaGaussians { mu, sigma2 };

        let last = snapshots.last().expect("S >= 1 guarantees a snapshot");
        let lj = joint_log_prob(&last.z, &last.p, corpus, schema, &gaussians, hp);
        if !lj.is_finite() {
            return Err(Error::runtime(format!(
                "non-finite log-joint at EM iteration {iter}: {lj}"
            )));
        }
        report.log_joint_trace.push(lj);
        report.mu_movement_km.push(movement);
        report.sigma2_trace.push(gaussians.sigma2.clone());
    }

    report.final_occupancy = state.area_doc_count.clone();
    report.mode_tv_disagreement = mode_disagreement(&mut state, corpus, schema, &gaussians, hp)?;

    let model = TrainedModel::from_state(&state, schema.clone(), hp.clone(), gaussians);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_schema, index_corpus};
    use crate::synthetic::{separated_scenario, ScenarioConfig};
    use approx::assert_relative_eq;

    fn snap(p: Vec<usize>) -> Snapshot {
        Snapshot { z: vec![], p }
    }

    fn coord_doc(y: [f64; 2]) -> Document {
        Document {
            tokens: vec![],
            feature_values: vec![],
            region: Some(0),
            coords: Some(y),
        }
    }

    #[test]
    fn mu_two_point_mean() {
        let corpus = vec![coord_doc([0.0, 0.0]), coord_doc([2.0, 4.0])];
        let (mu, empty) = m_step_mu(&[snap(vec![0, 0])], &corpus, &[[9.0, 9.0]]);
        assert_eq!(mu[0], [1.0, 2.0]);
        assert!(empty.is_empty());
    }

    #[test]
    fn mu_pooled_over_snapshots() {
        let corpus = vec![coord_doc([0.0, 0.0]), coord_doc([4.0, 0.0])];
        // Snapshot 1: doc 0 in area 0; snapshot 2: doc 1 in area 0.
        let snaps = vec![snap(vec![0, 1]), snap(vec![1, 0])];
        let (mu, _) = m_step_mu(&snaps, &corpus, &[[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(mu[0], [2.0, 0.0]);
    }

    #[test]
    fn mu_empty_area_keeps_previous() {
        let corpus = vec![coord_doc([1.0, 1.0])];
        let (mu, empty) = m_step_mu(&[snap(vec![0])], &corpus, &[[0.0, 0.0], [7.0, -7.0]]);
        assert_eq!(mu[1], [7.0, -7.0]);
        assert_eq!(empty, vec![1]);
    }

    #[test]
    fn sigma_lambda_zero_closed_form() {
        // Two members at squared distance 1 from mu: abar = 2/(3*2) = 1/3.
        let corpus = vec![coord_doc([1.0, 0.0]), coord_doc([-1.0, 0.0])];
        let s2 = m_step_sigma(&[snap(vec![0, 0])], &corpus, &[[0.0, 0.0]], 0.0, 1e-4);
        assert_relative_eq!(s2[0], 1.0 / 3.0, max_relative = 1e-12);
        // residual of the printed equation at the root
        let residual: f64 = 2.0 * (0.0 * s2[0].powi(2) + s2[0] - 1.0 / 3.0);
        assert!(residual.abs() < 1e-12);
    }

    #[test]
    fn sigma_lambda_one_root_check() {
        // abar = 2 with lambda = 1 gives sigma^2 = 1; 1*1 + 1 - 2 = 0.
        // Members at squared distance 6 from mu: abar = 6/3 = 2.
        let d = (6.0f64).sqrt();
        let corpus = vec![coord_doc([d, 0.0])];
        let s2 = m_step_sigma(&[snap(vec![0])], &corpus, &[[0.0, 0.0]], 1.0, 1e-4);
        assert_relative_eq!(s2[0], 1.0, max_relative = 1e-12);
        let residual = 1.0 * s2[0].powi(2) + s2[0] - 2.0;
        assert!(residual.abs() < 1e-12);
    }

    #[test]
    fn sigma_degenerate_members_get_floor() {
        let corpus = vec![coord_doc([2.0, 2.0]), coord_doc([2.0, 2.0])];
        let s2 = m_step_sigma(&[snap(vec![0, 0])], &corpus, &[[2.0, 2.0]], 0.5, 1e-4);
        assert_eq!(s2[0], 1e-4);
    }

    #[test]
    fn sigma_monotonicity_and_lambda_limit() {
        let mk = |d2: f64| vec![coord_doc([d2.sqrt(), 0.0])];
        let abars = [0.5, 1.0, 2.0, 4.0];
        let mut prev = 0.0;
        for &a in &abars {
            let corpus = mk(3.0 * a);
            let s2 = m_step_sigma(&[snap(vec![0])], &corpus, &[[0.0, 0.0]], 0.7, 1e-8)[0];
            assert!(s2 > prev, "sigma^2 must increase with abar");
            prev = s2;
        }
        // monotone non-increasing in lambda
        let corpus = mk(6.0);
        let mut prev = f64::INFINITY;
        for &l in &[0.0, 0.1, 1.0, 10.0] {
            let s2 = m_step_sigma(&[snap(vec![0])], &corpus, &[[0.0, 0.0]], l, 1e-8)[0];
            assert!(s2 <= prev);
            prev = s2;
        }
        // lambda -> 0 limit approaches abar
        let s2 = m_step_sigma(&[snap(vec![0])], &corpus, &[[0.0, 0.0]], 1e-12, 1e-8)[0];
        assert_relative_eq!(s2, 2.0, max_relative = 1e-6);
    }

    /// Best assignment of recovered centers to true centers (L small, so
    /// brute-force over permutations).
    pub(crate) fn best_matching_error(truth: &[[f64; 2]], fit: &[[f64; 2]]) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for i in 0..n {
                    let mut q: Vec<usize> =
                        p.iter().map(|&x| if x >= i { x + 1 } else { x }).collect();
                    q.insert(0, i);
                    out.push(q);
                }
            }
            out
        }
        permutations(truth.len())
            .into_iter()
            .map(|perm| {
                truth
                    .iter()
                    .zip(perm.iter().map(|&i| fit[i]))
                    .map(|(&t, f)| ((t[0] - f[0]).powi(2) + (t[1] - f[1]).powi(2)).sqrt())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn recovers_centers_of_separated_scenario() {
        let cfg = ScenarioConfig {
            areas: 3,
            spread_deg: 10.0,
            sigma_deg: 0.5,
            docs: 600,
            tokens_per_doc: 8,
            vocab_size: 60,
            category_sizes: vec![4],
            seed: 77,
            ..Default::default()
        };
        let (records, truth) = separated_scenario(&cfg).unwrap();
        let schema = build_schema(&records, 1).unwrap();
        let corpus = index_corpus(&records, &schema).unwrap();

        let mut hp = Hyperparams::with_dims(3, 1);
        hp.seed = 5;
        hp.em_iters = 5;
        hp.burn_in = 30;
        hp.samples = 5;
        let (model, report) = train(&corpus, &schema, &hp, ConditionalMode::JointRatio).unwrap();

        let err = best_matching_error(&truth.mu, &model.gaussians.mu);
        assert!(err < 0.2, "center recovery error {err} degrees");
        assert_eq!(report.log_joint_trace.len(), 5);
    }

    #[test]
    fn single_iteration_trace_and_determinism() {
        let cfg = ScenarioConfig {
            areas: 2,
            spread_deg: 10.0,
            sigma_deg: 0.5,
            docs: 60,
            tokens_per_doc: 4,
            vocab_size: 20,
            category_sizes: vec![],
            seed: 3,
            ..Default::default()
        };
        let (records, _) = separated_scenario(&cfg).unwrap();
        let schema = build_schema(&records, 1).unwrap();
        let corpus = index_corpus(&records, &schema).unwrap();

        let mut hp = Hyperparams::with_dims(2, 1);
        hp.em_iters = 1;
        hp.samples = 1;
        hp.burn_in = 2;
        let (m1, r1) = train(&corpus, &schema, &hp, ConditionalMode::JointRatio).unwrap();
        assert_eq!(r1.log_joint_trace.len(), 1);

        let (m2, _) = train(&corpus, &schema, &hp, ConditionalMode::JointRatio).unwrap();
        let b1 = serde_json::to_vec(&m1).unwrap();
        let b2 = serde_json::to_vec(&m2).unwrap();
        assert_eq!(b1, b2, "model bytes must be identical under a fixed seed");
    }

    #[test]
    fn log_joint_trend_is_non_decreasing() {
        let cfg = ScenarioConfig {
            areas: 3,
            spread_deg: 10.0,
            sigma_deg: 0.5,
            docs: 300,
            tokens_per_doc: 6,
            vocab_size: 45,
            category_sizes: vec![3],
            seed: 21,
            ..Default::default()
        };
        let (records, _) = separated_scenario(&cfg).unwrap();
        let schema = build_schema(&records, 1).unwrap();
        let corpus = index_corpus(&records, &schema).unwrap();

        let mut hp = Hyperparams::with_dims(3, 1);
        hp.em_iters = 6;
        hp.burn_in = 10;
        hp.samples = 3;
        let (_, report) = train(&corpus, &schema, &hp, ConditionalMode::JointRatio).unwrap();
        let diffs: Vec<f64> = report
            .log_joint_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect();
        let mut sorted = diffs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        assert!(
            median >= 0.0 || report.log_joint_trace.last() > report.log_joint_trace.first(),
            "log-joint trend decreasing: {:?}",
            report.log_joint_trace
        );
    }
}
