//! Model dimensions, hyperparameters, latent-state assignments and the
//! sufficient-statistic count tensors shared by the sampler and the M-step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSchema, Document};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// All fixed priors, dimensions and chain controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Number of latent areas (L).
    pub areas: usize,
    /// Topics per area (T).
    pub topics: usize,
    /// Symmetric Dirichlet prior over topics; default 50/(L*T).
    pub alpha: f64,
    /// Symmetric Dirichlet prior over words.
    pub beta: f64,
    /// Symmetric Dirichlet prior over areas.
    pub gamma: f64,
    /// Symmetric Dirichlet prior per categorical feature.
    pub delta: f64,
    /// Dirichlet prior for the region pseudo-feature.
    pub delta_tilde: f64,
    /// Ridge weight on sigma in the M-step objective.
    pub lambda: f64,
    /// Gaussian prior mean for area centers (generator only).
    pub mu_prior_mean: f64,
    /// Gaussian prior scale b for area centers (generator only).
    pub mu_prior_scale: f64,
    /// Gamma shape c for area variances (generator only; shape-rate).
    pub sigma2_prior_shape: f64,
    /// Gamma rate d for area variances (generator only; shape-rate).
    pub sigma2_prior_rate: f64,
    /// Assignment snapshots retained per E-step (S).
    pub samples: usize,
    /// Burn-in sweeps before the first retained snapshot.
    pub burn_in: usize,
    /// Sweeps between retained snapshots.
    pub thin: usize,
    /// EM iterations.
    pub em_iters: usize,
    /// Sweeps of the per-document chain at test time.
    pub test_sweeps: usize,
    /// Variance floor for degenerate areas, degrees^2.
    pub sigma2_floor: f64,
    pub seed: u64,
}

impl Hyperparams {
    /// Defaults for a given (L, T): alpha = 50/(L*T), other priors 0.01.
    pub fn with_dims(areas: usize, topics: usize) -> Self {
        Hyperparams {
            areas,
            topics,
            alpha: 50.0 / (areas as f64 * topics as f64),
            beta: 0.01,
            gamma: 0.01,
            delta: 0.01,
            delta_tilde: 0.01,
            lambda: 0.0,
            mu_prior_mean: 0.0,
            mu_prior_scale: 20.0,
            sigma2_prior_shape: 2.0,
            sigma2_prior_rate: 4.0,
            samples: 10,
            burn_in: 100,
            thin: 1,
            em_iters: 10,
            test_sweeps: 50,
            sigma2_floor: 1e-4,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.areas < 1 || self.topics < 1 || self.samples < 1 {
            return Err(Error::validation("L, T and S must all be >= 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("delta_tilde", self.delta_tilde),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::validation(format!(
                    "prior {name} must be > 0, got {v}"
                )));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::validation("lambda must be >= 0"));
        }
        if self.sigma2_floor.is_nan() || self.sigma2_floor <= 0.0 {
            return Err(Error::validation("sigma2_floor must be > 0"));
        }
        Ok(())
    }

    /// Dirichlet prior for feature `u` where `u == num_features` is the
    /// region pseudo-feature.
    pub fn delta_for(&self, u: usize, num_features: usize) -> f64 {
        if u == num_features {
            self.delta_tilde
        } else {
            self.delta
        }
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams::with_dims(30, 1)
    }
}

/// Per-area Gaussian coordinate distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaGaussians {
    /// (lat, lon) centers in degrees, one per area.
    pub mu: Vec<[f64; 2]>,
    /// Isotropic variances in degrees^2, one per area.
    pub sigma2: Vec<f64>,
}

impl AreaGaussians {
    pub fn validate(&self) -> Result<()> {
        if self.sigma2.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::runtime("non-positive area variance"));
        }
        Ok(())
    }
}

/// Current assignments plus every sufficient-statistic count tensor.
///
/// Count tensor naming follows the roles: `topic_area_word[j][i][r]` is the
/// number of tokens of word r assigned topic j in area i, and
/// `area_feature_cat[i][u][v]` counts documents in area i whose feature u
/// (region appended as the last feature) has category v.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub z: Vec<Vec<usize>>,
    pub p: Vec<usize>,
    pub doc_topic: Vec<Vec<u32>>,
    pub topic_area_word: Vec<Vec<Vec<u32>>>,
    pub topic_area_total: Vec<Vec<u32>>,
    pub area_word_total: Vec<u32>,
    pub area_doc_count: Vec<u32>,
    pub area_feature_cat: Vec<Vec<Vec<u32>>>,
}

impl SamplerState {
    fn empty(schema: &CorpusSchema, hp: &Hyperparams, num_docs: usize) -> Self {
        let v = schema.vocab_size();
        let cat_sizes = schema.category_sizes_with_region();
        SamplerState {
            z: vec![Vec::new(); num_docs],
            p: vec![0; num_docs],
            doc_topic: vec![vec![0; hp.topics]; num_docs],
            topic_area_word: vec![vec![vec![0; v]; hp.areas]; hp.topics],
            topic_area_total: vec![vec![0; hp.areas]; hp.topics],
            area_word_total: vec![0; hp.areas],
            area_doc_count: vec![0; hp.areas],
            area_feature_cat: vec![
                cat_sizes.iter().map(|&c| vec![0; c]).collect::<Vec<_>>();
                hp.areas
            ],
        }
    }

    /// Add document k's tokens, feature observations and membership under
    /// its current (z, p) assignments.
    pub fn add_doc(&mut self, k: usize, doc: &Document) {
        let p = self.p[k];
        for (l, &w) in doc.tokens.iter().enumerate() {
            let j = self.z[k][l];
            self.doc_topic[k][j] += 1;
            self.topic_area_word[j][p][w] += 1;
            self.topic_area_total[j][p] += 1;
            self.area_word_total[p] += 1;
        }
        self.area_doc_count[p] += 1;
        for (u, &v) in doc.feature_values.iter().enumerate() {
            self.area_feature_cat[p][u][v] += 1;
        }
        let region = doc.region.expect("training document must carry a region");
        let f = doc.feature_values.len();
        self.area_feature_cat[p][f][region] += 1;
    }

    /// Remove document k entirely (tokens, features, membership).
    pub fn remove_doc(&mut self, k: usize, doc: &Document) {
        let p = self.p[k];
        for (l, &w) in doc.tokens.iter().enumerate() {
            let j = self.z[k][l];
            self.doc_topic[k][j] -= 1;
            self.topic_area_word[j][p][w] -= 1;
            self.topic_area_total[j][p] -= 1;
            self.area_word_total[p] -= 1;
        }
        self.area_doc_count[p] -= 1;
        for (u, &v) in doc.feature_values.iter().enumerate() {
            self.area_feature_cat[p][u][v] -= 1;
        }
        let region = doc.region.expect("training document must carry a region");
        let f = doc.feature_values.len();
        self.area_feature_cat[p][f][region] -= 1;
    }

    pub fn add_token(&mut self, k: usize, l: usize, doc: &Document) {
        let p = self.p[k];
        let j = self.z[k][l];
        let w = doc.tokens[l];
        self.doc_topic[k][j] += 1;
        self.topic_area_word[j][p][w] += 1;
        self.topic_area_total[j][p] += 1;
        self.area_word_total[p] += 1;
    }

    pub fn remove_token(&mut self, k: usize, l: usize, doc: &Document) {
        let p = self.p[k];
        let j = self.z[k][l];
        let w = doc.tokens[l];
        self.doc_topic[k][j] -= 1;
        self.topic_area_word[j][p][w] -= 1;
        self.topic_area_total[j][p] -= 1;
        self.area_word_total[p] -= 1;
    }
}

/// Uniform-random initial assignments with consistent count tensors.
///
/// With T = 1 no topic draw is made (z is identically 0 and consumes no
/// randomness), matching the degenerate DMM structure.
pub fn init_state<R: Rng + ?Sized>(
    corpus: &[Document],
    schema: &CorpusSchema,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<SamplerState> {
    if corpus.is_empty() {
        return Err(Error::validation(
            "cannot initialize sampler on an empty corpus",
        ));
    }
    for (k, doc) in corpus.iter().enumerate() {
        if doc.region.is_none() || doc.coords.is_none() {
            return Err(Error::validation(format!(
                "training document {k} lacks region or coordinates"
            )));
        }
    }
    let mut state = SamplerState::empty(schema, hp, corpus.len());
    for (k, doc) in corpus.iter().enumerate() {
        state.p[k] = if hp.areas > 1 {
            rng.gen_range(0..hp.areas)
        } else {
            0
        };
        state.z[k] = doc
            .tokens
            .iter()
            .map(|_| {
                if hp.topics > 1 {
                    rng.gen_range(0..hp.topics)
                } else {
                    0
                }
            })
            .collect();
        state.add_doc(k, doc);
    }
    Ok(state)
}

/// Recompute every count tensor from (z, p) and the corpus; return all
/// mismatches. An empty result means the state is consistent.
pub fn audit_counts(
    state: &SamplerState,
    corpus: &[Document],
    schema: &CorpusSchema,
    hp: &Hyperparams,
) -> Vec<String> {
    let mut fresh = SamplerState::empty(schema, hp, corpus.len());
    fresh.p.clone_from(&state.p);
    fresh.z.clone_from(&state.z);
    for (k, doc) in corpus.iter().enumerate() {
        fresh.add_doc(k, doc);
    }

    let mut issues = Vec::new();
    for k in 0..corpus.len() {
        for j in 0..hp.topics {
            if fresh.doc_topic[k][j] != state.doc_topic[k][j] {
                issues.push(format!(
                    "doc_topic[{k}][{j}]: have {}, expect {}",
                    state.doc_topic[k][j], fresh.doc_topic[k][j]
                ));
            }
        }
    }
    for j in 0..hp.topics {
        for i in 0..hp.areas {
            if fresh.topic_area_total[j][i] != state.topic_area_total[j][i] {
                issues.push(format!(
                    "topic_area_total[{j}][{i}]: have {}, expect {}",
                    state.topic_area_total[j][i], fresh.topic_area_total[j][i]
                ));
            }
            for r in 0..schema.vocab_size() {
                if fresh.topic_area_word[j][i][r] != state.topic_area_word[j][i][r] {
                    issues.push(format!(
                        "topic_area_word[{j}][{i}][{r}]: have {}, expect {}",
                        state.topic_area_word[j][i][r], fresh.topic_area_word[j][i][r]
                    ));
                }
            }
        }
    }
    for i in 0..hp.areas {
        if fresh.area_word_total[i] != state.area_word_total[i] {
            issues.push(format!(
                "area_word_total[{i}]: have {}, expect {}",
                state.area_word_total[i], fresh.area_word_total[i]
            ));
        }
        if fresh.area_doc_count[i] != state.area_doc_count[i] {
            issues.push(format!(
                "area_doc_count[{i}]: have {}, expect {}",
                state.area_doc_count[i], fresh.area_doc_count[i]
            ));
        }
        for (u, cats) in fresh.area_feature_cat[i].iter().enumerate() {
            for (v, &c) in cats.iter().enumerate() {
                if state.area_feature_cat[i][u][v] != c {
                    issues.push(format!(
                        "area_feature_cat[{i}][{u}][{v}]: have {}, expect {}",
                        state.area_feature_cat[i][u][v], c
                    ));
                }
            }
        }
    }
    issues
}

/// Frozen posterior counts + area Gaussians: the serializable prediction
/// artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub hyperparams: Hyperparams,
    pub schema: CorpusSchema,
    pub topic_area_word: Vec<Vec<Vec<u32>>>,
    pub topic_area_total: Vec<Vec<u32>>,
    pub area_word_total: Vec<u32>,
    pub area_doc_count: Vec<u32>,
    pub area_feature_cat: Vec<Vec<Vec<u32>>>,
    pub gaussians: AreaGaussians,
    /// Smoothed per-area posterior over regions; each row sums to 1.
    pub region_posterior: Vec<Vec<f64>>,
}

/// Posterior rows f~[i][c] = (m[i][F][c] + delta_tilde) / sum_c'(...).
pub fn region_posterior_from_counts(
    area_feature_cat: &[Vec<Vec<u32>>],
    num_features: usize,
    delta_tilde: f64,
) -> Vec<Vec<f64>> {
    area_feature_cat
        .iter()
        .map(|per_feature| {
            let counts = &per_feature[num_features];
            let total: f64 = counts.iter().map(|&c| c as f64 + delta_tilde).sum();
            counts
                .iter()
                .map(|&c| (c as f64 + delta_tilde) / total)
                .collect()
        })
        .collect()
}

impl TrainedModel {
    pub fn from_state(
        state: &SamplerState,
        schema: CorpusSchema,
        hyperparams: Hyperparams,
        gaussians: AreaGaussians,
    ) -> Self {
        let region_posterior = region_posterior_from_counts(
            &state.area_feature_cat,
            schema.num_features(),
            hyperparams.delta_tilde,
        );
        TrainedModel {
            format_version: MODEL_FORMAT_VERSION,
            hyperparams,
            schema,
            topic_area_word: state.topic_area_word.clone(),
            topic_area_total: state.topic_area_total.clone(),
            area_word_total: state.area_word_total.clone(),
            area_doc_count: state.area_doc_count.clone(),
            area_feature_cat: state.area_feature_cat.clone(),
            gaussians,
            region_posterior,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: TrainedModel = serde_json::from_reader(file)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::validation(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}
