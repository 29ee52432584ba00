//! Collapsed Gibbs E-step: per-token topic conditional, per-document area
//! conditional (training and test variants), the collapsed joint used as a
//! validation oracle, and the sweep/snapshot machinery.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSchema, Document};
use crate::error::{Error, Result};
use crate::math::{
    ln_gamma, ln_rising, ln_rising_big, log_weights_to_probs, sample_log_weights, total_variation,
};
use crate::model::{AreaGaussians, Hyperparams, SamplerState, TrainedModel};

/// How the area conditional is evaluated.
///
/// `PaperLiteral` evaluates the printed formula term by term (with the
/// denominator rising factorial applied once per topic). `JointRatio`
/// derives the conditional as a ratio of the collapsed joint, which replaces
/// the token-level area-prior rising factorial with the document-level
/// membership term. `JointRatio` is the default; the two agree on every term
/// except the area prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionalMode {
    #[default]
    JointRatio,
    PaperLiteral,
}

/// Document k's tokens grouped by current topic assignment: per topic, the
/// per-word counts and the topic total.
#[derive(Debug, Clone)]
pub struct DocGroups {
    pub topics: Vec<TopicGroup>,
}

#[derive(Debug, Clone)]
pub struct TopicGroup {
    pub topic: usize,
    pub total: u32,
    pub words: Vec<(usize, u32)>,
}

impl DocGroups {
    pub fn build(tokens: &[usize], z: &[usize], num_topics: usize) -> Self {
        let mut totals = vec![0u32; num_topics];
        let mut words: Vec<Vec<(usize, u32)>> = vec![Vec::new(); num_topics];
        for (&w, &j) in tokens.iter().zip(z) {
            totals[j] += 1;
            match words[j].iter_mut().find(|(r, _)| *r == w) {
                Some((_, c)) => *c += 1,
                None => words[j].push((w, 1)),
            }
        }
        let topics = (0..num_topics)
            .filter(|&j| totals[j] > 0)
            .map(|j| TopicGroup {
                topic: j,
                total: totals[j],
                words: std::mem::take(&mut words[j]),
            })
            .collect();
        DocGroups { topics }
    }
}

// ---------------------------------------------------------------------------
// Topic conditional
// ---------------------------------------------------------------------------

/// Log-weights of the topic conditional for token (k, l). The token must
/// already be removed from the counts; p_k is fixed.
pub fn z_log_weights(
    state: &SamplerState,
    doc: &Document,
    k: usize,
    l: usize,
    schema: &CorpusSchema,
    hp: &Hyperparams,
) -> Vec<f64> {
    let p = state.p[k];
    let w = doc.tokens[l];
    let v_beta = schema.vocab_size() as f64 * hp.beta;
    (0..hp.topics)
        .map(|j| {
            (hp.alpha + state.doc_topic[k][j] as f64).ln()
                + (hp.beta + state.topic_area_word[j][p][w] as f64).ln()
                - (v_beta + state.topic_area_total[j][p] as f64).ln()
        })
        .collect()
}

/// Draw a topic for token (k, l) from its conditional. Precondition: the
/// token is removed from the counts. The caller re-adds it under the result.
pub fn sample_z<R: Rng + ?Sized>(
    state: &SamplerState,
    doc: &Document,
    k: usize,
    l: usize,
    schema: &CorpusSchema,
    hp: &Hyperparams,
    rng: &mut R,
) -> usize {
    if hp.topics == 1 {
        return 0;
    }
    let lw = z_log_weights(state, doc, k, l, schema, hp);
    sample_log_weights(rng, &lw)
}

// ---------------------------------------------------------------------------
// Area conditional (training)
// ---------------------------------------------------------------------------

/// Word-evidence term shared by both modes: for each topic group of the
/// document, the rising-factorial ratio of word counts against area p.
fn word_term(
    groups: &DocGroups,
    topic_area_word: &[Vec<Vec<u32>>],
    topic_area_total: &[Vec<u32>],
    p: usize,
    v_beta: f64,
    beta: f64,
) -> f64 {
    let mut acc = 0.0;
    for g in &groups.topics {
        for &(r, c) in &g.words {
            acc += ln_rising(beta + topic_area_word[g.topic][p][r] as f64, c);
        }
        acc -= ln_rising(v_beta + topic_area_total[g.topic][p] as f64, g.total);
    }
    acc
}

/// Categorical-evidence term over the observed features (optionally
/// including the region pseudo-feature).
fn feature_term(
    area_feature_cat: &[Vec<Vec<u32>>],
    area_doc_count: &[u32],
    doc: &Document,
    p: usize,
    hp: &Hyperparams,
    cat_sizes: &[usize],
    include_region: bool,
) -> f64 {
    let f = doc.feature_values.len();
    let d_p = area_doc_count[p] as f64;
    let mut acc = 0.0;
    for (u, &x) in doc.feature_values.iter().enumerate() {
        let delta = hp.delta_for(u, f);
        acc += (delta + area_feature_cat[p][u][x] as f64).ln()
            - (d_p + cat_sizes[u] as f64 * delta).ln();
    }
    if include_region {
        let c = doc
            .region
            .expect("region required for training conditional");
        acc += (hp.delta_tilde + area_feature_cat[p][f][c] as f64).ln()
            - (d_p + cat_sizes[f] as f64 * hp.delta_tilde).ln();
    }
    acc
}

/// Log-weights of the training-time area conditional for document k.
/// Precondition: document k is fully removed from the counts.
pub fn p_train_log_weights(
    state: &SamplerState,
    doc: &Document,
    k: usize,
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
    mode: ConditionalMode,
) -> Result<Vec<f64>> {
    gaussians.validate()?;
    let groups = DocGroups::build(&doc.tokens, &state.z[k], hp.topics);
    let v_beta = schema.vocab_size() as f64 * hp.beta;
    let cat_sizes = schema.category_sizes_with_region();
    let y = doc
        .coords
        .expect("coordinates required for training conditional");
    let n_k = doc.tokens.len() as u32;

    let mut weights = Vec::with_capacity(hp.areas);
    for p in 0..hp.areas {
        let s2 = gaussians.sigma2[p];
        let mu = gaussians.mu[p];
        let d2 = (y[0] - mu[0]).powi(2) + (y[1] - mu[1]).powi(2);
        let mut lw = -s2.ln() - d2 / (2.0 * s2);
        lw += match mode {
            ConditionalMode::JointRatio => (state.area_doc_count[p] as f64 + hp.gamma).ln(),
            ConditionalMode::PaperLiteral => {
                ln_rising(state.area_word_total[p] as f64 + hp.gamma, n_k)
            }
        };
        lw += word_term(
            &groups,
            &state.topic_area_word,
            &state.topic_area_total,
            p,
            v_beta,
            hp.beta,
        );
        lw += feature_term(
            &state.area_feature_cat,
            &state.area_doc_count,
            doc,
            p,
            hp,
            &cat_sizes,
            true,
        );
        weights.push(lw);
    }
    Ok(weights)
}

/// Draw an area for document k. Precondition: the document is fully removed
/// from the counts; the caller re-adds it under the result.
#[allow(clippy::too_many_arguments)]
pub fn sample_p_train<R: Rng + ?Sized>(
    state: &SamplerState,
    doc: &Document,
    k: usize,
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
    mode: ConditionalMode,
    rng: &mut R,
) -> Result<usize> {
    if hp.areas == 1 {
        return Ok(0);
    }
    let lw = p_train_log_weights(state, doc, k, schema, gaussians, hp, mode)?;
    Ok(sample_log_weights(rng, &lw))
}

/// Mean total-variation distance between the two modes' area conditionals
/// over all documents of the corpus, at the current state.
pub fn mode_disagreement(
    state: &mut SamplerState,
    corpus: &[Document],
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
) -> Result<f64> {
    let mut acc = 0.0;
    for (k, doc) in corpus.iter().enumerate() {
        state.remove_doc(k, doc);
        let a = p_train_log_weights(
            state,
            doc,
            k,
            schema,
            gaussians,
            hp,
            ConditionalMode::JointRatio,
        )?;
        let b = p_train_log_weights(
            state,
            doc,
            k,
            schema,
            gaussians,
            hp,
            ConditionalMode::PaperLiteral,
        )?;
        state.add_doc(k, doc);
        acc += total_variation(&log_weights_to_probs(&a), &log_weights_to_probs(&b));
    }
    Ok(acc / corpus.len() as f64)
}

// ---------------------------------------------------------------------------
// Area conditional (test time)
// ---------------------------------------------------------------------------

/// Mutable per-document scratch for a test-time chain. The frozen model
/// counts are never touched; only the document's own assignments move.
#[derive(Debug, Clone)]
pub struct TestDocState {
    pub p: usize,
    pub z: Vec<usize>,
}

/// Log-weights of the test-time area conditional: area prior, word evidence
/// and the observed categorical features only. Region evidence and the
/// coordinate Gaussian are omitted (they are unobserved at test time).
pub fn p_test_log_weights(
    model: &TrainedModel,
    doc: &Document,
    doc_state: &TestDocState,
    mode: ConditionalMode,
) -> Vec<f64> {
    let hp = &model.hyperparams;
    let groups = DocGroups::build(&doc.tokens, &doc_state.z, hp.topics);
    let v_beta = model.schema.vocab_size() as f64 * hp.beta;
    let cat_sizes = model.schema.category_sizes_with_region();
    let n_k = doc.tokens.len() as u32;

    (0..hp.areas)
        .map(|p| {
            let mut lw = match mode {
                ConditionalMode::JointRatio => (model.area_doc_count[p] as f64 + hp.gamma).ln(),
                ConditionalMode::PaperLiteral => {
                    ln_rising(model.area_word_total[p] as f64 + hp.gamma, n_k)
                }
            };
            lw += word_term(
                &groups,
                &model.topic_area_word,
                &model.topic_area_total,
                p,
                v_beta,
                hp.beta,
            );
            lw += feature_term(
                &model.area_feature_cat,
                &model.area_doc_count,
                doc,
                p,
                hp,
                &cat_sizes,
                false,
            );
            lw
        })
        .collect()
}

pub fn sample_p_test<R: Rng + ?Sized>(
    model: &TrainedModel,
    doc: &Document,
    doc_state: &TestDocState,
    mode: ConditionalMode,
    rng: &mut R,
) -> usize {
    if model.hyperparams.areas == 1 {
        return 0;
    }
    let lw = p_test_log_weights(model, doc, doc_state, mode);
    sample_log_weights(rng, &lw)
}

/// Test-time topic conditional for token l: frozen counts plus the
/// document's own other tokens.
fn z_test_log_weights(
    model: &TrainedModel,
    doc: &Document,
    doc_state: &TestDocState,
    l: usize,
) -> Vec<f64> {
    let hp = &model.hyperparams;
    let p = doc_state.p;
    let w = doc.tokens[l];
    let v_beta = model.schema.vocab_size() as f64 * hp.beta;

    let mut own_topic = vec![0u32; hp.topics];
    let mut own_word = vec![0u32; hp.topics];
    for (i, (&tok, &j)) in doc.tokens.iter().zip(&doc_state.z).enumerate() {
        if i == l {
            continue;
        }
        own_topic[j] += 1;
        if tok == w {
            own_word[j] += 1;
        }
    }

    (0..hp.topics)
        .map(|j| {
            (hp.alpha + own_topic[j] as f64).ln()
                + (hp.beta + (model.topic_area_word[j][p][w] + own_word[j]) as f64).ln()
                - (v_beta + (model.topic_area_total[j][p] + own_topic[j]) as f64).ln()
        })
        .collect()
}

/// Run a short per-document chain against the frozen model and return the
/// area samples of the last `keep` sweeps.
pub fn test_chain<R: Rng + ?Sized>(
    model: &TrainedModel,
    doc: &Document,
    mode: ConditionalMode,
    sweeps: usize,
    keep: usize,
    rng: &mut R,
) -> Vec<usize> {
    let hp = &model.hyperparams;
    let mut doc_state = TestDocState {
        p: if hp.areas > 1 {
            rng.gen_range(0..hp.areas)
        } else {
            0
        },
        z: doc
            .tokens
            .iter()
            .map(|_| {
                if hp.topics > 1 {
                    rng.gen_range(0..hp.topics)
                } else {
                    0
                }
            })
            .collect(),
    };
    let sweeps = sweeps.max(keep).max(1);
    let mut samples = Vec::with_capacity(keep);
    for sweep in 0..sweeps {
        doc_state.p = sample_p_test(model, doc, &doc_state, mode, rng);
        if hp.topics > 1 {
            for l in 0..doc.tokens.len() {
                let lw = z_test_log_weights(model, doc, &doc_state, l);
                doc_state.z[l] = sample_log_weights(rng, &lw);
            }
        }
        if sweep + keep >= sweeps {
            samples.push(doc_state.p);
        }
    }
    samples
}

// ---------------------------------------------------------------------------
// Sweeps and snapshots
// ---------------------------------------------------------------------------

/// One retained (z, p) assignment sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub z: Vec<Vec<usize>>,
    pub p: Vec<usize>,
}

/// One full Gibbs sweep: documents in index order, p before the tokens' z.
pub fn sweep<R: Rng + ?Sized>(
    state: &mut SamplerState,
    corpus: &[Document],
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
    mode: ConditionalMode,
    rng: &mut R,
) -> Result<()> {
    for (k, doc) in corpus.iter().enumerate() {
        state.remove_doc(k, doc);
        let p = if hp.areas > 1 {
            sample_p_train(state, doc, k, schema, gaussians, hp, mode, rng)?
        } else {
            0
        };
        state.p[k] = p;
        state.add_doc(k, doc);
        if hp.topics > 1 {
            for l in 0..doc.tokens.len() {
                state.remove_token(k, l, doc);
                let j = sample_z(state, doc, k, l, schema, hp, rng);
                state.z[k][l] = j;
                state.add_token(k, l, doc);
            }
        }
    }
    Ok(())
}

/// Burn in, then retain S snapshots taken every `thin` sweeps.
pub fn e_step<R: Rng + ?Sized>(
    state: &mut SamplerState,
    corpus: &[Document],
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
    mode: ConditionalMode,
    rng: &mut R,
) -> Result<Vec<Snapshot>> {
    for _ in 0..hp.burn_in {
        sweep(state, corpus, schema, gaussians, hp, mode, rng)?;
    }
    let mut snapshots = Vec::with_capacity(hp.samples);
    for _ in 0..hp.samples {
        for _ in 0..hp.thin.max(1) {
            sweep(state, corpus, schema, gaussians, hp, mode, rng)?;
        }
        snapshots.push(Snapshot {
            z: state.z.clone(),
            p: state.p.clone(),
        });
    }
    Ok(snapshots)
}

// ---------------------------------------------------------------------------
// Collapsed joint (oracle)
// ---------------------------------------------------------------------------

/// Exact collapsed log-joint of a complete (z, p) assignment: all Dirichlet
/// parameters integrated out, plus the Gaussian coordinate likelihood.
pub fn joint_log_prob(
    z: &[Vec<usize>],
    p: &[usize],
    corpus: &[Document],
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
) -> f64 {
    let l_areas = hp.areas;
    let t = hp.topics;
    let v = schema.vocab_size();
    let cat_sizes = schema.category_sizes_with_region();
    let num_features = schema.num_features();

    let mut area_docs = vec![0u64; l_areas];
    let mut topic_area_word = vec![vec![vec![0u64; v]; l_areas]; t];
    let mut topic_area_total = vec![vec![0u64; l_areas]; t];
    let mut area_feature_cat: Vec<Vec<Vec<u64>>> =
        vec![cat_sizes.iter().map(|&c| vec![0; c]).collect(); l_areas];

    let mut lp = 0.0;

    for (k, doc) in corpus.iter().enumerate() {
        let pk = p[k];
        area_docs[pk] += 1;
        let mut doc_topic = vec![0u64; t];
        for (&w, &j) in doc.tokens.iter().zip(&z[k]) {
            doc_topic[j] += 1;
            topic_area_word[j][pk][w] += 1;
            topic_area_total[j][pk] += 1;
        }
        // theta_k integrated out
        lp +=
            ln_gamma(t as f64 * hp.alpha) - ln_gamma(t as f64 * hp.alpha + doc.tokens.len() as f64);
        for &n in &doc_topic {
            lp += ln_rising_big(hp.alpha, n);
        }
        for (u, &x) in doc.feature_values.iter().enumerate() {
            area_feature_cat[pk][u][x] += 1;
        }
        if let Some(c) = doc.region {
            area_feature_cat[pk][num_features][c] += 1;
        }
        if let Some(y) = doc.coords {
            let mu = gaussians.mu[pk];
            let s2 = gaussians.sigma2[pk];
            let d2 = (y[0] - mu[0]).powi(2) + (y[1] - mu[1]).powi(2);
            lp += -(2.0 * std::f64::consts::PI * s2).ln() - d2 / (2.0 * s2);
        }
    }

    // psi integrated out
    lp += ln_gamma(l_areas as f64 * hp.gamma)
        - ln_gamma(l_areas as f64 * hp.gamma + corpus.len() as f64);
    for &d in &area_docs {
        lp += ln_rising_big(hp.gamma, d);
    }

    // phi_{i,j} integrated out
    let v_beta = v as f64 * hp.beta;
    for j in 0..t {
        for i in 0..l_areas {
            lp += ln_gamma(v_beta) - ln_gamma(v_beta + topic_area_total[j][i] as f64);
            for &n in &topic_area_word[j][i] {
                lp += ln_rising_big(hp.beta, n);
            }
        }
    }

    // f_{u,i} and the region pseudo-feature integrated out
    for area_feats in area_feature_cat.iter().take(l_areas) {
        for (u, &c_u) in cat_sizes.iter().enumerate() {
            let delta = hp.delta_for(u, num_features);
            let total: u64 = area_feats[u].iter().sum();
            lp += ln_gamma(c_u as f64 * delta) - ln_gamma(c_u as f64 * delta + total as f64);
            for &m in &area_feats[u] {
                lp += ln_rising_big(delta, m);
            }
        }
    }

    lp
}

/// Helper for oracles: the log-weight vector over areas for document k
/// computed purely from joint_log_prob ratios.
pub fn p_weights_from_joint(
    state: &SamplerState,
    corpus: &[Document],
    k: usize,
    schema: &CorpusSchema,
    gaussians: &AreaGaussians,
    hp: &Hyperparams,
) -> Vec<f64> {
    let mut p = state.p.clone();
    (0..hp.areas)
        .map(|cand| {
            p[k] = cand;
            joint_log_prob(&state.z, &p, corpus, schema, gaussians, hp)
        })
        .collect()
}

pub fn assert_consistent(state: &SamplerState) -> Result<()> {
    if state
        .area_doc_count
        .iter()
        .map(|&c| c as usize)
        .sum::<usize>()
        != state.p.len()
    {
        return Err(Error::runtime(
            "area_doc_count does not sum to document count",
        ));
    }
    Ok(())
}
