//! Greedy decoding, beam search and the definition-fused beam search.
//!
//! All three emit one class per level, top level first, restricted by the
//! level mask. The fused search ranks candidates by
//! `Σ log P(y_i | x, y_<i) + λ · Σ cos(CDV(y_i), z)` where `z` is the
//! document's mean word vector.
//!
//! Ties are broken by the class-index path (lexicographically smallest
//! first), so every ranking is fully deterministic.

use std::cmp::Ordering;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cdv::{cd_score_signed, CdSign, CdvStore};
use crate::embeddings::{EmbeddingTable, MeanDenominator, SentenceVector};
use crate::error::{Error, Result};
use crate::neural::{Encoded, ModelParams};
use crate::taxonomy::{ClassId, Direction, Taxonomy};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam,
    AdaptedBeam,
}

/// Whether the similarity term stays in a hypothesis' score after the step
/// that introduced it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdCarry {
    /// Summed over steps, like the log-probabilities.
    #[default]
    Accumulate,
    /// Only the current step's term is added when ranking.
    StepOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub lambda: f64,
    pub cd_sign: CdSign,
    pub cd_carry: CdCarry,
    /// Condition each step on the CDV of the hypothesis' previous class.
    pub pnc_enabled: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: 5,
            lambda: 1.0,
            cd_sign: CdSign::Similarity,
            cd_carry: CdCarry::Accumulate,
            pnc_enabled: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Anything that yields masked log-probabilities one step at a time.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Log-probabilities over the union vocabulary (`-inf` outside `mask`)
    /// and the successor state. `prev` is `None` at the first step.
    fn step(
        &self,
        state: &Self::State,
        prev: Option<usize>,
        cond: Option<&Array1<f64>>,
        mask: &[bool],
    ) -> Result<(Vec<f64>, Self::State)>;
}

/// A model bound to one encoded document.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    encoded: Encoded,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, words: &[Array1<f64>]) -> Result<Self> {
        Ok(Self {
            params,
            encoded: params.encode(words, None)?,
        })
    }

    pub fn from_tokens(params: &'a ModelParams, tokens: &[String], table: &EmbeddingTable) -> Result<Self> {
        Self::new(params, &table.embed(tokens))
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = Array1<f64>;

    fn initial_state(&self) -> Array1<f64> {
        self.encoded.initial_hidden.clone()
    }

    fn step(
        &self,
        state: &Array1<f64>,
        prev: Option<usize>,
        cond: Option<&Array1<f64>>,
        mask: &[bool],
    ) -> Result<(Vec<f64>, Array1<f64>)> {
        let out = self.params.decode_step(&self.encoded, prev, state, mask, cond, None)?;
        Ok((out.log_probs, out.hidden))
    }
}

/// A finished (or partial) label path with its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Global class indices, one per step taken.
    pub path: Vec<usize>,
    pub step_logprobs: Vec<f64>,
    /// `λ · CD` per step; all zeros for unfused searches.
    pub step_cd: Vec<f64>,
    pub cum_logprob: f64,
    /// Ranking score: `cum_logprob` plus the carried similarity terms.
    pub cum_fused_score: f64,
}

impl Hypothesis {
    pub fn classes(&self, taxonomy: &Taxonomy) -> Vec<ClassId> {
        self.path.iter().map(|&g| taxonomy.class_at(g)).collect()
    }
}

#[derive(Clone)]
struct Partial<S> {
    hyp: Hypothesis,
    cd_sum: f64,
    state: S,
}

struct Fusion<'a> {
    doc: &'a SentenceVector,
    lambda: f64,
    sign: CdSign,
    carry: CdCarry,
}

fn conditioning<'c>(
    cfg: &DecodeConfig,
    cdv: Option<&'c CdvStore>,
    prev: Option<usize>,
    zeros: &'c Array1<f64>,
) -> Result<Option<&'c Array1<f64>>> {
    if !cfg.pnc_enabled {
        return Ok(None);
    }
    let store = cdv.ok_or_else(|| Error::Config("parent-node conditioning needs a CDV store".into()))?;
    Ok(Some(match prev {
        Some(p) => store.vector(p),
        None => zeros,
    }))
}

fn zeros_for(cdv: Option<&CdvStore>) -> Array1<f64> {
    Array1::zeros(cdv.map_or(0, CdvStore::dim))
}

/// Picks the highest-probability class at every step; ties go to the
/// lowest class index.
pub fn greedy_decode<S: StepScorer>(
    scorer: &S,
    taxonomy: &Taxonomy,
    cdv: Option<&CdvStore>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let zeros = zeros_for(cdv);
    let mut state = scorer.initial_state();
    let mut hyp = Hypothesis {
        path: Vec::new(),
        step_logprobs: Vec::new(),
        step_cd: Vec::new(),
        cum_logprob: 0.0,
        cum_fused_score: 0.0,
    };
    for step in 0..taxonomy.num_levels() {
        let mask = taxonomy.level_mask(step, Direction::Forward)?;
        let prev = hyp.path.last().copied();
        let cond = conditioning(cfg, cdv, prev, &zeros)?;
        let (log_probs, next) = scorer.step(&state, prev, cond, &mask)?;
        let mut best = None::<(usize, f64)>;
        for g in taxonomy.level_range(step) {
            if best.is_none_or(|(_, lp)| log_probs[g] > lp) {
                best = Some((g, log_probs[g]));
            }
        }
        let (g, lp) = best.expect("levels are non-empty");
        hyp.path.push(g);
        hyp.step_logprobs.push(lp);
        hyp.step_cd.push(0.0);
        hyp.cum_logprob += lp;
        state = next;
    }
    hyp.cum_fused_score = hyp.cum_logprob;
    Ok(hyp)
}

fn rank<S>(a: &Partial<S>, b: &Partial<S>) -> Ordering {
    b.hyp
        .cum_fused_score
        .partial_cmp(&a.hyp.cum_fused_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.hyp.path.cmp(&b.hyp.path))
}

fn search<S: StepScorer>(
    scorer: &S,
    taxonomy: &Taxonomy,
    cdv: Option<&CdvStore>,
    cfg: &DecodeConfig,
    fusion: Option<Fusion<'_>>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if fusion.is_some() && cdv.is_none() {
        return Err(Error::Config("adapted beam search needs a CDV store".into()));
    }
    let zeros = zeros_for(cdv);
    let mut beam = vec![Partial {
        hyp: Hypothesis {
            path: Vec::new(),
            step_logprobs: Vec::new(),
            step_cd: Vec::new(),
            cum_logprob: 0.0,
            cum_fused_score: 0.0,
        },
        cd_sum: 0.0,
        state: scorer.initial_state(),
    }];
    for step in 0..taxonomy.num_levels() {
        let mask = taxonomy.level_mask(step, Direction::Forward)?;
        let mut candidates = Vec::with_capacity(beam.len() * taxonomy.level_size(step));
        for partial in &beam {
            let prev = partial.hyp.path.last().copied();
            let cond = conditioning(cfg, cdv, prev, &zeros)?;
            let (log_probs, next) = scorer.step(&partial.state, prev, cond, &mask)?;
            for g in taxonomy.level_range(step) {
                let lp = log_probs[g];
                let cd = match (&fusion, cdv) {
                    (Some(f), Some(store)) => cd_score_signed(store, g, f.doc, f.lambda, f.sign),
                    _ => 0.0,
                };
                let mut hyp = partial.hyp.clone();
                hyp.path.push(g);
                hyp.step_logprobs.push(lp);
                hyp.step_cd.push(cd);
                hyp.cum_logprob += lp;
                let cd_sum = partial.cd_sum + cd;
                hyp.cum_fused_score = match fusion.as_ref().map(|f| f.carry) {
                    None => hyp.cum_logprob,
                    Some(CdCarry::Accumulate) => hyp.cum_logprob + cd_sum,
                    Some(CdCarry::StepOnly) => hyp.cum_logprob + cd,
                };
                candidates.push(Partial {
                    hyp,
                    cd_sum,
                    state: next.clone(),
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam_size);
        beam = candidates;
    }
    Ok(beam.into_iter().map(|p| p.hyp).collect())
}

/// Standard beam search ranked by cumulative log-probability. Returns up to
/// `beam_size` complete hypotheses, best first.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    taxonomy: &Taxonomy,
    cdv: Option<&CdvStore>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    search(scorer, taxonomy, cdv, cfg, None)
}

/// Beam search whose ranking adds `λ · CD(z, y)` for every candidate.
pub fn adapted_beam_search<S: StepScorer>(
    scorer: &S,
    taxonomy: &Taxonomy,
    cdv: &CdvStore,
    doc: &SentenceVector,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if doc.values.len() != cdv.dim() {
        return Err(Error::Shape(format!(
            "document vector of dimension {} against CDVs of {}",
            doc.values.len(),
            cdv.dim()
        )));
    }
    let fusion = Fusion {
        doc,
        lambda: cfg.lambda,
        sign: cfg.cd_sign,
        carry: cfg.cd_carry,
    };
    search(scorer, taxonomy, Some(cdv), cfg, Some(fusion))
}

/// Shared, read-only inputs for decoding many documents.
#[derive(Clone, Copy)]
pub struct DecodeResources<'a> {
    pub params: &'a ModelParams,
    pub taxonomy: &'a Taxonomy,
    pub table: &'a EmbeddingTable,
    pub cdv: Option<&'a CdvStore>,
    pub mean_denominator: MeanDenominator,
}

/// Decodes one tokenized document with the configured mode, returning the
/// k-best list (a single entry for greedy).
pub fn decode_tokens(res: &DecodeResources<'_>, tokens: &[String], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let scorer = ModelScorer::from_tokens(res.params, tokens, res.table)?;
    match cfg.mode {
        DecodeMode::Greedy => Ok(vec![greedy_decode(&scorer, res.taxonomy, res.cdv, cfg)?]),
        DecodeMode::Beam => beam_search(&scorer, res.taxonomy, res.cdv, cfg),
        DecodeMode::AdaptedBeam => {
            let cdv = res
                .cdv
                .ok_or_else(|| Error::Config("adapted beam search needs a CDV store".into()))?;
            let z = res.table.mean_pool_with(tokens, res.mean_denominator);
            adapted_beam_search(&scorer, res.taxonomy, cdv, &z, cfg)
        }
    }
}

/// One line of prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub path: Vec<String>,
    pub step_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cd: Option<Vec<f64>>,
    pub logprob: f64,
    pub fused_score: f64,
    /// Present when the taxonomy has edges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_valid: Option<bool>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, best: &Hypothesis, taxonomy: &Taxonomy, mode: DecodeMode) -> Self {
        let classes = best.classes(taxonomy);
        Self {
            id: id.into(),
            path: classes.iter().map(|&c| taxonomy.class_name(c).to_owned()).collect(),
            step_logprobs: best.step_logprobs.clone(),
            step_cd: (mode == DecodeMode::AdaptedBeam).then(|| best.step_cd.clone()),
            logprob: best.cum_logprob,
            fused_score: best.cum_fused_score,
            edge_valid: taxonomy
                .has_edges()
                .then(|| taxonomy.edge_violations(&classes).is_empty()),
        }
    }
}
