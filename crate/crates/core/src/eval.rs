//! Offline evaluation.
//!
//! Each held-out activity `(u, v)` becomes a test case. Its candidates are the
//! truth item plus every item within the radius of the truth location that
//! `u` did not visit in training. The truth's rank is one plus the number of
//! candidates scoring strictly higher, and Recall@k is the fraction of cases
//! ranked within `k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemId, Role, SplitDataset, UserId};
use crate::error::{EvalError, RecommendError};
use crate::geo::{CellPath, GeoPoint};
use crate::model::ModelParams;
use crate::recsys::{Recommender, SpatialIndex, DEFAULT_RADIUS_KM};

pub const DEFAULT_KS: [usize; 5] = [2, 6, 10, 14, 18];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Home,
    Out,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Home => "home",
            Scenario::Out => "out",
        })
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "home" => Ok(Scenario::Home),
            "out" => Ok(Scenario::Out),
            other => Err(format!("unknown scenario `{other}` (expected home or out)")),
        }
    }
}

/// One held-out activity.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    /// Index into the corpus activity list.
    pub index: usize,
    pub user: UserId,
    pub item: ItemId,
    pub location: GeoPoint,
    pub role: Role,
    pub path: CellPath,
}

/// Anything that can score the candidates of a test case.
pub trait CaseScorer {
    fn name(&self) -> &str;
    fn score(&self, case: &TestCase, candidates: &[ItemId]) -> Vec<f64>;
}

/// The trained model, queried with the case's own role and location path.
pub struct ModelScorer<'a> {
    name: String,
    rec: Recommender<'a>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelParams, corpus: &'a Corpus) -> Result<Self, RecommendError> {
        Ok(Self { name: model.config.variant.to_string(), rec: Recommender::new(model, corpus, &[])? })
    }
}

impl CaseScorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, case: &TestCase, candidates: &[ItemId]) -> Vec<f64> {
        let zoom = self.rec.model().height();
        self.rec.score_items(Some(case.user), case.role, &case.path, zoom, candidates)
    }
}

/// Uniform random scores, reproducible per (seed, case).
pub struct RandomScorer {
    pub seed: u64,
}

impl CaseScorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, case: &TestCase, candidates: &[ItemId]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (case.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        candidates.iter().map(|_| rng.random()).collect()
    }
}

/// Training visit count of each item.
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(corpus: &Corpus, split: &SplitDataset) -> Self {
        let mut counts = vec![0.0; corpus.dicts.n_items()];
        for &i in &split.train {
            counts[corpus.activities[i].item as usize] += 1.0;
        }
        Self { counts }
    }
}

impl CaseScorer for PopularityScorer {
    fn name(&self) -> &str {
        "popularity"
    }

    fn score(&self, _case: &TestCase, candidates: &[ItemId]) -> Vec<f64> {
        candidates.iter().map(|&v| self.counts[v as usize]).collect()
    }
}

/// `1 + #{candidates scoring strictly above the truth}`.
pub fn rank_of_truth(truth: ItemId, candidates: &[ItemId], scores: &[f64]) -> usize {
    let pos = candidates.iter().position(|&v| v == truth).expect("truth item is among the candidates");
    let s = scores[pos];
    1 + scores.iter().filter(|&&x| x > s).count()
}

/// Fraction of ranks within each `k`.
pub fn recall_at_k(ranks: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    Ok(ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub scenario: Scenario,
    /// Cold-start bound on training activities per user, if any.
    pub slice: Option<usize>,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_case_ranks: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    method: &'a str,
    scenario: Scenario,
    slice: Option<usize>,
    k: usize,
    recall: f64,
    n_cases: usize,
}

impl EvalReport {
    /// One JSON object per k.
    pub fn to_json_lines(&self) -> String {
        self.recall_at
            .iter()
            .map(|(&k, &recall)| {
                let line = ReportLine {
                    method: &self.method,
                    scenario: self.scenario,
                    slice: self.slice,
                    k,
                    recall,
                    n_cases: self.n_cases,
                };
                serde_json::to_string(&line).expect("report lines serialize") + "\n"
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub radius_km: f64,
    /// Keep only users with at most this many training activities.
    pub cold_start_max: Option<usize>,
    pub keep_ranks: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), radius_km: DEFAULT_RADIUS_KM, cold_start_max: None, keep_ranks: false }
    }
}

/// Model-independent state shared by every scorer evaluated on one split.
pub struct EvalContext<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a SplitDataset,
    index: SpatialIndex,
    visited: BTreeMap<UserId, BTreeSet<ItemId>>,
    train_counts: Vec<usize>,
}

impl<'a> EvalContext<'a> {
    pub fn new(corpus: &'a Corpus, split: &'a SplitDataset) -> Self {
        let mut visited: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        let mut train_counts = vec![0; corpus.dicts.n_users()];
        for &i in &split.train {
            let a = &corpus.activities[i];
            visited.entry(a.user).or_default().insert(a.item);
            train_counts[a.user as usize] += 1;
        }
        Self { corpus, split, index: SpatialIndex::new(corpus.pyramid, &corpus.dicts.item_locations), visited, train_counts }
    }

    /// Test cases of a scenario, optionally restricted to sparse users.
    pub fn cases(&self, scenario: Scenario, cold_start_max: Option<usize>) -> Vec<TestCase> {
        let idx = match scenario {
            Scenario::Home => &self.split.test_home,
            Scenario::Out => &self.split.test_out,
        };
        idx.iter()
            .filter(|&&i| cold_start_max.is_none_or(|m| self.train_counts[self.corpus.activities[i].user as usize] <= m))
            .map(|&i| {
                let a = &self.corpus.activities[i];
                TestCase {
                    index: i,
                    user: a.user,
                    item: a.item,
                    location: a.location,
                    role: a.role,
                    path: self.corpus.pyramid.path_of(a.location).expect("corpus locations lie inside the pyramid"),
                }
            })
            .collect()
    }

    /// Truth item plus unvisited items near the truth location, ascending.
    pub fn candidates(&self, case: &TestCase, radius_km: f64) -> Vec<ItemId> {
        let seen = self.visited.get(&case.user);
        let mut out: Vec<ItemId> = self
            .index
            .within(case.location, radius_km)
            .into_iter()
            .filter(|v| *v != case.item && seen.is_none_or(|s| !s.contains(v)))
            .collect();
        let at = out.partition_point(|&v| v < case.item);
        out.insert(at, case.item);
        out
    }

    pub fn rank(&self, scorer: &dyn CaseScorer, case: &TestCase, radius_km: f64) -> usize {
        let candidates = self.candidates(case, radius_km);
        let scores = scorer.score(case, &candidates);
        rank_of_truth(case.item, &candidates, &scores)
    }

    pub fn evaluate(&self, scorer: &dyn CaseScorer, scenario: Scenario, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
        let ranks: Vec<usize> =
            self.cases(scenario, opts.cold_start_max).iter().map(|c| self.rank(scorer, c, opts.radius_km)).collect();
        Ok(EvalReport {
            method: scorer.name().to_string(),
            scenario,
            slice: opts.cold_start_max,
            recall_at: recall_at_k(&ranks, &opts.ks)?,
            n_cases: ranks.len(),
            per_case_ranks: opts.keep_ranks.then_some(ranks),
        })
    }
}

/// Evaluate a trained model on one scenario.
pub fn evaluate(
    model: &ModelParams,
    corpus: &Corpus,
    split: &SplitDataset,
    scenario: Scenario,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let scorer = ModelScorer::new(model, corpus)?;
    EvalContext::new(corpus, split).evaluate(&scorer, scenario, opts)
}
