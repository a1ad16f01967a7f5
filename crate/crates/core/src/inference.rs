//! Gibbs-EM training.
//!
//! The E-step redraws every activity's topic from its posterior with the
//! parameters held fixed. The M-step holds the topics fixed and maximizes the
//! complete-data log-likelihood minus an L1 penalty on the deviation blocks
//! (user, cell, topic-word and topic-item), using scaled proximal gradient
//! ascent with backtracking. Each accepted step is checked against the
//! penalized objective, so the M-step never moves downhill.
//!
//! Internally every parameter block is laid out in one flat vector. The
//! layout covers exactly the users and cells the training data touches, plus
//! any blocks the model already holds.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemId, Role, UserId, WordId};
use crate::error::TrainError;
use crate::geo::{CellId, CellPath, PyramidConfig};
use crate::model::{log_frequency_background, log_softmax, log_sum_exp, BlockCounts, Dims, ModelConfig, ModelParams, TopicDistribution, Variant};

/// One training activity with its pyramid path resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainActivity {
    pub user: UserId,
    pub item: ItemId,
    pub words: Vec<WordId>,
    pub role: Role,
    pub path: CellPath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dims: Dims,
    pub pyramid: PyramidConfig,
    pub dict_hash: String,
    pub activities: Vec<TrainActivity>,
}

impl TrainingData {
    /// Select `indices` (usually the training split) from `corpus`.
    pub fn from_corpus(corpus: &Corpus, indices: &[usize]) -> TrainingData {
        let activities = indices
            .iter()
            .map(|&i| {
                let a = &corpus.activities[i];
                TrainActivity {
                    user: a.user,
                    item: a.item,
                    words: a.words.clone(),
                    role: a.role,
                    path: corpus.pyramid.path_of(a.location).expect("corpus locations lie inside the pyramid"),
                }
            })
            .collect();
        TrainingData {
            dims: Dims { users: corpus.dicts.n_users(), items: corpus.dicts.n_items(), words: corpus.dicts.n_words() },
            pyramid: corpus.pyramid,
            dict_hash: corpus.dicts.fingerprint(),
            activities,
        }
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    /// Token count per word.
    pub fn word_counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dims.words];
        for a in &self.activities {
            for &w in &a.words {
                c[w as usize] += 1.0;
            }
        }
        c
    }

    /// Visit count per item.
    pub fn item_counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dims.items];
        for a in &self.activities {
            c[a.item as usize] += 1.0;
        }
        c
    }
}

/// Topic per training activity, indexed like `TrainingData::activities`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicAssignment {
    pub z: Vec<usize>,
}

impl TopicAssignment {
    pub fn random(n: usize, topics: usize, rng: &mut impl Rng) -> Self {
        Self { z: (0..n).map(|_| rng.random_range(0..topics)).collect() }
    }
}

/// Count tables of the current assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub d_z: Vec<f64>,
    pub d_uz: BTreeMap<UserId, Vec<f64>>,
    /// Every cell on a local activity's path counts it, at every level.
    pub d_lz_native: BTreeMap<CellId, Vec<f64>>,
    pub d_lz_tourist: BTreeMap<CellId, Vec<f64>>,
    /// Word tokens per topic (`topics x words`).
    pub d_zw: Vec<Vec<f64>>,
    pub d_w: Vec<f64>,
    pub d_zv: Vec<Vec<f64>>,
    pub d_v: Vec<f64>,
}

impl SufficientStats {
    /// Word tokens assigned to each topic.
    pub fn tokens_per_topic(&self) -> Vec<f64> {
        self.d_zw.iter().map(|row| row.iter().sum()).collect()
    }
}

pub fn collect_stats(assign: &TopicAssignment, data: &TrainingData, topics: usize) -> SufficientStats {
    let Dims { items, words, .. } = data.dims;
    let mut s = SufficientStats {
        d_z: vec![0.0; topics],
        d_uz: BTreeMap::new(),
        d_lz_native: BTreeMap::new(),
        d_lz_tourist: BTreeMap::new(),
        d_zw: vec![vec![0.0; words]; topics],
        d_w: vec![0.0; words],
        d_zv: vec![vec![0.0; items]; topics],
        d_v: vec![0.0; items],
    };
    for (a, &z) in data.activities.iter().zip(&assign.z) {
        s.d_z[z] += 1.0;
        s.d_uz.entry(a.user).or_insert_with(|| vec![0.0; topics])[z] += 1.0;
        let cells = match a.role {
            Role::Local => &mut s.d_lz_native,
            Role::Tourist => &mut s.d_lz_tourist,
        };
        for c in a.path.cells() {
            cells.entry(*c).or_insert_with(|| vec![0.0; topics])[z] += 1.0;
        }
        for &w in &a.words {
            s.d_zw[z][w as usize] += 1.0;
            s.d_w[w as usize] += 1.0;
        }
        s.d_zv[z][a.item as usize] += 1.0;
        s.d_v[a.item as usize] += 1.0;
    }
    s
}

/// Cells whose blocks feed activity `a`'s topic logits under `variant`,
/// tagged with the map they live in.
fn location_cells(variant: Variant, a: &TrainActivity) -> Vec<(Role, CellId)> {
    match variant {
        Variant::S1 => Vec::new(),
        Variant::S2 => a.path.cells().iter().map(|c| (Role::Local, *c)).collect(),
        Variant::Full => a.path.cells().iter().map(|c| (a.role, *c)).collect(),
        Variant::S3 => vec![(a.role, a.path.leaf())],
    }
}

/// Offsets of every block inside the flat parameter vector. Order:
/// theta0 | users | native | tourist | phi0 | phi_topic | psi0 | psi_topic.
#[derive(Debug, Clone)]
struct Layout {
    k: usize,
    words: usize,
    items: usize,
    users: BTreeMap<UserId, usize>,
    native: BTreeMap<CellId, usize>,
    tourist: BTreeMap<CellId, usize>,
    phi0: usize,
    phi_topic: usize,
    psi0: usize,
    psi_topic: usize,
    len: usize,
}

impl Layout {
    fn new(params: &ModelParams, data: &TrainingData) -> Layout {
        let k = params.topics();
        let variant = params.config.variant;
        let mut users: BTreeSet<UserId> = params.theta_user.keys().copied().collect();
        let mut native: BTreeSet<CellId> = BTreeSet::new();
        let mut tourist: BTreeSet<CellId> = BTreeSet::new();
        if variant.uses_location() {
            native.extend(params.theta_native.keys());
            if variant != Variant::S2 {
                tourist.extend(params.theta_tourist.keys());
            }
        }
        for a in &data.activities {
            users.insert(a.user);
            for (role, c) in location_cells(variant, a) {
                match role {
                    Role::Local => native.insert(c),
                    Role::Tourist => tourist.insert(c),
                };
            }
        }
        fn place<K: Ord>(keys: BTreeSet<K>, next: &mut usize, k: usize) -> BTreeMap<K, usize> {
            keys.into_iter()
                .map(|key| {
                    let off = *next;
                    *next += k;
                    (key, off)
                })
                .collect()
        }
        let mut next = k;
        let users = place(users, &mut next, k);
        let native = place(native, &mut next, k);
        let tourist = place(tourist, &mut next, k);
        let (words, items) = (params.dims.words, params.dims.items);
        let phi0 = next;
        let phi_topic = phi0 + words;
        let psi0 = phi_topic + k * words;
        let psi_topic = psi0 + items;
        let len = psi_topic + k * items;
        Layout { k, words, items, users, native, tourist, phi0, phi_topic, psi0, psi_topic, len }
    }

    /// Ranges carrying the L1 penalty.
    fn penalized(&self) -> [Range<usize>; 3] {
        [self.k..self.phi0, self.phi_topic..self.psi0, self.psi_topic..self.len]
    }

    fn cell_offset(&self, role: Role, c: &CellId) -> usize {
        match role {
            Role::Local => self.native[c],
            Role::Tourist => self.tourist[c],
        }
    }

    fn flatten(&self, p: &ModelParams) -> Vec<f64> {
        let k = self.k;
        let mut x = vec![0.0; self.len];
        x[..k].copy_from_slice(&p.theta0);
        fn copy_map<K: Ord>(x: &mut [f64], k: usize, offsets: &BTreeMap<K, usize>, blocks: &BTreeMap<K, Vec<f64>>) {
            for (key, &off) in offsets {
                if let Some(b) = blocks.get(key) {
                    x[off..off + k].copy_from_slice(b);
                }
            }
        }
        copy_map(&mut x, k, &self.users, &p.theta_user);
        copy_map(&mut x, k, &self.native, &p.theta_native);
        copy_map(&mut x, k, &self.tourist, &p.theta_tourist);
        x[self.phi0..self.phi0 + self.words].copy_from_slice(&p.phi0);
        x[self.psi0..self.psi0 + self.items].copy_from_slice(&p.psi0);
        for z in 0..k {
            let (pw, pv) = (self.phi_topic + z * self.words, self.psi_topic + z * self.items);
            x[pw..pw + self.words].copy_from_slice(&p.phi_topic[z]);
            x[pv..pv + self.items].copy_from_slice(&p.psi_topic[z]);
        }
        x
    }

    /// Copy `x` into blocks shaped like the model's.
    fn unflatten(&self, x: &[f64]) -> Blocks {
        let k = self.k;
        fn map<K: Ord + Copy>(x: &[f64], k: usize, offsets: &BTreeMap<K, usize>) -> BTreeMap<K, Vec<f64>> {
            offsets.iter().map(|(key, &off)| (*key, x[off..off + k].to_vec())).collect()
        }
        Blocks {
            theta0: x[..k].to_vec(),
            theta_user: map(x, k, &self.users),
            theta_native: map(x, k, &self.native),
            theta_tourist: map(x, k, &self.tourist),
            phi0: x[self.phi0..self.phi0 + self.words].to_vec(),
            phi_topic: (0..k).map(|z| x[self.phi_topic + z * self.words..][..self.words].to_vec()).collect(),
            psi0: x[self.psi0..self.psi0 + self.items].to_vec(),
            psi_topic: (0..k).map(|z| x[self.psi_topic + z * self.items..][..self.items].to_vec()).collect(),
        }
    }

    fn write_back(&self, x: &[f64], p: &mut ModelParams) {
        let b = self.unflatten(x);
        p.theta0 = b.theta0;
        p.theta_user.extend(b.theta_user);
        p.theta_native.extend(b.theta_native);
        p.theta_tourist.extend(b.theta_tourist);
        p.phi0 = b.phi0;
        p.phi_topic = b.phi_topic;
        p.psi0 = b.psi0;
        p.psi_topic = b.psi_topic;
        p.prune_zero_blocks();
    }
}

/// Parameter-shaped container, used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub theta0: Vec<f64>,
    pub theta_user: BTreeMap<UserId, Vec<f64>>,
    pub theta_native: BTreeMap<CellId, Vec<f64>>,
    pub theta_tourist: BTreeMap<CellId, Vec<f64>>,
    pub phi0: Vec<f64>,
    pub phi_topic: Vec<Vec<f64>>,
    pub psi0: Vec<f64>,
    pub psi_topic: Vec<Vec<f64>>,
}

pub type Gradients = Blocks;

#[derive(Debug, Clone)]
struct CompiledActivity {
    user: usize,
    locs: Vec<usize>,
    z: usize,
}

/// The M-step objective for a fixed assignment, over the flat vector.
struct Problem {
    layout: Layout,
    acts: Vec<CompiledActivity>,
    d_zw: Vec<Vec<f64>>,
    tokens_z: Vec<f64>,
    d_zv: Vec<Vec<f64>>,
    d_z: Vec<f64>,
    l1: f64,
}

impl Problem {
    fn new(params: &ModelParams, data: &TrainingData, assign: &TopicAssignment) -> Problem {
        let layout = Layout::new(params, data);
        let variant = params.config.variant;
        let acts = data
            .activities
            .iter()
            .zip(&assign.z)
            .map(|(a, &z)| CompiledActivity {
                user: layout.users[&a.user],
                locs: location_cells(variant, a).iter().map(|(r, c)| layout.cell_offset(*r, c)).collect(),
                z,
            })
            .collect();
        let stats = collect_stats(assign, data, params.topics());
        Problem {
            layout,
            acts,
            tokens_z: stats.tokens_per_topic(),
            d_zw: stats.d_zw,
            d_zv: stats.d_zv,
            d_z: stats.d_z,
            l1: params.config.l1_weight,
        }
    }

    fn eta(&self, x: &[f64], a: &CompiledActivity, buf: &mut [f64]) {
        let k = self.layout.k;
        buf.copy_from_slice(&x[..k]);
        for off in std::iter::once(a.user).chain(a.locs.iter().copied()) {
            buf.iter_mut().zip(&x[off..off + k]).for_each(|(e, v)| *e += v);
        }
    }

    fn log_rows(x: &[f64], base: usize, dev: usize, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|z| {
                let logits: Vec<f64> = (0..cols).map(|j| x[base + j] + x[dev + z * cols + j]).collect();
                log_softmax(&logits)
            })
            .collect()
    }

    /// Complete-data log-likelihood.
    fn log_likelihood(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let mut buf = vec![0.0; l.k];
        let mut total = 0.0;
        for a in &self.acts {
            self.eta(x, a, &mut buf);
            total += buf[a.z] - log_sum_exp(&buf);
        }
        let log_beta = Self::log_rows(x, l.phi0, l.phi_topic, l.k, l.words);
        let log_gamma = Self::log_rows(x, l.psi0, l.psi_topic, l.k, l.items);
        for z in 0..l.k {
            total += dot_counts(&self.d_zw[z], &log_beta[z]);
            total += dot_counts(&self.d_zv[z], &log_gamma[z]);
        }
        total
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let k = l.k;
        let mut g = vec![0.0; l.len];
        let mut buf = vec![0.0; k];
        for a in &self.acts {
            self.eta(x, a, &mut buf);
            let lse = log_sum_exp(&buf);
            // residual: indicator(z) - alpha
            buf.iter_mut().for_each(|e| *e = -(*e - lse).exp());
            buf[a.z] += 1.0;
            for off in [0, a.user].into_iter().chain(a.locs.iter().copied()) {
                g[off..off + k].iter_mut().zip(&buf).for_each(|(gi, r)| *gi += r);
            }
        }
        let mut fill = |base: usize, dev: usize, cols: usize, counts: &[Vec<f64>], totals: &[f64]| {
            for (z, log_p) in Self::log_rows(x, base, dev, k, cols).iter().enumerate() {
                for j in 0..cols {
                    let r = counts[z][j] - totals[z] * log_p[j].exp();
                    g[dev + z * cols + j] = r;
                    g[base + j] += r;
                }
            }
        };
        fill(l.phi0, l.phi_topic, l.words, &self.d_zw, &self.tokens_z);
        fill(l.psi0, l.psi_topic, l.items, &self.d_zv, &self.d_z);
        g
    }

    fn penalty(&self, x: &[f64]) -> f64 {
        self.l1 * self.layout.penalized().iter().map(|r| x[r.clone()].iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
    }

    fn penalized_objective(&self, x: &[f64]) -> f64 {
        self.log_likelihood(x) - self.penalty(x)
    }

    /// Per-coordinate step scale: the inverse of how many observations touch
    /// the coordinate's block.
    fn scales(&self, freeze_backgrounds: bool) -> Vec<f64> {
        let l = &self.layout;
        let k = l.k;
        let mut touches = vec![0.0; l.len];
        for a in &self.acts {
            for off in [0, a.user].into_iter().chain(a.locs.iter().copied()) {
                touches[off..off + k].iter_mut().for_each(|t| *t += 1.0);
            }
        }
        let tokens: f64 = self.tokens_z.iter().sum();
        touches[l.phi0..l.phi_topic].iter_mut().for_each(|t| *t = tokens);
        touches[l.psi0..l.psi_topic].iter_mut().for_each(|t| *t = self.acts.len() as f64);
        for z in 0..k {
            touches[l.phi_topic + z * l.words..][..l.words].iter_mut().for_each(|t| *t = self.tokens_z[z]);
            touches[l.psi_topic + z * l.items..][..l.items].iter_mut().for_each(|t| *t = self.d_z[z]);
        }
        let mut scale: Vec<f64> = touches.into_iter().map(|t| 1.0 / t.max(1.0)).collect();
        if freeze_backgrounds {
            for r in [0..k, l.phi0..l.phi_topic, l.psi0..l.psi_topic] {
                scale[r].iter_mut().for_each(|s| *s = 0.0);
            }
        }
        scale
    }

    fn penalized_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.layout.len];
        for r in self.layout.penalized() {
            mask[r].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

fn dot_counts(counts: &[f64], logs: &[f64]) -> f64 {
    counts.iter().zip(logs).filter(|(c, _)| **c != 0.0).map(|(c, l)| c * l).sum()
}

/// Complete-data log-likelihood minus the L1 penalty on deviation blocks.
pub fn penalized_objective(params: &ModelParams, data: &TrainingData, assign: &TopicAssignment) -> f64 {
    let p = Problem::new(params, data, assign);
    p.penalized_objective(&p.layout.flatten(params))
}

/// Complete-data log-likelihood without the penalty.
pub fn log_likelihood(params: &ModelParams, data: &TrainingData, assign: &TopicAssignment) -> f64 {
    let p = Problem::new(params, data, assign);
    p.log_likelihood(&p.layout.flatten(params))
}

/// Gradient of the unpenalized log-likelihood for every block the data
/// touches. Cell gradients only accumulate activities whose role selects that
/// map (per-activity masking); the L1 term is left to the optimizer.
pub fn gradients(params: &ModelParams, data: &TrainingData, assign: &TopicAssignment) -> Gradients {
    let p = Problem::new(params, data, assign);
    p.layout.unflatten(&p.gradient(&p.layout.flatten(params)))
}

/// Posterior over the topic of one activity:
/// `alpha[z] * prod_n beta[z][w_n] * gamma[z][v]`, normalized.
pub fn topic_posterior(activity: &TrainActivity, params: &ModelParams) -> TopicDistribution {
    PosteriorTables::new(params).posterior(activity, params)
}

/// Cached `ln beta` / `ln gamma` for a frozen parameter set.
struct PosteriorTables {
    log_beta: Vec<Vec<f64>>,
    log_gamma: Vec<Vec<f64>>,
}

impl PosteriorTables {
    fn new(params: &ModelParams) -> Self {
        Self { log_beta: params.log_beta_table(), log_gamma: params.log_gamma_table() }
    }

    fn log_weights(&self, a: &TrainActivity, params: &ModelParams) -> Vec<f64> {
        let eta = params.topic_logits(Some(a.user), a.role, &a.path, params.height());
        let log_alpha = log_softmax(&eta);
        (0..params.topics())
            .map(|z| {
                let words: f64 = a.words.iter().map(|&w| self.log_beta[z][w as usize]).sum();
                log_alpha[z] + words + self.log_gamma[z][a.item as usize]
            })
            .collect()
    }

    fn posterior(&self, a: &TrainActivity, params: &ModelParams) -> TopicDistribution {
        TopicDistribution(crate::model::softmax(&self.log_weights(a, params)))
    }
}

/// Draw an index from a normalized distribution.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Redraw every topic, in activity order, with `params` frozen.
pub fn gibbs_sweep(assign: &mut TopicAssignment, data: &TrainingData, params: &ModelParams, rng: &mut impl Rng) {
    let tables = PosteriorTables::new(params);
    for (a, z) in data.activities.iter().zip(assign.z.iter_mut()) {
        *z = sample_index(&tables.posterior(a, params).0, rng);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub em_iters: usize,
    pub gibbs_sweeps_per_e: usize,
    pub mstep_iters: usize,
    /// Relative change of the moving-average objective that counts as converged.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Keep theta0, phi0 and psi0 at their initial values.
    pub freeze_backgrounds: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            em_iters: 200,
            gibbs_sweeps_per_e: 1,
            mstep_iters: 20,
            convergence_tol: 1e-4,
            convergence_window: 5,
            freeze_backgrounds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepReport {
    /// Penalized objective before the first and after every accepted step.
    pub objectives: Vec<f64>,
    pub accepted_steps: usize,
}

impl MStepReport {
    pub fn before(&self) -> f64 {
        self.objectives[0]
    }

    pub fn after(&self) -> f64 {
        *self.objectives.last().expect("at least the starting objective")
    }
}

const MAX_BACKTRACKS: usize = 50;
const MAX_STEP: f64 = 64.0;

/// Scaled proximal-gradient ascent on the penalized objective.
///
/// A candidate step is accepted only if it satisfies the quadratic
/// sufficient-increase condition and does not lower the penalized objective.
/// Coordinates of penalized blocks go through soft-thresholding, so a block
/// at zero stays at zero whenever its gradient is within the L1 weight.
pub fn m_step(
    params: &mut ModelParams,
    data: &TrainingData,
    assign: &TopicAssignment,
    opts: &TrainOptions,
) -> Result<MStepReport, TrainError> {
    let problem = Problem::new(params, data, assign);
    let scale = problem.scales(opts.freeze_backgrounds);
    let penalized = problem.penalized_mask();
    let l1 = problem.l1;
    let mut x = problem.layout.flatten(params);
    let mut objective = problem.penalized_objective(&x);
    if !objective.is_finite() {
        return Err(TrainError::NonFiniteObjective(objective));
    }
    let mut report = MStepReport { objectives: vec![objective], accepted_steps: 0 };
    let mut step = 1.0;
    let mut y = vec![0.0; x.len()];
    for _ in 0..opts.mstep_iters {
        let loglik = problem.log_likelihood(&x);
        let g = problem.gradient(&x);
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut lin = 0.0;
            let mut quad = 0.0;
            let mut moved = false;
            for i in 0..x.len() {
                let s = step * scale[i];
                let mut v = x[i] + s * g[i];
                if penalized[i] {
                    let thr = s * l1;
                    v = v.signum() * (v.abs() - thr).max(0.0);
                }
                y[i] = v;
                let d = v - x[i];
                if d != 0.0 {
                    moved = true;
                    lin += g[i] * d;
                    quad += d * d / s;
                }
            }
            if !moved {
                break;
            }
            let loglik_y = problem.log_likelihood(&y);
            let objective_y = loglik_y - problem.penalty(&y);
            let sufficient = loglik_y >= loglik + lin - 0.5 * quad;
            if objective_y.is_finite() && sufficient && objective_y >= objective {
                accepted = true;
                std::mem::swap(&mut x, &mut y);
                objective = objective_y;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        report.objectives.push(objective);
        report.accepted_steps += 1;
        step = (step * 2.0).min(MAX_STEP);
    }
    problem.layout.write_back(&x, params);
    Ok(report)
}

/// Fresh parameters for `data`: zero deviations, log-frequency backgrounds.
pub fn initial_params(data: &TrainingData, cfg: ModelConfig) -> ModelParams {
    let mut p = ModelParams::zeros(cfg, data.dims, data.pyramid, data.dict_hash.clone());
    p.phi0 = log_frequency_background(&data.word_counts());
    p.psi0 = log_frequency_background(&data.item_counts());
    p
}

/// One line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub nonzeros: BlockCounts,
    pub mstep_objectives: Vec<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub trace: Vec<TraceRecord>,
    pub assignment: TopicAssignment,
    pub converged: bool,
}

/// Alternate Gibbs sweeps and M-steps until the moving-average objective
/// settles or `em_iters` runs out. Deterministic for a given `cfg.seed`.
pub fn train(data: &TrainingData, cfg: ModelConfig, opts: &TrainOptions) -> Result<Trained, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if cfg.height != data.pyramid.height {
        return Err(TrainError::HeightMismatch { model: cfg.height, corpus: data.pyramid.height });
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initial_params(data, cfg);
    let mut assign = TopicAssignment::random(data.len(), cfg.topics, &mut rng);
    let mut trace = Vec::new();
    let mut averages: Vec<f64> = Vec::new();
    let window = opts.convergence_window.max(1);
    let mut converged = false;
    for iteration in 0..opts.em_iters {
        // The first E-step keeps the random start: with all deviations at
        // zero the posterior is the same for every topic anyway.
        if iteration > 0 {
            for _ in 0..opts.gibbs_sweeps_per_e {
                gibbs_sweep(&mut assign, data, &params, &mut rng);
            }
        }
        let report = m_step(&mut params, data, &assign, opts)?;
        trace.push(TraceRecord {
            iteration,
            objective: report.after(),
            nonzeros: params.nonzero_counts(),
            mstep_objectives: report.objectives,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if trace.len() >= window {
            let recent = &trace[trace.len() - window..];
            averages.push(recent.iter().map(|t| t.objective).sum::<f64>() / window as f64);
        }
        if let [.., prev, last] = averages[..] {
            if ((last - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < opts.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(Trained { params, trace, assignment: assign, converged })
}
