//! Synthetic corpora drawn from known parameters.
//!
//! `make_params` plants a sparse ground truth: each topic owns a block of
//! words and items, each user leans towards one topic, and every pyramid cell
//! has a preferred topic for locals. Tourist preferences start from the local
//! ones and move away by `drift_strength`.
//!
//! `sample_corpus` fills leaf cells with groups holding one item per topic, gives each item a fixed word set drawn from its dominant topic,
//! and then generates activities.
//! A local activity happens in the user's home cell; a tourist activity in a
//! leaf cell far enough away that every item in it is beyond `d_km`. The topic
//! comes from `alpha` and the item from `gamma`, redrawn until it falls inside
//! the chosen cell.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split, Corpus, CorpusBundle, Dictionaries, Interner, ItemId, Role, UserActivity, UserId, WordId, DEFAULT_D_KM, DEFAULT_SPLIT_FRACTION};
use crate::error::SynthError;
use crate::geo::{haversine_km, BoundingBox, CellId, CellPath, GeoPoint, PyramidConfig};
use crate::inference::sample_index;
use crate::model::{Dims, ModelConfig, ModelParams, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub vocab_size: usize,
    pub topics: usize,
    pub height: u8,
    pub activities_per_user: usize,
    pub tourist_fraction: f64,
    pub drift_strength: f64,
    pub seed: u64,
    pub words_per_item: usize,
    /// Groups of one-item-per-topic placed in each occupied leaf cell.
    pub groups_per_cell: usize,
    pub bbox: BoundingBox,
    pub d_km: f64,
    pub split_fraction: f64,
    pub rejection_cap: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            vocab_size: 100,
            topics: 5,
            height: 3,
            activities_per_user: 40,
            tourist_fraction: 0.3,
            drift_strength: 1.0,
            seed: 0,
            words_per_item: 20,
            groups_per_cell: 4,
            bbox: default_bbox(),
            d_km: DEFAULT_D_KM,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            rejection_cap: 100_000,
        }
    }
}

/// A 4 by 4 degree box; at height 3 its leaf cells are well under 100 km across.
pub fn default_bbox() -> BoundingBox {
    BoundingBox::new(GeoPoint::new(33.0, -120.0).unwrap(), GeoPoint::new(37.0, -116.0).unwrap()).unwrap()
}

// Planted deviation sizes.
const USER_WEIGHT: f64 = 1.5;
const LEAF_WEIGHT: f64 = 2.5;
const COARSE_WEIGHT: f64 = 0.8;
const DRIFT_WEIGHT: f64 = 3.0;
const WORD_WEIGHT: f64 = 2.5;
const ITEM_WEIGHT: f64 = 2.0;

impl SynthSpec {
    pub fn pyramid(&self) -> Result<PyramidConfig, SynthError> {
        Ok(PyramidConfig::new(self.bbox, self.height)?)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.n_users == 0 || self.n_items == 0 || self.vocab_size == 0 || self.topics == 0 {
            return bad("counts must be at least 1");
        }
        if self.activities_per_user == 0 || self.words_per_item == 0 || self.groups_per_cell == 0 {
            return bad("activities_per_user, words_per_item and groups_per_cell must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tourist_fraction) {
            return bad("tourist_fraction must lie in [0, 1]");
        }
        if !(self.drift_strength >= 0.0 && self.drift_strength.is_finite()) {
            return bad("drift_strength must be a non-negative number");
        }
        if !(self.d_km > 0.0) {
            return bad("d_km must be positive");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must lie strictly between 0 and 1");
        }
        let pyramid = self.pyramid()?;
        let side = CellId::side(self.height);
        if (0..side).flat_map(|x| (0..side).map(move |y| (x, y))).any(|(x, y)| leaf_diagonal(&pyramid, CellId::new(self.height, x, y)) >= self.d_km) {
            return bad("leaf cells must be smaller than d_km across; raise height or shrink the box");
        }
        Ok(())
    }
}

fn leaf_diagonal(pyramid: &PyramidConfig, c: CellId) -> f64 {
    haversine_km(pyramid.point_in_cell(c, 0.0, 0.0), pyramid.point_in_cell(c, 1.0, 1.0))
}

/// Planted ground truth. The dictionary hash is left empty until
/// `sample_corpus` builds the dictionaries.
pub fn make_params(spec: &SynthSpec) -> Result<ModelParams, SynthError> {
    spec.validate()?;
    let k = spec.topics;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cfg = ModelConfig { topics: k, height: spec.height, variant: Variant::Full, l1_weight: 0.0, d_km: spec.d_km, seed: spec.seed };
    let dims = Dims { users: spec.n_users, items: spec.n_items, words: spec.vocab_size };
    let mut p = ModelParams::zeros(cfg, dims, spec.pyramid()?, String::new());

    for u in 0..spec.n_users as UserId {
        let mut row = vec![0.0; k];
        row[rng.random_range(0..k)] = USER_WEIGHT;
        p.theta_user.insert(u, row);
    }
    for level in 1..=spec.height {
        let side = CellId::side(level);
        let weight = if level == spec.height { LEAF_WEIGHT } else { COARSE_WEIGHT };
        for x in 0..side {
            for y in 0..side {
                let cell = CellId::new(level, x, y);
                let mut native = vec![0.0; k];
                let favourite = rng.random_range(0..k);
                native[favourite] = weight;
                let mut tourist = native.clone();
                if k > 1 {
                    let other = (favourite + rng.random_range(1..k)) % k;
                    tourist[favourite] -= spec.drift_strength * weight;
                    tourist[other] += spec.drift_strength * DRIFT_WEIGHT * weight / LEAF_WEIGHT;
                }
                p.theta_native.insert(cell, native);
                p.theta_tourist.insert(cell, tourist);
            }
        }
    }
    for z in 0..k {
        for w in (z..spec.vocab_size).step_by(k) {
            p.phi_topic[z][w] = WORD_WEIGHT;
        }
        for v in (z..spec.n_items).step_by(k) {
            p.psi_topic[z][v] = ITEM_WEIGHT;
        }
    }
    if k == 1 {
        // a lone topic has nothing to stand out from
        p.phi_topic[0].iter_mut().for_each(|x| *x = 0.0);
        p.psi_topic[0].iter_mut().for_each(|x| *x = 0.0);
    }
    p.prune_zero_blocks();
    Ok(p)
}

/// A generated corpus plus the parameters it was drawn from.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub bundle: CorpusBundle,
    /// Ground truth, stamped with the corpus dictionary hash.
    pub truth: ModelParams,
}

/// Cumulative distribution for repeated draws by binary search.
struct Cdf(Vec<f64>);

impl Cdf {
    fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        Self(probs.iter().map(|p| {
            acc += p;
            acc
        }).collect())
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let u = rng.random::<f64>() * self.0.last().copied().unwrap_or(0.0);
        self.0.partition_point(|&c| c <= u).min(self.0.len() - 1)
    }
}

/// Topic draw for one activity.
pub fn draw_topic(params: &ModelParams, user: UserId, s: Role, path: &CellPath, rng: &mut impl Rng) -> usize {
    sample_index(&params.alpha(Some(user), s, path, params.height()).0, rng)
}

/// Forward-sample a corpus bundle from `params`.
pub fn sample_corpus(params: &ModelParams, spec: &SynthSpec) -> Result<Synthetic, SynthError> {
    spec.validate()?;
    let pyramid = spec.pyramid()?;
    let k = params.topics();
    // offset keeps this stream independent of the one make_params used
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5EED));
    let leaf = spec.height;

    // Items g*k .. g*k+k-1 form a group with one item per topic. Groups fill
    // leaf cells `groups_per_cell` at a time, so restricting a draw to a cell
    // keeps every topic's share of gamma mass the same.
    let side = CellId::side(leaf);
    let mut cells: Vec<CellId> = (0..side).flat_map(|x| (0..side).map(move |y| CellId::new(leaf, x, y))).collect();
    cells.shuffle(&mut rng);
    let item_cells: Vec<CellId> = (0..spec.n_items).map(|v| cells[(v / k / spec.groups_per_cell) % cells.len()]).collect();
    let item_locations: Vec<GeoPoint> = item_cells
        .iter()
        .map(|&c| pyramid.point_in_cell(c, rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)))
        .collect();
    let word_cdfs: Vec<Cdf> = (0..k).map(|z| Cdf::new(&params.beta(z))).collect();
    let gammas: Vec<Cdf> = (0..k).map(|z| Cdf::new(&params.gamma(z))).collect();
    let item_words: Vec<Vec<WordId>> = (0..spec.n_items)
        .map(|v| {
            let dominant = (0..k).fold(0, |best, z| if params.psi_topic[z][v] > params.psi_topic[best][v] { z } else { best });
            (0..spec.words_per_item).map(|_| word_cdfs[dominant].draw(&mut rng) as WordId).collect()
        })
        .collect();

    let mut occupied: Vec<CellId> = item_cells.clone();
    occupied.sort_unstable();
    occupied.dedup();

    let mut homes = Vec::with_capacity(spec.n_users);
    let mut activities = Vec::with_capacity(spec.n_users * spec.activities_per_user);
    for u in 0..spec.n_users as UserId {
        let home_cell = occupied[rng.random_range(0..occupied.len())];
        let home = pyramid.point_in_cell(home_cell, rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        homes.push(home);
        let far: Vec<CellId> = occupied
            .iter()
            .copied()
            .filter(|&c| haversine_km(home, pyramid.centroid(c)) > spec.d_km + leaf_diagonal(&pyramid, c))
            .collect();
        for _ in 0..spec.activities_per_user {
            let tourist = !far.is_empty() && rng.random_bool(spec.tourist_fraction);
            let (cell, role) = if tourist {
                (far[rng.random_range(0..far.len())], Role::Tourist)
            } else {
                (home_cell, Role::Local)
            };
            let path = pyramid.path_of(pyramid.centroid(cell))?;
            let z = draw_topic(params, u, role, &path, &mut rng);
            let item = draw_item_in_cell(&gammas[z], &item_cells, cell, spec.rejection_cap, &mut rng)
                .ok_or_else(|| SynthError::RejectionCapExceeded { cap: spec.rejection_cap, topic: z, cell: cell.to_string() })?;
            let location = item_locations[item as usize];
            debug_assert_eq!(Role::from_distance(home, location, spec.d_km), role);
            activities.push(UserActivity { user: u, item, location, words: item_words[item as usize].clone(), role });
        }
    }

    let names = |prefix: &str, n: usize| {
        Interner::from_names((0..n).map(|i| format!("{prefix}{i}")).collect()).expect("generated names are distinct")
    };
    let dicts = Dictionaries {
        users: names("u", spec.n_users),
        items: names("v", spec.n_items),
        vocab: names("w", spec.vocab_size),
        item_locations,
        item_words,
    };
    let mut truth = params.clone();
    truth.dict_hash = dicts.fingerprint();
    let corpus = Corpus { pyramid, d_km: spec.d_km, dicts, homes, activities };
    let split = split(&corpus.activities, spec.split_fraction, spec.seed).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(Synthetic { bundle: CorpusBundle { corpus, split }, truth })
}

/// Redraw from `gamma` until the item lies in `cell`.
fn draw_item_in_cell(gamma: &Cdf, item_cells: &[CellId], cell: CellId, cap: usize, rng: &mut impl Rng) -> Option<ItemId> {
    (0..cap).map(|_| gamma.draw(rng)).find(|&v| item_cells[v] == cell).map(|v| v as ItemId)
}

/// `make_params` followed by `sample_corpus`.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic, SynthError> {
    sample_corpus(&make_params(spec)?, spec)
}
