//! Top-k queries against a trained model.
//!
//! A query fixes the user's role from the distance between home and the
//! query location, gathers unvisited items within the radius through a
//! leaf-cell index, scores each with
//! `sum_z alpha[z] * geomean_n(beta[z][w_n]) * gamma[z][v]` and keeps the best
//! `k`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemId, Role, UserId, WordId};
use crate::error::RecommendError;
use crate::geo::{circle_bounds, haversine_km, CellPath, GeoPoint, PyramidConfig};
use crate::model::ModelParams;

pub const DEFAULT_RADIUS_KM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    /// `None` for a user the corpus has never seen.
    pub user: Option<UserId>,
    pub location: GeoPoint,
    pub k: usize,
    pub radius_km: f64,
    /// Deepest pyramid level used for the location term; `None` means the leaf.
    pub zoom_level: Option<u8>,
}

impl Query {
    pub fn new(user: Option<UserId>, location: GeoPoint, k: usize) -> Self {
        Self { user, location, k, radius_km: DEFAULT_RADIUS_KM, zoom_level: None }
    }
}

/// Items by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(ItemId, f64)>,
}

impl RankedList {
    /// Sort `scored` into ranking order and keep the first `k`.
    pub fn top_k(mut scored: Vec<(ItemId, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Self { entries: scored }
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

/// Tourist iff home lies farther than `d_km` from `location`. Without a home
/// the querying user counts as a tourist.
pub fn role_for_query(home: Option<GeoPoint>, location: GeoPoint, d_km: f64) -> Role {
    match home {
        Some(h) => Role::from_distance(h, location, d_km),
        None => Role::Tourist,
    }
}

/// Items bucketed by leaf cell.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    pyramid: PyramidConfig,
    cells: BTreeMap<(u32, u32), Vec<ItemId>>,
    locations: Vec<GeoPoint>,
}

impl SpatialIndex {
    pub fn new(pyramid: PyramidConfig, locations: &[GeoPoint]) -> Self {
        let mut cells: BTreeMap<(u32, u32), Vec<ItemId>> = BTreeMap::new();
        for (i, &loc) in locations.iter().enumerate() {
            // Items outside the box cannot be reached by any in-box query cell.
            if let Ok(c) = pyramid.cell_of(loc, pyramid.height) {
                cells.entry((c.x, c.y)).or_default().push(i as ItemId);
            }
        }
        Self { pyramid, cells, locations: locations.to_vec() }
    }

    /// Every indexed item within `radius_km` (inclusive) of `center`, ascending.
    pub fn within(&self, center: GeoPoint, radius_km: f64) -> Vec<ItemId> {
        let (lo, hi) = circle_bounds(center, radius_km);
        let ((x0, x1), (y0, y1)) = self.pyramid.cell_range(self.pyramid.height, lo, hi);
        let mut out: Vec<ItemId> = self
            .cells
            .range((x0, 0)..=(x1, u32::MAX))
            .filter(|((_, y), _)| (y0..=y1).contains(y))
            .flat_map(|(_, items)| items.iter().copied())
            .filter(|&v| haversine_km(center, self.locations[v as usize]) <= radius_km)
            .collect();
        out.sort_unstable();
        out
    }
}

/// `exp(mean_n ln beta[z][w_n])`; 1 for an empty word list.
pub fn content_factor(log_beta: &[f64], words: &[WordId]) -> f64 {
    if words.is_empty() {
        return 1.0;
    }
    (words.iter().map(|&w| log_beta[w as usize]).sum::<f64>() / words.len() as f64).exp()
}

/// Score of one item given the querying context.
pub fn score_item(
    model: &ModelParams,
    user: Option<UserId>,
    s: Role,
    path: &CellPath,
    item: ItemId,
    words: &[WordId],
    zoom_level: u8,
) -> f64 {
    let alpha = model.alpha(user, s, path, zoom_level);
    (0..model.topics())
        .map(|z| {
            let log_beta: Vec<f64> = model.beta(z).iter().map(|b| b.ln()).collect();
            alpha.0[z] * content_factor(&log_beta, words) * model.gamma(z)[item as usize]
        })
        .sum()
}

/// Breakdown of a single item's score, for `--explain`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub item: ItemId,
    pub role: Role,
    pub alpha: Vec<f64>,
    pub content: Vec<f64>,
    pub gamma: Vec<f64>,
    pub score: f64,
}

/// Query engine holding per-item tables derived from one model.
#[derive(Debug, Clone)]
pub struct Recommender<'a> {
    model: &'a ModelParams,
    corpus: &'a Corpus,
    index: SpatialIndex,
    visited: BTreeMap<UserId, BTreeSet<ItemId>>,
    /// `weights[v][z] = content factor * gamma[z][v]`.
    weights: Vec<Vec<f64>>,
    content: Vec<Vec<f64>>,
}

impl<'a> Recommender<'a> {
    /// `train` lists the corpus activities counted as already visited.
    pub fn new(model: &'a ModelParams, corpus: &'a Corpus, train: &[usize]) -> Result<Self, RecommendError> {
        let corpus_hash = corpus.dicts.fingerprint();
        if corpus_hash != model.dict_hash {
            return Err(RecommendError::DictMismatch { model: model.dict_hash.clone(), corpus: corpus_hash });
        }
        let mut visited: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for &i in train {
            let a = &corpus.activities[i];
            visited.entry(a.user).or_default().insert(a.item);
        }
        let log_beta = model.log_beta_table();
        let gamma: Vec<Vec<f64>> = (0..model.topics()).map(|z| model.gamma(z)).collect();
        let content: Vec<Vec<f64>> = corpus
            .dicts
            .item_words
            .iter()
            .map(|words| log_beta.iter().map(|lb| content_factor(lb, words)).collect())
            .collect();
        let weights = content
            .iter()
            .enumerate()
            .map(|(v, c)| c.iter().zip(&gamma).map(|(cz, g)| cz * g[v]).collect())
            .collect();
        Ok(Self {
            model,
            corpus,
            index: SpatialIndex::new(model.pyramid, &corpus.dicts.item_locations),
            visited,
            weights,
            content,
        })
    }

    pub fn model(&self) -> &ModelParams {
        self.model
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn visited(&self, user: UserId) -> Option<&BTreeSet<ItemId>> {
        self.visited.get(&user)
    }

    pub fn role_of(&self, user: Option<UserId>, location: GeoPoint) -> Role {
        let home = user.and_then(|u| self.corpus.homes.get(u as usize).copied());
        role_for_query(home, location, self.model.config.d_km)
    }

    /// Unvisited items within `radius_km` of `location`.
    pub fn candidates(&self, user: Option<UserId>, location: GeoPoint, radius_km: f64) -> Vec<ItemId> {
        let seen = user.and_then(|u| self.visited.get(&u));
        self.index
            .within(location, radius_km)
            .into_iter()
            .filter(|v| seen.is_none_or(|s| !s.contains(v)))
            .collect()
    }

    fn zoom(&self, zoom_level: Option<u8>) -> Result<u8, RecommendError> {
        let height = self.model.height();
        let zoom = zoom_level.unwrap_or(height);
        if zoom == 0 || zoom > height {
            return Err(RecommendError::BadZoom { zoom, height });
        }
        Ok(zoom)
    }

    /// Scores of `items` for a user in role `s` at `path`.
    pub fn score_items(&self, user: Option<UserId>, s: Role, path: &CellPath, zoom: u8, items: &[ItemId]) -> Vec<f64> {
        let alpha = self.model.alpha(user, s, path, zoom);
        items
            .iter()
            .map(|&v| self.weights[v as usize].iter().zip(&alpha.0).map(|(w, a)| w * a).sum())
            .collect()
    }

    pub fn recommend(&self, q: &Query) -> Result<RankedList, RecommendError> {
        if q.k == 0 || q.radius_km.is_nan() || q.radius_km <= 0.0 {
            return Err(RecommendError::BadQuery);
        }
        let zoom = self.zoom(q.zoom_level)?;
        let path = self.model.pyramid.path_of(q.location)?;
        let s = self.role_of(q.user, q.location);
        let items = self.candidates(q.user, q.location, q.radius_km);
        let scores = self.score_items(q.user, s, &path, zoom, &items);
        Ok(RankedList::top_k(items.into_iter().zip(scores).collect(), q.k))
    }

    pub fn explain(&self, q: &Query, item: ItemId) -> Result<Explanation, RecommendError> {
        let zoom = self.zoom(q.zoom_level)?;
        let path = self.model.pyramid.path_of(q.location)?;
        let role = self.role_of(q.user, q.location);
        let alpha = self.model.alpha(q.user, role, &path, zoom).0;
        let gamma: Vec<f64> = (0..self.model.topics()).map(|z| self.model.gamma(z)[item as usize]).collect();
        let score = self.score_items(q.user, role, &path, zoom, &[item])[0];
        Ok(Explanation { item, role, alpha, content: self.content[item as usize].clone(), gamma, score })
    }
}

/// Free-standing top-k for callers without a `Recommender`.
pub fn recommend(q: &Query, model: &ModelParams, corpus: &Corpus, train: &[usize]) -> Result<RankedList, RecommendError> {
    Recommender::new(model, corpus, train)?.recommend(q)
}
