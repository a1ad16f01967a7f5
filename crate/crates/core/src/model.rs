//! Natural parameters and the three softmax distributions built from them.
//!
//! Every distribution is a softmax over a sum of additive blocks:
//!
//! * topics: `theta0 + theta_user[u] + (1 - s) * native(path) + s * tourist(path)`
//! * words of topic `z`: `phi0 + phi_topic[z]`
//! * items of topic `z`: `psi0 + psi_topic[z]`
//!
//! `native(path)` and `tourist(path)` sum the per-cell blocks along the
//! pyramid path. Cell and user blocks live in sparse maps where a missing
//! entry means an all-zero block.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Role, UserId};
use crate::error::ModelError;
use crate::geo::{CellId, CellPath, PyramidConfig};

pub const MODEL_MAGIC: &str = "GEOSAGE-MODEL-1";

/// Which topic-mixing structure a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Role-specific native and tourist preferences smoothed over the pyramid.
    Full,
    /// User interest and background only.
    S1,
    /// One role-agnostic crowd preference per cell, stored in `theta_native`.
    S2,
    /// Role-specific preferences of the lowest cell only, no pyramid smoothing.
    S3,
}

impl Variant {
    pub fn uses_location(self) -> bool {
        self != Variant::S1
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            "s3" => Ok(Variant::S3),
            other => Err(format!("unknown variant {other:?} (expected full, s1, s2 or s3)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::S1 => "s1",
            Variant::S2 => "s2",
            Variant::S3 => "s3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreferenceKind {
    Native,
    Tourist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topics: usize,
    pub height: u8,
    pub variant: Variant,
    pub l1_weight: f64,
    pub d_km: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.topics == 0 {
            return Err(ModelError::InvalidConfig("topic count must be at least 1".into()));
        }
        if self.height == 0 {
            return Err(ModelError::InvalidConfig("pyramid height must be at least 1".into()));
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(ModelError::InvalidConfig("l1 weight must be finite and non-negative".into()));
        }
        if !(self.d_km > 0.0) {
            return Err(ModelError::InvalidConfig("d_km must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub users: usize,
    pub items: usize,
    pub words: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub dims: Dims,
    pub pyramid: PyramidConfig,
    /// Fingerprint of the dictionaries the model was trained against.
    pub dict_hash: String,
    pub theta0: Vec<f64>,
    pub theta_user: BTreeMap<UserId, Vec<f64>>,
    pub theta_native: BTreeMap<CellId, Vec<f64>>,
    pub theta_tourist: BTreeMap<CellId, Vec<f64>>,
    pub phi0: Vec<f64>,
    /// `topics x words`
    pub phi_topic: Vec<Vec<f64>>,
    pub psi0: Vec<f64>,
    /// `topics x items`
    pub psi_topic: Vec<Vec<f64>>,
}

/// A distribution over topics.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDistribution(pub Vec<f64>);

impl TopicDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// `log(softmax(x))`, computed with the maximum subtracted first.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| v - lse).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn add_assign(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Log-frequency background: `ln(count + 1)` shifted to zero mean.
pub fn log_frequency_background(counts: &[f64]) -> Vec<f64> {
    if counts.is_empty() {
        return Vec::new();
    }
    let logs: Vec<f64> = counts.iter().map(|c| (c + 1.0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.into_iter().map(|l| l - mean).collect()
}

impl ModelParams {
    /// All blocks zero; user and cell maps empty.
    pub fn zeros(config: ModelConfig, dims: Dims, pyramid: PyramidConfig, dict_hash: String) -> Self {
        let k = config.topics;
        Self {
            config,
            dims,
            pyramid,
            dict_hash,
            theta0: vec![0.0; k],
            theta_user: BTreeMap::new(),
            theta_native: BTreeMap::new(),
            theta_tourist: BTreeMap::new(),
            phi0: vec![0.0; dims.words],
            phi_topic: vec![vec![0.0; dims.words]; k],
            psi0: vec![0.0; dims.items],
            psi_topic: vec![vec![0.0; dims.items]; k],
        }
    }

    pub fn topics(&self) -> usize {
        self.config.topics
    }

    pub fn height(&self) -> u8 {
        self.config.height
    }

    fn cells(&self, kind: PreferenceKind) -> &BTreeMap<CellId, Vec<f64>> {
        match kind {
            PreferenceKind::Native => &self.theta_native,
            PreferenceKind::Tourist => &self.theta_tourist,
        }
    }

    /// Sum of the `kind` cell blocks on `path` for levels `1..=upto_level`.
    pub fn smooth_preference(&self, kind: PreferenceKind, path: &CellPath, upto_level: u8) -> Vec<f64> {
        let mut acc = vec![0.0; self.topics()];
        let cells = self.cells(kind);
        for c in &path.cells()[..upto_level as usize] {
            if let Some(block) = cells.get(c) {
                add_assign(&mut acc, block);
            }
        }
        acc
    }

    /// Location contribution to the topic logits for role `s` on `path`.
    fn location_term(&self, s: Role, path: &CellPath, upto_level: u8) -> Option<Vec<f64>> {
        let kind = match (self.config.variant, s) {
            (Variant::S1, _) => return None,
            (Variant::S2, _) | (_, Role::Local) => PreferenceKind::Native,
            (_, Role::Tourist) => PreferenceKind::Tourist,
        };
        if self.config.variant == Variant::S3 {
            return self.cells(kind).get(&path.at(upto_level)).cloned();
        }
        Some(self.smooth_preference(kind, path, upto_level))
    }

    /// Topic logits. `user = None` is a cold user with a zero interest block.
    pub fn topic_logits(&self, user: Option<UserId>, s: Role, path: &CellPath, upto_level: u8) -> Vec<f64> {
        let mut eta = self.theta0.clone();
        if let Some(block) = user.and_then(|u| self.theta_user.get(&u)) {
            add_assign(&mut eta, block);
        }
        if let Some(loc) = self.location_term(s, path, upto_level) {
            add_assign(&mut eta, &loc);
        }
        eta
    }

    /// Topic distribution for a user with role `s` at the location given by
    /// `path`, smoothing over levels `1..=upto_level`.
    pub fn alpha(&self, user: Option<UserId>, s: Role, path: &CellPath, upto_level: u8) -> TopicDistribution {
        TopicDistribution(softmax(&self.topic_logits(user, s, path, upto_level)))
    }

    fn row_logits(base: &[f64], dev: &[f64]) -> Vec<f64> {
        base.iter().zip(dev).map(|(a, b)| a + b).collect()
    }

    /// Word distribution of topic `z`.
    pub fn beta(&self, z: usize) -> Vec<f64> {
        softmax(&Self::row_logits(&self.phi0, &self.phi_topic[z]))
    }

    /// Item distribution of topic `z`.
    pub fn gamma(&self, z: usize) -> Vec<f64> {
        softmax(&Self::row_logits(&self.psi0, &self.psi_topic[z]))
    }

    /// `ln beta` for every topic, `topics x words`.
    pub fn log_beta_table(&self) -> Vec<Vec<f64>> {
        self.phi_topic.iter().map(|row| log_softmax(&Self::row_logits(&self.phi0, row))).collect()
    }

    /// `ln gamma` for every topic, `topics x items`.
    pub fn log_gamma_table(&self) -> Vec<Vec<f64>> {
        self.psi_topic.iter().map(|row| log_softmax(&Self::row_logits(&self.psi0, row))).collect()
    }

    /// Drop user and cell blocks whose entries are all exactly zero.
    pub fn prune_zero_blocks(&mut self) {
        let nonzero = |v: &Vec<f64>| v.iter().any(|x| *x != 0.0);
        self.theta_user.retain(|_, v| nonzero(v));
        self.theta_native.retain(|_, v| nonzero(v));
        self.theta_tourist.retain(|_, v| nonzero(v));
    }

    /// Count of nonzero entries per block, in the order
    /// theta0, user, native, tourist, phi0, phi_topic, psi0, psi_topic.
    pub fn nonzero_counts(&self) -> BlockCounts {
        let nz = |v: &[f64]| v.iter().filter(|x| **x != 0.0).count();
        fn nz_map<K>(m: &BTreeMap<K, Vec<f64>>) -> usize {
            m.values().map(|v| v.iter().filter(|x| **x != 0.0).count()).sum()
        }
        let nz_rows = |m: &[Vec<f64>]| m.iter().map(|v| nz(v)).sum();
        BlockCounts {
            theta0: nz(&self.theta0),
            theta_user: nz_map(&self.theta_user),
            theta_native: nz_map(&self.theta_native),
            theta_tourist: nz_map(&self.theta_tourist),
            phi0: nz(&self.phi0),
            phi_topic: nz_rows(&self.phi_topic),
            psi0: nz(&self.psi0),
            psi_topic: nz_rows(&self.psi_topic),
        }
    }

    /// Check shapes, finiteness and key ranges.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::CorruptModel(m));
        self.config.validate()?;
        if self.config.height != self.pyramid.height {
            return bad("config height differs from pyramid height".into());
        }
        let k = self.topics();
        let Dims { users, items, words } = self.dims;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let check = |name: &str, v: &[f64], len: usize| -> Result<(), ModelError> {
            if v.len() != len {
                return Err(ModelError::CorruptModel(format!("{name}: expected length {len}, found {}", v.len())));
            }
            if !finite(v) {
                return Err(ModelError::CorruptModel(format!("{name}: non-finite entry")));
            }
            Ok(())
        };
        check("theta0", &self.theta0, k)?;
        check("phi0", &self.phi0, words)?;
        check("psi0", &self.psi0, items)?;
        if self.phi_topic.len() != k || self.psi_topic.len() != k {
            return bad("topic matrices must have one row per topic".into());
        }
        for (z, row) in self.phi_topic.iter().enumerate() {
            check(&format!("phi_topic[{z}]"), row, words)?;
        }
        for (z, row) in self.psi_topic.iter().enumerate() {
            check(&format!("psi_topic[{z}]"), row, items)?;
        }
        for (u, v) in &self.theta_user {
            if *u as usize >= users {
                return bad(format!("theta_user key {u} out of range"));
            }
            check("theta_user", v, k)?;
        }
        for (name, map) in [("theta_native", &self.theta_native), ("theta_tourist", &self.theta_tourist)] {
            for (c, v) in map {
                let side = CellId::side(c.level.min(31));
                if c.level < 1 || c.level > self.height() || c.x >= side || c.y >= side {
                    return bad(format!("{name} key {c} outside the pyramid"));
                }
                check(name, v, k)?;
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let file = ModelFile::from(self);
        writeln!(w, "{MODEL_MAGIC}")?;
        serde_json::to_writer(&mut w, &file).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<ModelParams, ModelError> {
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim_end() == MODEL_MAGIC => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(ModelError::VersionMismatch { expected: MODEL_MAGIC }),
        }
        let body = lines.next().ok_or_else(|| ModelError::CorruptModel("missing body".into()))??;
        let file: ModelFile = serde_json::from_str(&body).map_err(|e| ModelError::CorruptModel(e.to_string()))?;
        let params = file.into_params()?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub theta0: usize,
    pub theta_user: usize,
    pub theta_native: usize,
    pub theta_tourist: usize,
    pub phi0: usize,
    pub phi_topic: usize,
    pub psi0: usize,
    pub psi_topic: usize,
}

/// Dense matrix stored as its nonzero entries; `-0.0` counts as nonzero so
/// the round trip is bit-exact.
#[derive(Serialize, Deserialize)]
struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseMatrix {
    fn encode(m: &[Vec<f64>], cols: usize) -> Self {
        let entries = m
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().filter(|(_, v)| v.to_bits() != 0).map(move |(c, v)| (r * cols + c, *v)))
            .collect();
        Self { rows: m.len(), cols, entries }
    }

    fn decode(self) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut m = vec![vec![0.0; self.cols]; self.rows];
        for (idx, v) in self.entries {
            if idx >= self.rows * self.cols {
                return Err(ModelError::CorruptModel(format!("matrix entry {idx} out of range")));
            }
            m[idx / self.cols][idx % self.cols] = v;
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    dims: Dims,
    pyramid: PyramidConfig,
    dict_hash: String,
    theta0: Vec<f64>,
    theta_user: Vec<(UserId, Vec<f64>)>,
    theta_native: Vec<(CellId, Vec<f64>)>,
    theta_tourist: Vec<(CellId, Vec<f64>)>,
    phi0: Vec<f64>,
    phi_topic: SparseMatrix,
    psi0: Vec<f64>,
    psi_topic: SparseMatrix,
}

impl From<&ModelParams> for ModelFile {
    fn from(p: &ModelParams) -> Self {
        Self {
            config: p.config,
            dims: p.dims,
            pyramid: p.pyramid,
            dict_hash: p.dict_hash.clone(),
            theta0: p.theta0.clone(),
            theta_user: p.theta_user.iter().map(|(k, v)| (*k, v.clone())).collect(),
            theta_native: p.theta_native.iter().map(|(k, v)| (*k, v.clone())).collect(),
            theta_tourist: p.theta_tourist.iter().map(|(k, v)| (*k, v.clone())).collect(),
            phi0: p.phi0.clone(),
            phi_topic: SparseMatrix::encode(&p.phi_topic, p.dims.words),
            psi0: p.psi0.clone(),
            psi_topic: SparseMatrix::encode(&p.psi_topic, p.dims.items),
        }
    }
}

impl ModelFile {
    fn into_params(self) -> Result<ModelParams, ModelError> {
        Ok(ModelParams {
            config: self.config,
            dims: self.dims,
            pyramid: self.pyramid,
            dict_hash: self.dict_hash,
            theta0: self.theta0,
            theta_user: self.theta_user.into_iter().collect(),
            theta_native: self.theta_native.into_iter().collect(),
            theta_tourist: self.theta_tourist.into_iter().collect(),
            phi0: self.phi0,
            phi_topic: self.phi_topic.decode()?,
            psi0: self.psi0,
            psi_topic: self.psi_topic.decode()?,
        })
    }
}
