//! Check-in ingestion, dictionaries, home inference, role labels and splits.
//!
//! Input lines carry five tab-separated fields:
//!
//! ```text
//! user-id <TAB> venue-id <TAB> lat,lon <TAB> word,word,... <TAB> 0|1|-
//! ```
//!
//! The role column may be `-` (unknown); roles are always re-derived from the
//! distance between the user's home and the venue.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CorpusError;
use crate::geo::{haversine_km, GeoPoint, PyramidConfig};

pub type UserId = u32;
pub type ItemId = u32;
pub type WordId = u32;

/// Distance beyond which a check-in counts as out of town.
pub const DEFAULT_D_KM: f64 = 100.0;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.30;
pub const CORPUS_MAGIC: &str = "GEOSAGE-CORPUS-1";

/// Share of malformed lines above which parsing fails outright.
const MAX_MALFORMED_RATIO: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Role {
    Local = 0,
    Tourist = 1,
}

impl Role {
    pub fn is_tourist(self) -> bool {
        self == Role::Tourist
    }

    /// `s` as used in the mixing weights: 0 for locals, 1 for tourists.
    pub fn indicator(self) -> f64 {
        match self {
            Role::Local => 0.0,
            Role::Tourist => 1.0,
        }
    }

    /// Tourist iff the distance is strictly greater than `d_km`.
    pub fn from_distance(home: GeoPoint, location: GeoPoint, d_km: f64) -> Role {
        if haversine_km(home, location) > d_km {
            Role::Tourist
        } else {
            Role::Local
        }
    }
}

impl From<Role> for u8 {
    fn from(r: Role) -> u8 {
        r as u8
    }
}

impl TryFrom<u8> for Role {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Role::Local),
            1 => Ok(Role::Tourist),
            other => Err(format!("role must be 0 or 1, got {other}")),
        }
    }
}

/// A parsed but not yet interned check-in line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub location: GeoPoint,
    pub words: Vec<String>,
    pub role: Option<Role>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRecord {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for MalformedRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    /// Lines skipped because they did not parse.
    pub malformed: Vec<MalformedRecord>,
    pub total_lines: usize,
}

fn parse_location(field: &str) -> Option<GeoPoint> {
    let (lat, lon) = field.split_once(',')?;
    GeoPoint::new(lat.trim().parse().ok()?, lon.trim().parse().ok()?).ok()
}

/// Parse one check-in line (1-based `line` is used for error reporting).
pub fn parse_line(line: usize, text: &str) -> Result<RawRecord, MalformedRecord> {
    let bad = |reason: &str| MalformedRecord { line, reason: reason.to_string() };
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 5 {
        return Err(bad(&format!("expected 5 tab-separated fields, found {}", fields.len())));
    }
    let (user, item) = (fields[0].trim(), fields[1].trim());
    if user.is_empty() || item.is_empty() {
        return Err(bad("empty user or venue id"));
    }
    let location = parse_location(fields[2]).ok_or_else(|| bad("location not lat,lon"))?;
    let words = fields[3]
        .split(',')
        .map(|w| w.trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let role = match fields[4].trim() {
        "0" => Some(Role::Local),
        "1" => Some(Role::Tourist),
        "-" | "\u{2212}" => None,
        _ => return Err(bad("role not one of 0, 1, -")),
    };
    Ok(RawRecord { user: user.to_string(), item: item.to_string(), location, words, role })
}

/// Parse a check-in stream. Blank lines are ignored. Malformed lines are
/// skipped and reported unless they exceed 1% of all non-blank lines.
pub fn parse_checkins<R: BufRead>(reader: R) -> Result<ParseOutcome, CorpusError> {
    let mut out = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        out.total_lines += 1;
        match parse_line(idx + 1, text) {
            Ok(rec) => out.records.push(rec),
            Err(m) => out.malformed.push(m),
        }
    }
    if out.malformed.len() as f64 > MAX_MALFORMED_RATIO * out.total_lines as f64 {
        return Err(CorpusError::TooManyMalformed { malformed: out.malformed, total: out.total_lines });
    }
    Ok(out)
}

/// Parse a homes file: `user-id <TAB> lat,lon` per line.
pub fn parse_homes<R: BufRead>(reader: R) -> Result<HashMap<String, GeoPoint>, CorpusError> {
    let mut homes = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let bad = |reason: &str| CorpusError::BadHomeRecord { line: idx + 1, reason: reason.to_string() };
        let (user, loc) = text.split_once('\t').ok_or_else(|| bad("expected user-id<TAB>lat,lon"))?;
        let loc = parse_location(loc).ok_or_else(|| bad("location not lat,lon"))?;
        homes.insert(user.trim().to_string(), loc);
    }
    Ok(homes)
}

/// Dense bijection between names and ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn from_names(names: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(CorpusError::Corrupt(format!("duplicate name {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// Returns the id and whether the name was new.
    pub fn intern(&mut self, name: &str) -> (u32, bool) {
        if let Some(&id) = self.index.get(name) {
            return (id, false);
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        (id, true)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dictionaries {
    pub users: Interner,
    pub items: Interner,
    pub vocab: Interner,
    pub item_locations: Vec<GeoPoint>,
    pub item_words: Vec<Vec<WordId>>,
}

impl Dictionaries {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_words(&self) -> usize {
        self.vocab.len()
    }

    /// Content hash tying a model to the dictionaries it was trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |tag: &str, names: &[String]| {
            h.update(tag.as_bytes());
            h.update((names.len() as u64).to_le_bytes());
            for n in names {
                h.update((n.len() as u64).to_le_bytes());
                h.update(n.as_bytes());
            }
        };
        feed("users", self.users.names());
        feed("items", self.items.names());
        feed("vocab", self.vocab.names());
        for (loc, words) in self.item_locations.iter().zip(&self.item_words) {
            h.update(loc.lat().to_bits().to_le_bytes());
            h.update(loc.lon().to_bits().to_le_bytes());
            h.update((words.len() as u64).to_le_bytes());
            for w in words {
                h.update(w.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserActivity {
    pub user: UserId,
    pub item: ItemId,
    pub location: GeoPoint,
    pub words: Vec<WordId>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user: UserId,
    pub activities: Vec<UserActivity>,
    pub home: GeoPoint,
}

/// Home location: the explicit home when given, otherwise the centroid of the
/// leaf cell holding most check-ins (ties go to the smallest `(x, y)`).
/// Locations outside the pyramid box are ignored.
pub fn infer_home(
    locations: &[GeoPoint],
    cfg: &PyramidConfig,
    explicit_home: Option<GeoPoint>,
) -> Result<GeoPoint, CorpusError> {
    if let Some(home) = explicit_home {
        return Ok(home);
    }
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for &p in locations {
        if let Ok(c) = cfg.cell_of(p, cfg.height) {
            *counts.entry((c.x, c.y)).or_default() += 1;
        }
    }
    let mut best: Option<((u32, u32), usize)> = None;
    for (&xy, &n) in &counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((xy, n));
        }
    }
    let ((x, y), _) = best.ok_or(CorpusError::NoData)?;
    Ok(cfg.centroid(crate::geo::CellId::new(cfg.height, x, y)))
}

/// Re-derive every activity's role from the home distance. Returns how many
/// stored roles disagreed with the derived one (the derived role wins).
pub fn label_roles(profile: &mut UserProfile, d_km: f64) -> usize {
    let mut mismatches = 0;
    for a in &mut profile.activities {
        let derived = Role::from_distance(profile.home, a.location, d_km);
        if derived != a.role {
            mismatches += 1;
            a.role = derived;
        }
    }
    mismatches
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub malformed: usize,
    pub dropped_outside_bbox: usize,
    pub conflicting_item_locations: usize,
    pub role_mismatches: usize,
    pub explicit_homes: usize,
    pub inferred_homes: usize,
}

/// Interned, role-labelled check-ins over a fixed pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pyramid: PyramidConfig,
    pub d_km: f64,
    pub dicts: Dictionaries,
    /// Home per user id.
    pub homes: Vec<GeoPoint>,
    pub activities: Vec<UserActivity>,
}

impl Corpus {
    /// Intern records, drop out-of-box check-ins, settle homes and roles.
    pub fn build(
        records: &[RawRecord],
        explicit_homes: &HashMap<String, GeoPoint>,
        pyramid: PyramidConfig,
        d_km: f64,
    ) -> Result<(Corpus, IngestReport), CorpusError> {
        let mut report = IngestReport { records: records.len(), ..Default::default() };
        let mut dicts = Dictionaries::default();
        let mut activities = Vec::with_capacity(records.len());
        let mut declared = Vec::with_capacity(records.len());
        for rec in records {
            if !pyramid.bbox.contains(rec.location) {
                report.dropped_outside_bbox += 1;
                continue;
            }
            let (user, _) = dicts.users.intern(&rec.user);
            let (item, new_item) = dicts.items.intern(&rec.item);
            if new_item {
                let words = rec.words.iter().map(|w| dicts.vocab.intern(w).0).collect();
                dicts.item_locations.push(rec.location);
                dicts.item_words.push(words);
            } else if dicts.item_locations[item as usize] != rec.location {
                report.conflicting_item_locations += 1;
            }
            activities.push(UserActivity {
                user,
                item,
                location: dicts.item_locations[item as usize],
                words: dicts.item_words[item as usize].clone(),
                role: Role::Local,
            });
            declared.push(rec.role);
        }
        if report.conflicting_item_locations > 0 {
            log::warn!(
                "{} check-ins disagree with their venue's first location; first occurrence kept",
                report.conflicting_item_locations
            );
        }
        if report.dropped_outside_bbox > 0 {
            log::warn!("dropped {} check-ins outside the bounding box", report.dropped_outside_bbox);
        }

        let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); dicts.n_users()];
        for (i, a) in activities.iter().enumerate() {
            by_user[a.user as usize].push(i);
        }
        let mut homes = Vec::with_capacity(dicts.n_users());
        for (u, idxs) in by_user.iter().enumerate() {
            let explicit = explicit_homes.get(dicts.users.name(u as u32)).copied();
            if explicit.is_some() {
                report.explicit_homes += 1;
            } else {
                report.inferred_homes += 1;
            }
            let locs: Vec<GeoPoint> = idxs.iter().map(|&i| activities[i].location).collect();
            homes.push(infer_home(&locs, &pyramid, explicit)?);
        }

        for (u, idxs) in by_user.iter().enumerate() {
            let mut profile = UserProfile {
                user: u as UserId,
                home: homes[u],
                activities: idxs
                    .iter()
                    .map(|&i| {
                        let mut a = activities[i].clone();
                        a.role = declared[i].unwrap_or_else(|| Role::from_distance(homes[u], a.location, d_km));
                        a
                    })
                    .collect(),
            };
            report.role_mismatches += label_roles(&mut profile, d_km);
            for (&i, a) in idxs.iter().zip(profile.activities) {
                activities[i].role = a.role;
            }
        }
        if report.role_mismatches > 0 {
            log::warn!("{} declared roles disagree with the distance rule; derived roles used", report.role_mismatches);
        }

        Ok((Corpus { pyramid, d_km, dicts, homes, activities }, report))
    }

    /// Write activities back out in the check-in line format.
    pub fn write_checkins<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for a in &self.activities {
            let words: Vec<&str> = a.words.iter().map(|&x| self.dicts.vocab.name(x)).collect();
            writeln!(
                w,
                "{}\t{}\t{},{}\t{}\t{}",
                self.dicts.users.name(a.user),
                self.dicts.items.name(a.item),
                a.location.lat(),
                a.location.lon(),
                words.join(","),
                u8::from(a.role.is_tourist())
            )?;
        }
        Ok(())
    }

    /// Write one `user <TAB> lat,lon` line per user.
    pub fn write_homes<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for (u, home) in self.homes.iter().enumerate() {
            writeln!(w, "{}\t{},{}", self.dicts.users.name(u as UserId), home.lat(), home.lon())?;
        }
        Ok(())
    }

    /// Group activities into per-user profiles.
    pub fn profiles(&self) -> Vec<UserProfile> {
        let mut profiles: Vec<UserProfile> = self
            .homes
            .iter()
            .enumerate()
            .map(|(u, &home)| UserProfile { user: u as UserId, activities: Vec::new(), home })
            .collect();
        for a in &self.activities {
            profiles[a.user as usize].activities.push(a.clone());
        }
        profiles
    }
}

/// Partition of activity indices into training and the two test scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<usize>,
    pub test_home: Vec<usize>,
    pub test_out: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Train,
    TestHome,
    TestOut,
}

impl SplitDataset {
    /// Everything in training (no held-out cases).
    pub fn all_train(n: usize) -> Self {
        Self { train: (0..n).collect(), test_home: Vec::new(), test_out: Vec::new(), seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test_home.len() + self.test_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Part label per activity index.
    pub fn parts(&self, n: usize) -> Vec<Option<Part>> {
        let mut parts = vec![None; n];
        for (list, part) in [(&self.train, Part::Train), (&self.test_home, Part::TestHome), (&self.test_out, Part::TestOut)] {
            for &i in list {
                parts[i] = Some(part);
            }
        }
        parts
    }
}

/// Per user, hold out `floor(fraction * n)` home-town activities for
/// `test_home` and likewise out-of-town ones for `test_out`, uniformly
/// without replacement. Deterministic for a given seed.
pub fn split(activities: &[UserActivity], fraction: f64, seed: u64) -> Result<SplitDataset, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<(UserId, Role), Vec<usize>> = BTreeMap::new();
    for (i, a) in activities.iter().enumerate() {
        groups.entry((a.user, a.role)).or_default().push(i);
    }
    let mut held = vec![false; activities.len()];
    let mut out = SplitDataset { train: Vec::new(), test_home: Vec::new(), test_out: Vec::new(), seed };
    for ((_, role), idxs) in &groups {
        // The epsilon keeps products like 0.29 * 100 from flooring to 28.
        let take = (fraction * idxs.len() as f64 + 1e-9).floor() as usize;
        let target = match role {
            Role::Local => &mut out.test_home,
            Role::Tourist => &mut out.test_out,
        };
        for j in sample(&mut rng, idxs.len(), take).into_iter() {
            held[idxs[j]] = true;
            target.push(idxs[j]);
        }
    }
    out.train = (0..activities.len()).filter(|&i| !held[i]).collect();
    out.test_home.sort_unstable();
    out.test_out.sort_unstable();
    Ok(out)
}

/// A corpus together with its split; the unit stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBundle {
    pub corpus: Corpus,
    pub split: SplitDataset,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    pyramid: PyramidConfig,
    d_km: f64,
    split_seed: u64,
    users: Vec<String>,
    vocab: Vec<String>,
    items: Vec<ItemRecord>,
    homes: Vec<GeoPoint>,
    n_activities: usize,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    name: String,
    loc: GeoPoint,
    words: Vec<WordId>,
}

/// Activity line: `[user, item, role, part]`.
type ActivityLine = (UserId, ItemId, Role, Part);

impl CorpusBundle {
    /// Line-delimited encoding: magic line, JSON header, one JSON array per activity.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        let c = &self.corpus;
        let header = BundleHeader {
            pyramid: c.pyramid,
            d_km: c.d_km,
            split_seed: self.split.seed,
            users: c.dicts.users.names().to_vec(),
            vocab: c.dicts.vocab.names().to_vec(),
            items: (0..c.dicts.n_items())
                .map(|i| ItemRecord {
                    name: c.dicts.items.name(i as u32).to_string(),
                    loc: c.dicts.item_locations[i],
                    words: c.dicts.item_words[i].clone(),
                })
                .collect(),
            homes: c.homes.clone(),
            n_activities: c.activities.len(),
        };
        writeln!(w, "{CORPUS_MAGIC}")?;
        serde_json::to_writer(&mut w, &header).map_err(|e| CorpusError::Corrupt(e.to_string()))?;
        writeln!(w)?;
        let parts = self.split.parts(c.activities.len());
        for (a, part) in c.activities.iter().zip(parts) {
            let part = part.ok_or_else(|| CorpusError::Corrupt("split does not cover every activity".into()))?;
            let line: ActivityLine = (a.user, a.item, a.role, part);
            serde_json::to_writer(&mut w, &line).map_err(|e| CorpusError::Corrupt(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<CorpusBundle, CorpusError> {
        let corrupt = |m: String| CorpusError::Corrupt(m);
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(l)) if l.trim_end() == CORPUS_MAGIC => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(CorpusError::VersionMismatch { expected: CORPUS_MAGIC }),
        }
        let header_line = lines.next().ok_or_else(|| corrupt("missing header".into()))??;
        let header: BundleHeader = serde_json::from_str(&header_line).map_err(|e| corrupt(e.to_string()))?;
        let mut dicts = Dictionaries {
            users: Interner::from_names(header.users)?,
            vocab: Interner::from_names(header.vocab)?,
            ..Default::default()
        };
        let mut item_names = Vec::with_capacity(header.items.len());
        for it in header.items {
            if it.words.iter().any(|&w| w as usize >= dicts.vocab.len()) {
                return Err(corrupt(format!("item {} references an unknown word", it.name)));
            }
            item_names.push(it.name);
            dicts.item_locations.push(it.loc);
            dicts.item_words.push(it.words);
        }
        dicts.items = Interner::from_names(item_names)?;
        if header.homes.len() != dicts.n_users() {
            return Err(corrupt("homes do not cover every user".into()));
        }
        let mut activities = Vec::with_capacity(header.n_activities);
        let mut split = SplitDataset { train: Vec::new(), test_home: Vec::new(), test_out: Vec::new(), seed: header.split_seed };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (user, item, role, part): ActivityLine = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            if user as usize >= dicts.n_users() || item as usize >= dicts.n_items() {
                return Err(corrupt(format!("activity {i} references an unknown user or item")));
            }
            match part {
                Part::Train => split.train.push(i),
                Part::TestHome => split.test_home.push(i),
                Part::TestOut => split.test_out.push(i),
            }
            activities.push(UserActivity {
                user,
                item,
                location: dicts.item_locations[item as usize],
                words: dicts.item_words[item as usize].clone(),
                role,
            });
        }
        if activities.len() != header.n_activities {
            return Err(corrupt(format!("expected {} activities, found {}", header.n_activities, activities.len())));
        }
        let corpus = Corpus { pyramid: header.pyramid, d_km: header.d_km, dicts, homes: header.homes, activities };
        Ok(CorpusBundle { corpus, split })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{BoundingBox, CellId};
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn parses_format_examples() {
        let r = parse_line(1, "u1\tv1\t37.5,-122.1\tcoffee,cafe\t0").unwrap();
        assert_eq!(r.user, "u1");
        assert_eq!(r.item, "v1");
        assert_eq!(r.location, pt(37.5, -122.1));
        assert_eq!(r.words, vec!["coffee", "cafe"]);
        assert_eq!(r.role, Some(Role::Local));

        let r = parse_line(2, "u1\tv2\t36.1,-115.2\t\t-").unwrap();
        assert!(r.words.is_empty());
        assert_eq!(r.role, None);

        let e = parse_line(3, "u1\tv1\tbad\t\t0").unwrap_err();
        assert_eq!(e, MalformedRecord { line: 3, reason: "location not lat,lon".into() });
    }

    #[test]
    fn words_are_lowercased() {
        let r = parse_line(1, "u\tv\t1,1\tCoffee, BAR ,,\t1").unwrap();
        assert_eq!(r.words, vec!["coffee", "bar"]);
    }

    #[test]
    fn malformed_threshold() {
        let text = "u1\tv1\t37.5,-122.1\tcoffee,cafe\t0\nu1\tv2\t36.1,-115.2\t\t-\nu1\tv1\tbad\t\t0\n";
        match parse_checkins(text.as_bytes()) {
            Err(CorpusError::TooManyMalformed { malformed, total }) => {
                assert_eq!(total, 3);
                assert_eq!(malformed[0].line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        // One bad line in 200 is tolerated and reported.
        let mut text = String::new();
        for i in 0..199 {
            text.push_str(&format!("u{i}\tv{i}\t30,-100\tx\t-\n"));
        }
        text.push_str("garbage\n");
        let out = parse_checkins(text.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 199);
        assert_eq!(out.malformed.len(), 1);
        assert_eq!(out.malformed[0].line, 200);
    }

    #[test]
    fn home_inference() {
        let cfg = PyramidConfig::new(BoundingBox::new(pt(0.0, 0.0), pt(32.0, 32.0)).unwrap(), 5).unwrap();
        // Leaves are 1x1 degree squares: (x, y) = (floor(lon), floor(lat)).
        let a = [pt(2.5, 3.5), pt(2.2, 3.1), pt(2.9, 3.9), pt(10.5, 10.5)];
        assert_eq!(infer_home(&a, &cfg, None).unwrap(), cfg.centroid(CellId::new(5, 3, 2)));

        let tie = [pt(1.5, 1.5), pt(1.2, 1.2), pt(3.5, 0.5), pt(3.2, 0.2)];
        assert_eq!(infer_home(&tie, &cfg, None).unwrap(), cfg.centroid(CellId::new(5, 0, 3)));

        let explicit = pt(34.0, -118.2);
        assert_eq!(infer_home(&a, &cfg, Some(explicit)).unwrap(), explicit);
        assert!(matches!(infer_home(&[], &cfg, None), Err(CorpusError::NoData)));
    }

    fn activity(user: UserId, item: ItemId, location: GeoPoint, role: Role) -> UserActivity {
        UserActivity { user, item, location, words: vec![], role }
    }

    #[test]
    fn roles_follow_the_distance_rule() {
        // 1 degree of longitude on the equator is ~111.19 km.
        let home = pt(0.0, 0.0);
        let deg_for = |km: f64| (km / crate::geo::EARTH_RADIUS_KM).to_degrees();
        let mut p = UserProfile {
            user: 0,
            home,
            activities: vec![
                activity(0, 0, pt(0.0, deg_for(150.0)), Role::Local),
                activity(0, 1, pt(0.0, deg_for(50.0)), Role::Local),
                activity(0, 2, pt(0.0, deg_for(99.999_999)), Role::Tourist),
            ],
        };
        assert_eq!(label_roles(&mut p, 100.0), 2);
        let roles: Vec<Role> = p.activities.iter().map(|a| a.role).collect();
        assert_eq!(roles, vec![Role::Tourist, Role::Local, Role::Local]);
        assert_eq!(label_roles(&mut p, 100.0), 0, "idempotent");
    }

    #[test]
    fn exactly_at_threshold_is_local() {
        let (a, b) = (pt(0.0, 0.0), pt(0.0, 1.0));
        let d = haversine_km(a, b);
        assert_eq!(Role::from_distance(a, b, d), Role::Local);
        assert_eq!(Role::from_distance(a, b, d.next_down()), Role::Tourist);
    }

    #[test]
    fn split_examples() {
        let mut acts: Vec<UserActivity> = (0..10).map(|i| activity(0, i, pt(0.0, 0.0), Role::Local)).collect();
        acts.extend((0..5).map(|i| activity(1, 10 + i, pt(0.0, 5.0), Role::Tourist)));
        let s = split(&acts, 0.3, 7).unwrap();
        assert_eq!(s.test_home.len(), 3);
        assert!(s.test_home.iter().all(|&i| acts[i].user == 0));
        assert_eq!(s.test_out.len(), 1);
        assert_eq!(s.train.len(), 11);
        assert_eq!(s, split(&acts, 0.3, 7).unwrap());
        assert!(matches!(split(&acts, 1.0, 7), Err(CorpusError::BadFraction(_))));
    }

    #[test]
    fn build_labels_and_dedups() {
        let cfg = PyramidConfig::new(BoundingBox::continental_us(), 3).unwrap();
        let text = "a\tv1\t34.0,-118.2\tTaco\t-\n\
                    a\tv1\t34.1,-118.2\tignored\t0\n\
                    a\tv2\t34.05,-118.25\t\t1\n\
                    a\tv3\t40.7,-74.0\tmuseum\t-\n\
                    b\tv4\t10.0,10.0\t\t0\n";
        let parsed = parse_checkins(text.as_bytes()).unwrap();
        let mut homes = HashMap::new();
        homes.insert("a".to_string(), pt(34.0, -118.3));
        let (c, report) = Corpus::build(&parsed.records, &homes, cfg, 100.0).unwrap();
        assert_eq!(report.dropped_outside_bbox, 1);
        assert_eq!(report.conflicting_item_locations, 1);
        assert_eq!(report.role_mismatches, 1);
        assert_eq!(c.activities.len(), 4);
        assert_eq!(c.dicts.n_items(), 3);
        assert_eq!(c.activities[1].location, pt(34.0, -118.2));
        let roles: Vec<Role> = c.activities.iter().map(|a| a.role).collect();
        assert_eq!(roles, vec![Role::Local, Role::Local, Role::Local, Role::Tourist]);
        assert_eq!(c.dicts.vocab.names(), &["taco".to_string(), "museum".to_string()]);
    }

    #[test]
    fn checkin_writer_round_trips() {
        let cfg = PyramidConfig::new(BoundingBox::continental_us(), 3).unwrap();
        let text = "a\tv1\t34,-118.2\ttaco,bar\t0\na\tv2\t40.7,-74\t\t1\nb\tv1\t34,-118.2\ttaco,bar\t0\n";
        let parsed = parse_checkins(text.as_bytes()).unwrap();
        let homes = parse_homes("a\t34.1,-118.3\nb\t34,-118\n".as_bytes()).unwrap();
        let (c, _) = Corpus::build(&parsed.records, &homes, cfg, 100.0).unwrap();
        let mut out = Vec::new();
        c.write_checkins(&mut out).unwrap();
        assert_eq!(String::from_utf8(out.clone()).unwrap(), text);
        let mut home_text = Vec::new();
        c.write_homes(&mut home_text).unwrap();
        let again = parse_checkins(out.as_slice()).unwrap();
        let homes_again = parse_homes(home_text.as_slice()).unwrap();
        assert_eq!(homes_again, homes);
        assert_eq!(Corpus::build(&again.records, &homes_again, cfg, 100.0).unwrap().0, c);
    }

    #[test]
    fn bundle_round_trip_and_magic() {
        let cfg = PyramidConfig::new(BoundingBox::continental_us(), 3).unwrap();
        let text = "a\tv1\t34.0,-118.2\ttaco,bar\t-\na\tv2\t40.7,-74.0\tmuseum\t-\nb\tv1\t34.0,-118.2\ttaco\t-\n";
        let parsed = parse_checkins(text.as_bytes()).unwrap();
        let (c, _) = Corpus::build(&parsed.records, &HashMap::new(), cfg, 100.0).unwrap();
        let s = split(&c.activities, 0.5, 1).unwrap();
        let bundle = CorpusBundle { corpus: c, split: s };
        let mut buf = Vec::new();
        bundle.write(&mut buf).unwrap();
        let back = CorpusBundle::read(buf.as_slice()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.corpus.dicts.fingerprint(), bundle.corpus.dicts.fingerprint());

        let wrong = b"GEOSAGE-CORPUS-0\n{}\n";
        assert!(matches!(CorpusBundle::read(&wrong[..]), Err(CorpusError::VersionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn split_partitions(
            spec in prop::collection::vec((0u32..6, any::<bool>()), 0..80),
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let acts: Vec<UserActivity> = spec
                .iter()
                .enumerate()
                .map(|(i, &(u, t))| activity(u, i as u32, pt(0.0, 0.0), if t { Role::Tourist } else { Role::Local }))
                .collect();
            let s = split(&acts, frac, seed).unwrap();
            prop_assert_eq!(s.len(), acts.len());
            let mut all: Vec<usize> = s.train.iter().chain(&s.test_home).chain(&s.test_out).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..acts.len()).collect::<Vec<_>>());
            prop_assert!(s.test_home.iter().all(|&i| acts[i].role == Role::Local));
            prop_assert!(s.test_out.iter().all(|&i| acts[i].role == Role::Tourist));
        }

        #[test]
        fn interner_round_trips(names in prop::collection::vec("[a-z]{1,6}", 0..40)) {
            let mut it = Interner::default();
            for n in &names {
                it.intern(n);
            }
            for id in 0..it.len() as u32 {
                prop_assert_eq!(it.id(it.name(id)), Some(id));
            }
        }

        #[test]
        fn inferred_home_stays_in_box(pts in prop::collection::vec((24.0f64..=50.0, -125.0f64..=-66.0), 1..20)) {
            let cfg = PyramidConfig::default();
            let locs: Vec<GeoPoint> = pts.iter().map(|&(a, b)| pt(a, b)).collect();
            prop_assert!(cfg.bbox.contains(infer_home(&locs, &cfg, None).unwrap()));
        }
    }
}
