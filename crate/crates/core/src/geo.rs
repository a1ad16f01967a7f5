//! Great-circle distances and the spatial pyramid.
//!
//! The pyramid splits a bounding box into `4^h` equal lat/lon rectangles at
//! level `h`. A location is described by its [`CellPath`], one cell per level
//! from 1 to `H`; level 0 (the whole box) carries no parameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GeoError;

/// Mean Earth radius used for every distance computation.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Default pyramid height.
pub const DEFAULT_HEIGHT: u8 = 5;

/// A validated (latitude, longitude) pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidPoint { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl TryFrom<(f64, f64)> for GeoPoint {
    type Error = GeoError;

    fn try_from((lat, lon): (f64, f64)) -> Result<Self, Self::Error> {
        GeoPoint::new(lat, lon)
    }
}

impl From<GeoPoint> for (f64, f64) {
    fn from(p: GeoPoint) -> Self {
        (p.lat, p.lon)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lat, self.lon)
    }
}

/// Haversine great-circle distance in kilometers.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    min: GeoPoint,
    max: GeoPoint,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    min: GeoPoint,
    max: GeoPoint,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeoError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.min, raw.max)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox { min: b.min, max: b.max }
    }
}

impl BoundingBox {
    pub fn new(min: GeoPoint, max: GeoPoint) -> Result<Self, GeoError> {
        if min.lat >= max.lat || min.lon >= max.lon {
            return Err(GeoError::InvalidBbox);
        }
        Ok(Self { min, max })
    }

    /// Continental USA: lat 24..50, lon -125..-66.
    pub fn continental_us() -> Self {
        Self {
            min: GeoPoint { lat: 24.0, lon: -125.0 },
            max: GeoPoint { lat: 50.0, lon: -66.0 },
        }
    }

    pub fn min(&self) -> GeoPoint {
        self.min
    }

    pub fn max(&self) -> GeoPoint {
        self.max
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min.lat..=self.max.lat).contains(&p.lat) && (self.min.lon..=self.max.lon).contains(&p.lon)
    }

    fn lat_span(&self) -> f64 {
        self.max.lat - self.min.lat
    }

    fn lon_span(&self) -> f64 {
        self.max.lon - self.min.lon
    }
}

impl Default for BoundingBox {
    fn default() -> Self {
        Self::continental_us()
    }
}

/// One grid cell: `x` indexes longitude, `y` latitude, both in `[0, 2^level)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub level: u8,
    pub x: u32,
    pub y: u32,
}

impl CellId {
    pub fn new(level: u8, x: u32, y: u32) -> Self {
        Self { level, x, y }
    }

    /// The enclosing cell one level up, or `None` at level 1.
    pub fn parent(&self) -> Option<CellId> {
        (self.level > 1).then(|| CellId::new(self.level - 1, self.x / 2, self.y / 2))
    }

    /// Number of cells along one axis at this level.
    pub fn side(level: u8) -> u32 {
        1u32 << level
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.level, self.x, self.y)
    }
}

/// Root-to-leaf path: entry `i` is the cell at level `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellPath(Vec<CellId>);

impl CellPath {
    pub fn cells(&self) -> &[CellId] {
        &self.0
    }

    pub fn height(&self) -> u8 {
        self.0.len() as u8
    }

    /// Cell at `level` (1-based).
    pub fn at(&self, level: u8) -> CellId {
        self.0[level as usize - 1]
    }

    pub fn leaf(&self) -> CellId {
        *self.0.last().expect("paths have at least one level")
    }

    /// The path cut off below `level`.
    pub fn truncated(&self, level: u8) -> CellPath {
        CellPath(self.0[..level as usize].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub bbox: BoundingBox,
    pub height: u8,
}

impl PyramidConfig {
    pub fn new(bbox: BoundingBox, height: u8) -> Result<Self, GeoError> {
        if !(1..=15).contains(&height) {
            return Err(GeoError::InvalidHeight(height));
        }
        Ok(Self { bbox, height })
    }

    /// Fractional position of `p` inside the box, in `[0, 1]` per axis.
    fn unit_coords(&self, p: GeoPoint) -> Result<(f64, f64), GeoError> {
        if !self.bbox.contains(p) {
            return Err(GeoError::PointOutsideBbox { lat: p.lat, lon: p.lon });
        }
        let tx = (p.lon - self.bbox.min.lon) / self.bbox.lon_span();
        let ty = (p.lat - self.bbox.min.lat) / self.bbox.lat_span();
        Ok((tx, ty))
    }

    fn cell_from_unit(level: u8, tx: f64, ty: f64) -> CellId {
        // Scaling by a power of two is exact, which keeps the levels nested.
        let side = CellId::side(level);
        let scale = side as f64;
        let index = |t: f64| ((scale * t).floor() as u32).min(side - 1);
        CellId::new(level, index(tx), index(ty))
    }

    pub fn cell_of(&self, p: GeoPoint, level: u8) -> Result<CellId, GeoError> {
        if level < 1 || level > self.height {
            return Err(GeoError::InvalidLevel { level, height: self.height });
        }
        let (tx, ty) = self.unit_coords(p)?;
        Ok(Self::cell_from_unit(level, tx, ty))
    }

    pub fn path_of(&self, p: GeoPoint) -> Result<CellPath, GeoError> {
        let (tx, ty) = self.unit_coords(p)?;
        Ok(CellPath((1..=self.height).map(|h| Self::cell_from_unit(h, tx, ty)).collect()))
    }

    /// Midpoint of the cell's rectangle.
    pub fn centroid(&self, c: CellId) -> GeoPoint {
        self.point_in_cell(c, 0.5, 0.5)
    }

    /// Point at fractional offset `(fx, fy)` from the cell's south-west corner.
    pub fn point_in_cell(&self, c: CellId, fx: f64, fy: f64) -> GeoPoint {
        let scale = CellId::side(c.level) as f64;
        GeoPoint {
            lat: self.bbox.min.lat + (c.y as f64 + fy) / scale * self.bbox.lat_span(),
            lon: self.bbox.min.lon + (c.x as f64 + fx) / scale * self.bbox.lon_span(),
        }
    }

    /// Inclusive index range of cells at `level` overlapping `[lo, hi]` on each axis.
    pub(crate) fn cell_range(&self, level: u8, lo: (f64, f64), hi: (f64, f64)) -> ((u32, u32), (u32, u32)) {
        let side = CellId::side(level);
        let scale = side as f64;
        let clamp_index = |t: f64| ((scale * t.clamp(0.0, 1.0)).floor() as u32).min(side - 1);
        let tx = |lon: f64| (lon - self.bbox.min.lon) / self.bbox.lon_span();
        let ty = |lat: f64| (lat - self.bbox.min.lat) / self.bbox.lat_span();
        (
            (clamp_index(tx(lo.1)), clamp_index(tx(hi.1))),
            (clamp_index(ty(lo.0)), clamp_index(ty(hi.0))),
        )
    }
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { bbox: BoundingBox::continental_us(), height: DEFAULT_HEIGHT }
    }
}

/// Latitude/longitude rectangle that contains every point within `radius_km`
/// of `center`, as `((min_lat, min_lon), (max_lat, max_lon))`.
pub(crate) fn circle_bounds(center: GeoPoint, radius_km: f64) -> ((f64, f64), (f64, f64)) {
    let angular = radius_km / EARTH_RADIUS_KM;
    // Slack covers rounding in the trigonometry below.
    let dlat = angular.to_degrees() + 1e-9;
    let lat_lo = center.lat - dlat;
    let lat_hi = center.lat + dlat;
    let lat_rad = center.lat.to_radians();
    let full = (-180.0, 180.0);
    let (lon_lo, lon_hi) = if angular >= std::f64::consts::FRAC_PI_2 || lat_lo <= -90.0 || lat_hi >= 90.0 {
        full
    } else {
        let ratio = angular.sin() / lat_rad.cos();
        if ratio >= 1.0 {
            full
        } else {
            let dlon = ratio.asin().to_degrees() + 1e-9;
            let (lo, hi) = (center.lon - dlon, center.lon + dlon);
            if lo < -180.0 || hi > 180.0 {
                full
            } else {
                (lo, hi)
            }
        }
    };
    ((lat_lo, lon_lo), (lat_hi, lon_hi))
}
