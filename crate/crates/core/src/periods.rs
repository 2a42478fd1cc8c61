//! Night, Winter and Flood record masks.
//!
//! Transpiration is taken as negligible when the sun is below the horizon,
//! during the senescent months (December through February), and between the
//! initial flooding of a site and vegetation greenup. Night records train the
//! evaporation model; Winter and Flood are generalization sets.


use chrono::{DateTime, Datelike, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::FluxDataset;

#[derive(Debug, Error, PartialEq)]
pub enum PeriodError {
    #[error("site `{0}` has no latitude/longitude")]
    MissingCoordinates(String),
    #[error("greenup date {greenup} is not after flood start {flood_start}")]
    InvertedFloodWindow {
        flood_start: chrono::NaiveDate,
        greenup: chrono::NaiveDate,
    },
    #[error("holdout fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("need at least 10 night records for a holdout split, have {0}")]
    TooFewNightRecords(usize),
    #[error("mask length {got} does not match record count {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Solar zenith angle in degrees, geometric (no refraction).
///
/// Astronomical Almanac low-precision solar coordinates (about 0.01° within
/// 1950–2050) and Greenwich mean sidereal time.
pub fn solar_zenith(ts: DateTime<Utc>, lat: f64, lon: f64) -> f64 {
    // Days since J2000.0 (JD 2451545.0 = 2000-01-01 12:00 UTC).
    let d = ts.timestamp() as f64 / 86_400.0 + 2_440_587.5 - 2_451_545.0;
    let mean_lon = (280.460 + 0.985_647_4 * d).rem_euclid(360.0);
    let anomaly = (357.528 + 0.985_600_3 * d).rem_euclid(360.0).to_radians();
    let ecl_lon = (mean_lon + 1.915 * anomaly.sin() + 0.020 * (2.0 * anomaly).sin()).to_radians();
    let obliquity = (23.439 - 0.000_000_4 * d).to_radians();
    let ra = (obliquity.cos() * ecl_lon.sin()).atan2(ecl_lon.cos());
    let decl = (obliquity.sin() * ecl_lon.sin()).asin();

    let gmst_hours = (18.697_374_558 + 24.065_709_824_419_08 * d).rem_euclid(24.0);
    let hour_angle = (gmst_hours * 15.0 + lon).to_radians() - ra;
    let phi = lat.to_radians();
    let cos_zen = phi.sin() * decl.sin() + phi.cos() * decl.cos() * hour_angle.cos();
    cos_zen.clamp(-1.0, 1.0).acos().to_degrees()
}

fn coords(ds: &FluxDataset) -> Result<(f64, f64), PeriodError> {
    match (ds.meta().latitude, ds.meta().longitude) {
        (Some(lat), Some(lon)) => Ok((lat, lon)),
        _ => Err(PeriodError::MissingCoordinates(ds.site_id().to_string())),
    }
}

/// Night iff zenith strictly exceeds 90°.
pub fn is_night(zenith: f64) -> bool {
    zenith > 90.0
}

pub fn night_mask(ds: &FluxDataset) -> Result<Vec<bool>, PeriodError> {
    let (lat, lon) = coords(ds)?;
    Ok(ds
        .records()
        .iter()
        .map(|r| is_night(solar_zenith(r.timestamp, lat, lon)))
        .collect())
}

/// December, January and February in site local time.
pub fn winter_mask(ds: &FluxDataset) -> Vec<bool> {
    ds.records()
        .iter()
        .map(|r| matches!(ds.meta().local(r.timestamp).month(), 12 | 1 | 2))
        .collect()
}

/// Flood mask plus an optional warning when the site has no flood window.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodMask {
    pub mask: Vec<bool>,
    pub warning: Option<String>,
}

/// Records with local date in `[flood_start, greenup_date)`.
pub fn flood_mask(ds: &FluxDataset) -> Result<FloodMask, PeriodError> {
    let meta = ds.meta();
    let (start, greenup) = match (meta.flood_start, meta.greenup_date) {
        (Some(s), Some(g)) => (s, g),
        _ => {
            let warning = format!("site `{}` has no flood window; flood mask is empty", ds.site_id());
            log::warn!("{warning}");
            return Ok(FloodMask {
                mask: vec![false; ds.len()],
                warning: Some(warning),
            });
        }
    };
    if greenup <= start {
        return Err(PeriodError::InvertedFloodWindow {
            flood_start: start,
            greenup,
        });
    }
    let mask = ds
        .records()
        .iter()
        .map(|r| {
            let d = meta.local(r.timestamp).date();
            start <= d && d < greenup
        })
        .collect();
    Ok(FloodMask {
        mask,
        warning: None,
    })
}

/// Seeded partition of night records into training and holdout sets.
///
/// `floor(fraction * n_night)` night records go to the holdout.
pub fn split_night_holdout(
    night: &[bool],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<bool>, Vec<bool>), PeriodError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(PeriodError::BadFraction(holdout_fraction));
    }
    let mut idx: Vec<usize> = night
        .iter()
        .enumerate()
        .filter_map(|(i, &n)| n.then_some(i))
        .collect();
    if idx.len() < 10 {
        return Err(PeriodError::TooFewNightRecords(idx.len()));
    }
    let n_holdout = (holdout_fraction * idx.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut holdout = vec![false; night.len()];
    for &i in &idx[..n_holdout] {
        holdout[i] = true;
    }
    let train = night
        .iter()
        .zip(&holdout)
        .map(|(&n, &h)| n && !h)
        .collect();
    Ok((train, holdout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMasks {
    pub night: Vec<bool>,
    pub winter: Vec<bool>,
    pub flood: Vec<bool>,
    pub night_train: Vec<bool>,
    pub night_holdout: Vec<bool>,
}

impl PeriodMasks {
    /// All masks for a site. The holdout split is drawn from `seed`.
    pub fn compute(ds: &FluxDataset, holdout_fraction: f64, seed: u64) -> Result<Self, PeriodError> {
        let night = night_mask(ds)?;
        let winter = winter_mask(ds);
        let flood = flood_mask(ds)?.mask;
        let (night_train, night_holdout) = split_night_holdout(&night, holdout_fraction, seed)?;
        Ok(Self {
            night,
            winter,
            flood,
            night_train,
            night_holdout,
        })
    }

    /// Assemble from precomputed masks, checking lengths and `holdout ⊆ night`.
    pub fn from_parts(
        night: Vec<bool>,
        winter: Vec<bool>,
        flood: Vec<bool>,
        night_holdout: Vec<bool>,
    ) -> Result<Self, PeriodError> {
        let n = night.len();
        for m in [&winter, &flood, &night_holdout] {
            if m.len() != n {
                return Err(PeriodError::LengthMismatch {
                    got: m.len(),
                    expected: n,
                });
            }
        }
        let night_holdout: Vec<bool> = night_holdout
            .iter()
            .zip(&night)
            .map(|(&h, &n)| h && n)
            .collect();
        let night_train = night
            .iter()
            .zip(&night_holdout)
            .map(|(&n, &h)| n && !h)
            .collect();
        Ok(Self {
            night,
            winter,
            flood,
            night_train,
            night_holdout,
        })
    }

    pub fn len(&self) -> usize {
        self.night.len()
    }

    pub fn is_empty(&self) -> bool {
        self.night.is_empty()
    }

    pub fn has_flood(&self) -> bool {
        self.flood.iter().any(|&f| f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{utc, FluxRecord, SiteMeta};
    use chrono::NaiveDate;

    fn dataset(stamps: &[DateTime<Utc>], meta: SiteMeta) -> FluxDataset {
        let records = stamps
            .iter()
            .map(|&timestamp| FluxRecord {
                timestamp,
                values: vec![Some(0.0)],
            })
            .collect();
        FluxDataset::new("S", vec!["wq".into()], records, meta).unwrap()
    }

    fn site(lat: f64, lon: f64) -> SiteMeta {
        SiteMeta {
            latitude: Some(lat),
            longitude: Some(lon),
            ..Default::default()
        }
    }

    #[test]
    fn equator_equinox_noon_and_midnight() {
        // Greenwich meridian; equation of time shifts solar noon by ~7 min on 20 March.
        let noon = solar_zenith(utc(2019, 3, 20, 12, 7), 0.0, 0.0);
        let midnight = solar_zenith(utc(2019, 3, 20, 0, 7), 0.0, 0.0);
        assert!(noon < 1.0, "{noon}");
        assert!(midnight > 179.0, "{midnight}");
    }

    #[test]
    fn june_noon_matches_reference() {
        use solar_positioning::{delta_t, Location, SolarPositions};
        let ts = utc(2018, 6, 21, 20, 0);
        let want = SolarPositions::new()
            .at(
                &ts,
                Location {
                    latitude: 38.1,
                    longitude: -121.8,
                },
                0.0,
                delta_t::estimate_from_date(2018, 6).unwrap(),
                None,
            )
            .unwrap()
            .zenith_angle();
        let got = solar_zenith(ts, 38.1, -121.8);
        assert!((got - want).abs() < 0.5, "{got} vs {want}");
        assert!((got - 14.7).abs() < 0.5, "{got}");
    }

    #[test]
    fn midnight_is_night_and_june_noon_is_day() {
        // 38°N 121.8°W: local solar noon ≈ 20:07 UTC, midnight ≈ 08:07 UTC.
        let ds = dataset(&[utc(2018, 6, 21, 8, 0), utc(2018, 6, 21, 20, 0)], site(38.1, -121.8));
        assert_eq!(night_mask(&ds).unwrap(), vec![true, false]);
    }

    #[test]
    fn horizon_is_not_night() {
        assert!(!is_night(90.0));
        assert!(is_night(90.0 + 1e-9));
    }

    #[test]
    fn night_needs_coordinates() {
        let ds = dataset(&[utc(2018, 6, 21, 8, 0)], SiteMeta::default());
        assert!(matches!(night_mask(&ds), Err(PeriodError::MissingCoordinates(_))));
    }

    #[test]
    fn winter_months() {
        let meta = SiteMeta {
            utc_offset: -8.0,
            ..site(38.0, -121.0)
        };
        // 2014-12-31 23:30 local = 2015-01-01 07:30 UTC
        let ds = dataset(
            &[utc(2015, 1, 1, 7, 30), utc(2015, 1, 15, 20, 0), utc(2015, 3, 1, 20, 0)],
            meta,
        );
        assert_eq!(winter_mask(&ds), vec![true, true, false]);
    }

    #[test]
    fn local_offset_moves_month_boundary() {
        // 2015-03-01 02:00 UTC is still 28 Feb in UTC-8.
        let meta = SiteMeta {
            utc_offset: -8.0,
            ..site(38.0, -121.0)
        };
        let ds = dataset(&[utc(2015, 3, 1, 2, 0)], meta);
        assert_eq!(winter_mask(&ds), vec![true]);
    }

    #[test]
    fn flood_window_half_open() {
        let meta = SiteMeta {
            flood_start: NaiveDate::from_ymd_opt(2010, 10, 1),
            greenup_date: NaiveDate::from_ymd_opt(2011, 6, 1),
            ..site(38.0, -121.0)
        };
        let ds = dataset(
            &[utc(2010, 9, 30, 12, 0), utc(2011, 1, 15, 12, 0), utc(2011, 6, 1, 0, 0)],
            meta,
        );
        let f = flood_mask(&ds).unwrap();
        assert_eq!(f.mask, vec![false, true, false]);
        assert!(f.warning.is_none());
    }

    #[test]
    fn no_flood_window_warns() {
        let ds = dataset(&[utc(2011, 1, 15, 12, 0)], site(38.0, -121.0));
        let f = flood_mask(&ds).unwrap();
        assert_eq!(f.mask, vec![false]);
        assert!(f.warning.is_some());
    }

    #[test]
    fn inverted_flood_window_rejected() {
        let meta = SiteMeta {
            flood_start: NaiveDate::from_ymd_opt(2011, 6, 1),
            greenup_date: NaiveDate::from_ymd_opt(2011, 6, 1),
            ..site(38.0, -121.0)
        };
        let ds = dataset(&[utc(2011, 1, 15, 12, 0)], meta);
        assert!(matches!(flood_mask(&ds), Err(PeriodError::InvertedFloodWindow { .. })));
    }

    #[test]
    fn holdout_counts() {
        let night = vec![true; 100];
        let (train, hold) = split_night_holdout(&night, 0.2, 7).unwrap();
        assert_eq!(hold.iter().filter(|&&h| h).count(), 20);
        assert_eq!(train.iter().filter(|&&t| t).count(), 80);
    }

    #[test]
    fn holdout_floor_rounding() {
        let night = vec![true; 11];
        let (_, hold) = split_night_holdout(&night, 0.5, 1).unwrap();
        assert_eq!(hold.iter().filter(|&&h| h).count(), 5);
    }

    #[test]
    fn holdout_deterministic() {
        let night: Vec<bool> = (0..200).map(|i| i % 3 != 0).collect();
        assert_eq!(
            split_night_holdout(&night, 0.2, 99).unwrap(),
            split_night_holdout(&night, 0.2, 99).unwrap()
        );
        assert_ne!(
            split_night_holdout(&night, 0.2, 99).unwrap(),
            split_night_holdout(&night, 0.2, 100).unwrap()
        );
    }

    #[test]
    fn holdout_rejects_small_or_bad_input() {
        assert_eq!(
            split_night_holdout(&[true; 9], 0.2, 1),
            Err(PeriodError::TooFewNightRecords(9))
        );
        assert_eq!(
            split_night_holdout(&[true; 20], 1.0, 1),
            Err(PeriodError::BadFraction(1.0))
        );
    }
}
