//! Synthetic half-hourly site data with known evaporation and transpiration.
//!
//! Drivers follow simple diurnal and seasonal shapes. Evaporation is linear
//! in `RNET`, `VPD`, `u*` and the water temperature depth mean; transpiration
//! scales with greenness above its bare baseline and with sun elevation, so
//! it vanishes at night, in winter and before greenup.

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FluxDataset, FluxRecord, IngestError, SiteMeta, TARGET};
use crate::periods::solar_zenith;

/// Camera greenness of bare, senescent ground.
pub const GCC_BASELINE: f64 = 0.32;
pub const WATER_TEMP_GROUP: [&str; 2] = ["TW_1", "TW_2"];
pub const WATER_TEMP_MEAN: &str = "TW (mean)";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 days, got {0}")]
    TooShort(usize),
    #[error("noise_std must be finite and >= 0, got {0}")]
    BadNoise(f64),
    #[error("gap_fraction must lie in [0, 1), got {0}")]
    BadGapFraction(f64),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coefficients {
    pub intercept: f64,
    pub rnet: f64,
    pub vpd: f64,
    pub ustar: f64,
    pub tw: f64,
    /// Transpiration per unit of greenness above baseline at overhead sun.
    pub t_gcc: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            intercept: 0.2,
            rnet: 0.004,
            vpd: 0.6,
            ustar: 2.0,
            tw: 0.05,
            t_gcc: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub site_id: String,
    pub n_days: usize,
    pub seed: u64,
    /// Noise standard deviation as a fraction of the std of clean E.
    pub noise_std: f64,
    pub n_noise_features: usize,
    /// Fraction of driver values blanked out to exercise gap filling.
    pub gap_fraction: f64,
    /// First local day of the record.
    pub start: NaiveDate,
    pub latitude: f64,
    pub longitude: f64,
    pub utc_offset: f64,
    /// Defaults to 13 days after `start`.
    pub flood_start: Option<NaiveDate>,
    /// Defaults to 21 days after `start`.
    pub greenup_date: Option<NaiveDate>,
    pub coefficients: Coefficients,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            site_id: "SYN".into(),
            n_days: 30,
            seed: 0,
            noise_std: 0.05,
            n_noise_features: 3,
            gap_fraction: 0.0,
            start: NaiveDate::from_ymd_opt(2019, 2, 16).expect("valid date"),
            latitude: 38.1,
            longitude: -121.65,
            utc_offset: -8.0,
            flood_start: None,
            greenup_date: None,
            coefficients: Coefficients::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn flood_start(&self) -> NaiveDate {
        self.flood_start.unwrap_or(self.start + Duration::days(13))
    }

    pub fn greenup_date(&self) -> NaiveDate {
        self.greenup_date.unwrap_or(self.start + Duration::days(21))
    }

    pub fn meta(&self) -> SiteMeta {
        SiteMeta {
            latitude: Some(self.latitude),
            longitude: Some(self.longitude),
            utc_offset: self.utc_offset,
            flood_start: Some(self.flood_start()),
            greenup_date: Some(self.greenup_date()),
        }
    }
}

/// Side channel: per record, `(e + t) + noise == wq` exactly in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Noise-free evaporation.
    pub e: Vec<f64>,
    pub t: Vec<f64>,
    pub noise: Vec<f64>,
    /// Absolute noise standard deviation.
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSite {
    pub dataset: FluxDataset,
    pub truth: GroundTruth,
}

/// Saturation vapour pressure (kPa), Tetens.
fn es_kpa(ta: f64) -> f64 {
    0.6108 * (17.27 * ta / (ta + 237.3)).exp()
}

/// AR(1) step with unit stationary variance.
fn ar1(prev: f64, phi: f64, rng: &mut ChaCha8Rng, std_normal: &Normal<f64>) -> f64 {
    phi * prev + (1.0 - phi * phi).sqrt() * std_normal.sample(rng)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSite, SynthError> {
    if spec.n_days < 2 {
        return Err(SynthError::TooShort(spec.n_days));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(SynthError::BadNoise(spec.noise_std));
    }
    if !(0.0..1.0).contains(&spec.gap_fraction) {
        return Err(SynthError::BadGapFraction(spec.gap_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let meta = spec.meta();
    let greenup = spec.greenup_date();
    let c = spec.coefficients;
    let n = spec.n_days * 48;
    let start_local = spec.start.and_hms_opt(0, 0, 0).expect("midnight");
    let start_utc = start_local.and_utc() - Duration::seconds((spec.utc_offset * 3600.0).round() as i64);

    let mut names: Vec<String> = [
        TARGET, "RNET", "TA", "RH", "VPD", "TW_1", "TW_2", "u (mean)", "u*", "H", "WT", "GCC",
        "ER_Reichstein", "PA", "WD",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for k in 1..=spec.n_noise_features {
        names.push(format!("noise_{k}"));
    }

    let (mut cloud, mut warm, mut wind, mut press, mut wd) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut tw = 8.0;
    let mut wt = 0.3;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut clean_e = Vec::with_capacity(n);
    let mut t_true = Vec::with_capacity(n);
    let mut stamps = Vec::with_capacity(n);
    for i in 0..n {
        let ts = start_utc + Duration::minutes(30 * i as i64);
        let local = meta.local(ts);
        let day = i as f64 / 48.0;
        let hour = i as f64 % 48.0 / 2.0;
        if i % 48 == 0 {
            cloud = ar1(cloud, 0.6, &mut rng, &z);
            warm = ar1(warm, 0.8, &mut rng, &z);
        }
        wind = ar1(wind, 0.95, &mut rng, &z);
        press = ar1(press, 0.98, &mut rng, &z);
        wd = ar1(wd, 0.97, &mut rng, &z);

        let ze = solar_zenith(ts, spec.latitude, spec.longitude);
        let cz = ze.to_radians().cos().max(0.0);
        let clear = (0.85 + 0.12 * cloud).clamp(0.3, 1.0);
        let rnet = 700.0 * cz * clear - 45.0 + 6.0 * z.sample(&mut rng);
        let ta = 9.0 + 0.25 * day + 2.5 * warm
            + 5.0 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin()
            + 0.3 * z.sample(&mut rng);
        let rh = (85.0 - 2.8 * (ta - 9.0) + 4.0 * z.sample(&mut rng)).clamp(15.0, 100.0);
        let vpd = es_kpa(ta) * (1.0 - rh / 100.0);
        tw += 0.04 * (ta - tw);
        let tw1 = tw + 0.6 + 0.1 * z.sample(&mut rng);
        let tw2 = tw - 0.6 + 0.1 * z.sample(&mut rng);
        let u = (2.8 + 1.2 * wind + 0.8 * cz).max(0.2);
        let ustar = (0.09 * u + 0.03 * z.sample(&mut rng)).max(0.02);
        let h = 0.28 * rnet.max(0.0) - 8.0 + 8.0 * z.sample(&mut rng);
        wt += 0.002 * z.sample(&mut rng);
        let veg = if matches!(local.month(), 12 | 1 | 2) || local.date() < greenup {
            0.0
        } else {
            let d = (local.date() - greenup).num_days() as f64 + hour / 24.0;
            1.0 - (-d / 8.0).exp()
        };
        let gcc = GCC_BASELINE + 0.1 * veg;
        let er = 0.6 * (0.07 * (ta - 10.0)).exp() * (1.0 + 0.5 * veg) + 0.05 * z.sample(&mut rng);
        let pa = 101.3 + 0.4 * press;
        let wdir = (200.0 + 60.0 * wd).rem_euclid(360.0);

        let tw_mean = (tw1 + tw2) / 2.0;
        let e = c.intercept + c.rnet * rnet + c.vpd * vpd + c.ustar * ustar + c.tw * tw_mean;
        let t = if ze < 90.0 {
            c.t_gcc * (gcc - GCC_BASELINE) * cz
        } else {
            0.0
        };
        let mut row = vec![0.0, rnet, ta, rh, vpd, tw1, tw2, u, ustar, h, wt, gcc, er, pa, wdir];
        for _ in 0..spec.n_noise_features {
            row.push(z.sample(&mut rng));
        }
        rows.push(row);
        clean_e.push(e);
        t_true.push(t);
        stamps.push(ts);
    }

    let mean_e = clean_e.iter().sum::<f64>() / n as f64;
    let std_e = (clean_e.iter().map(|e| (e - mean_e).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sigma = spec.noise_std * std_e;
    let noise: Vec<f64> = (0..n).map(|_| sigma * z.sample(&mut rng)).collect();

    let records: Vec<FluxRecord> = (0..n)
        .map(|i| {
            let mut vals: Vec<Option<f64>> = rows[i].iter().map(|&v| Some(v)).collect();
            vals[0] = Some((clean_e[i] + t_true[i]) + noise[i]);
            if spec.gap_fraction > 0.0 {
                // Target and greenness are kept whole; other drivers get gaps.
                for v in vals.iter_mut().skip(1) {
                    if rng.random::<f64>() < spec.gap_fraction {
                        *v = None;
                    }
                }
                vals[11] = Some(rows[i][11]);
            }
            FluxRecord {
                timestamp: stamps[i],
                values: vals,
            }
        })
        .collect();
    let dataset = FluxDataset::new(&spec.site_id, names, records, meta)?;
    Ok(SyntheticSite {
        dataset,
        truth: GroundTruth {
            e: clean_e,
            t: t_true,
            noise,
            sigma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::periods::night_mask;

    #[test]
    fn thirty_days_of_half_hours() {
        let s = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(s.dataset.len(), 1440);
        assert_eq!(s.truth.e.len(), 1440);
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn night_transpiration_is_zero() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let night = night_mask(&s.dataset).unwrap();
        assert!(night.iter().any(|&b| b));
        for (i, &is_night) in night.iter().enumerate() {
            if is_night {
                assert_eq!(s.truth.t[i], 0.0);
            }
        }
        assert!(s.truth.t.iter().any(|&t| t > 0.0));
    }

    #[test]
    fn side_channel_reconstructs_target() {
        let s = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let wq = s.dataset.column(TARGET).unwrap();
        for (i, w) in wq.iter().enumerate() {
            assert_eq!((s.truth.e[i] + s.truth.t[i]) + s.truth.noise[i], w.unwrap());
        }
    }

    #[test]
    fn no_transpiration_before_greenup() {
        let spec = SyntheticSpec::default();
        let s = generate_synthetic(&spec).unwrap();
        for (r, &t) in s.dataset.records().iter().zip(&s.truth.t) {
            if spec.meta().local(r.timestamp).date() < spec.greenup_date() {
                assert_eq!(t, 0.0);
            }
        }
    }

    #[test]
    fn gaps_spare_target() {
        let spec = SyntheticSpec {
            gap_fraction: 0.1,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        assert!(s.dataset.column(TARGET).unwrap().iter().all(Option::is_some));
        assert!(s.dataset.column("TA").unwrap().iter().any(Option::is_none));
    }

    #[test]
    fn rejects_short_or_bad_specs() {
        assert!(generate_synthetic(&SyntheticSpec { n_days: 1, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { noise_std: -1.0, ..Default::default() }).is_err());
    }
}
