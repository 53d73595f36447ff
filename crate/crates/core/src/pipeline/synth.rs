use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::series::{StationSeries, STEP_MINUTES};
use super::DataError;

const STEPS_PER_DAY: usize = (24 * 60 / STEP_MINUTES) as usize;

/// Synthetic PV generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub days: usize,
    pub capacities: Vec<f64>,
    pub seed: u64,
    /// Couple the cloud factor across stations.
    pub shared_weather: bool,
    pub latitude_deg: f64,
    pub start: NaiveDate,
    /// Per-step persistence of the AR(1) cloud process.
    pub weather_persistence: f64,
    /// Largest fraction of clear-sky output clouds can remove.
    pub cloud_depth: f64,
    /// Noise standard deviation as a fraction of capacity.
    pub noise_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 3,
            days: 150,
            capacities: vec![5.0, 8.0, 10.0],
            seed: 42,
            shared_weather: true,
            latitude_deg: 45.0,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            weather_persistence: 0.99,
            cloud_depth: 0.6,
            noise_frac: 0.01,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<(), DataError> {
        if self.days < 2 {
            return Err(DataError::Config("synthetic data needs at least 2 days".into()));
        }
        if self.n_stations == 0 || self.capacities.len() != self.n_stations {
            return Err(DataError::Config(format!(
                "{} stations but {} capacities",
                self.n_stations,
                self.capacities.len()
            )));
        }
        if self.capacities.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(DataError::Config("capacities must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.weather_persistence) || !(0.0..=1.0).contains(&self.cloud_depth) {
            return Err(DataError::Config("persistence must be in [0, 1) and cloud depth in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sine of the solar elevation at `hour` (local solar time) on `day_of_year`,
/// with the hour angle shifted by `offset_deg`.
fn sin_elevation(latitude_deg: f64, day_of_year: u32, hour: f64, offset_deg: f64) -> f64 {
    let declination = 23.44f64.to_radians() * (2.0 * std::f64::consts::PI * (284.0 + day_of_year as f64) / 365.0).sin();
    let hour_angle = (15.0 * (hour - 12.0) + offset_deg).to_radians();
    let lat = latitude_deg.to_radians();
    lat.sin() * declination.sin() + lat.cos() * declination.cos() * hour_angle.cos()
}

/// Standard-normal AR(1) path.
fn ar1(len: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innovation = (1.0 - phi * phi).sqrt();
    let mut state: f64 = StandardNormal.sample(rng);
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            state = phi * state + innovation * e;
            state
        })
        .collect()
}

/// Clear-sky diurnal bell × seasonal trend × cloud factor + clipped noise,
/// clamped to `[0, Cap]`. Night steps are exactly zero.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<StationSeries>, DataError> {
    config.check()?;
    let len = config.days * STEPS_PER_DAY;
    let start = NaiveDateTime::from(config.start);
    let step = TimeDelta::minutes(STEP_MINUTES);
    let timestamps: Vec<NaiveDateTime> = (0..len).map(|t| start + step * t as i32).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared = ar1(len, config.weather_persistence, &mut rng);
    let coupling: f64 = if config.shared_weather { 0.9 } else { 0.0 };
    let own_weight = (1.0 - coupling * coupling).sqrt();
    let n = config.n_stations;

    let mut out = Vec::with_capacity(n);
    for (i, &cap) in config.capacities.iter().enumerate() {
        let local = ar1(len, config.weather_persistence, &mut rng);
        // small orientation differences between roofs
        let offset_deg = (i as f64 - (n as f64 - 1.0) / 2.0) * 4.0;
        let power = timestamps
            .iter()
            .enumerate()
            .map(|(t, ts)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let day = ts.ordinal();
                let hour = (t % STEPS_PER_DAY) as f64 * STEP_MINUTES as f64 / 60.0 + STEP_MINUTES as f64 / 120.0;
                let sun = sin_elevation(config.latitude_deg, day, hour, offset_deg);
                if sun <= 0.0 {
                    return 0.0;
                }
                let season = 0.95 + 0.05 * (2.0 * std::f64::consts::PI * (day as f64 - 80.0) / 365.0).sin();
                let z = coupling * shared[t] + own_weight * local[t];
                let clouds = 1.0 - config.cloud_depth / (1.0 + (-1.5 * z).exp());
                let noise = noise.clamp(-3.0, 3.0) * config.noise_frac * cap;
                (cap * 0.95 * sun * season * clouds + noise).clamp(0.0, cap)
            })
            .collect();
        out.push(StationSeries {
            station_id: format!("station_{}", i + 1),
            capacity_kw: cap,
            timestamps: timestamps.clone(),
            power,
            imputed: vec![false; len],
        });
    }
    Ok(out)
}
