//! Estimating the Logit sensitivity ν from per-lane detector records.
//!
//! Two estimators: a least-squares fit of observed lane shares against Logit
//! shares over a grid of ν, and a regression of speed differences on log
//! density ratios through the origin.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Serialize, Serializer};

use crate::equilibrium::softmax;
use crate::error::{Error, Result};

pub const GRID_MIN: f64 = 17.0;
pub const GRID_MAX: f64 = 2500.0;
pub const GRID_POINTS: usize = 60;

/// Mean-lane-density bands, veh/km.
pub const DEFAULT_BANDS: [(f64, f64); 4] = [(5.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0)];

/// A fit no better than uniform shares (ν → ∞) by more than this is reported
/// as infinite.
const FLAT_SSE: f64 = 1e-6;

/// Regressor second moments below this make a pair degenerate.
const DEGENERATE_MOMENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneObservation {
    pub lane: String,
    /// veh/km
    pub density: f64,
    /// km/h
    pub speed: f64,
}

/// All lanes of one station at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorSample {
    pub station: String,
    pub timestamp: String,
    pub lanes: Vec<LaneObservation>,
}

impl DetectorSample {
    fn occupied(&self) -> impl Iterator<Item = &LaneObservation> {
        self.lanes.iter().filter(|l| l.density > 0.0)
    }

    /// Usable for estimation: at least two lanes carry traffic.
    pub fn is_usable(&self) -> bool {
        self.occupied().count() >= 2
    }

    pub fn mean_lane_density(&self) -> f64 {
        self.lanes.iter().map(|l| l.density).sum::<f64>() / self.lanes.len() as f64
    }

    fn in_band(&self, band: (f64, f64)) -> bool {
        let m = self.mean_lane_density();
        m >= band.0 && m < band.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuValue {
    Finite(f64),
    Infinite,
}

impl NuValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            NuValue::Finite(v) => Some(v),
            NuValue::Infinite => None,
        }
    }
}

impl Serialize for NuValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NuValue::Finite(v) => s.serialize_f64(*v),
            NuValue::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl std::fmt::Display for NuValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NuValue::Finite(v) => write!(f, "{v:.1}"),
            NuValue::Infinite => f.write_str("infinite"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuEstimate {
    pub nu: NuValue,
    /// Squared error per sample (grid) or mean squared residual (regression).
    pub sse: f64,
    pub sample_count: usize,
    pub density_band: (f64, f64),
}

/// `count` logarithmically spaced values from `min` to `max` inclusive.
pub fn nu_grid(min: f64, max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![min];
    }
    let (a, b) = (min.ln(), max.ln());
    (0..count)
        .map(|k| {
            if k == count - 1 {
                max
            } else {
                (a + (b - a) * k as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

pub fn default_grid() -> Vec<f64> {
    nu_grid(GRID_MIN, GRID_MAX, GRID_POINTS)
}

fn band_samples(samples: &[DetectorSample], band: (f64, f64)) -> Vec<&DetectorSample> {
    samples
        .iter()
        .filter(|s| s.is_usable() && s.in_band(band))
        .collect()
}

fn sample_sse(sample: &DetectorSample, nu: f64, scratch: &mut Vec<f64>) -> f64 {
    let total: f64 = sample.lanes.iter().map(|l| l.density).sum();
    let speeds: Vec<f64> = sample.lanes.iter().map(|l| l.speed).collect();
    scratch.resize(speeds.len(), 0.0);
    softmax(&speeds, nu, scratch);
    sample
        .lanes
        .iter()
        .zip(scratch.iter())
        .map(|(l, p)| (l.density / total - p).powi(2))
        .sum()
}

/// Squared share error per sample at every grid ν.
pub fn sse_curve(samples: &[DetectorSample], band: (f64, f64), grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let used = band_samples(samples, band);
    if used.is_empty() {
        return Err(Error::Estimation(format!(
            "no usable samples with mean lane density in [{}, {})",
            band.0, band.1
        )));
    }
    let mut scratch = Vec::new();
    Ok(grid
        .iter()
        .map(|&nu| {
            let total: f64 = used.iter().map(|s| sample_sse(s, nu, &mut scratch)).sum();
            (nu, total / used.len() as f64)
        })
        .collect())
}

/// Grid value of ν minimising the share error; infinite when uniform shares
/// fit as well as the best grid value.
pub fn estimate_nu_grid(samples: &[DetectorSample], band: (f64, f64), grid: &[f64]) -> Result<NuEstimate> {
    if grid.is_empty() || grid.iter().any(|&nu| !(nu > 0.0)) {
        return Err(Error::Estimation("grid values must be positive".into()));
    }
    let curve = sse_curve(samples, band, grid)?;
    let (best_nu, best) = curve
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |acc, (nu, e)| if e < acc.1 { (nu, e) } else { acc });
    let used = band_samples(samples, band);
    let uniform = used.iter().map(|s| uniform_sse(s)).sum::<f64>() / used.len() as f64;
    let nu = if uniform - best <= FLAT_SSE {
        NuValue::Infinite
    } else {
        NuValue::Finite(best_nu)
    };
    Ok(NuEstimate {
        nu,
        sse: best,
        sample_count: used.len(),
        density_band: band,
    })
}

fn uniform_sse(sample: &DetectorSample) -> f64 {
    let total: f64 = sample.lanes.iter().map(|l| l.density).sum();
    let p = 1.0 / sample.lanes.len() as f64;
    sample.lanes.iter().map(|l| (l.density / total - p).powi(2)).sum()
}

/// Fit of `v_a − v_b` against `ln(ρ_a/ρ_b)` for one lane pair (or all pairs
/// pooled, with `lanes = None`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFit {
    pub lanes: Option<(String, String)>,
    /// Slope through the origin.
    pub estimate: NuEstimate,
    /// Ordinary least squares with intercept, for diagnostics.
    pub slope_with_intercept: Option<f64>,
    pub intercept: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionReport {
    pub pooled: PairFit,
    pub pairs: Vec<PairFit>,
}

fn fit_pairs(points: &[(f64, f64)], band: (f64, f64), samples: usize, lanes: Option<(String, String)>) -> PairFit {
    let n = points.len() as f64;
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let (nu, sse) = if points.is_empty() || sxx / n < DEGENERATE_MOMENT {
        let mse = points.iter().map(|(_, y)| y * y).sum::<f64>() / n.max(1.0);
        (NuValue::Infinite, mse)
    } else {
        let slope = sxy / sxx;
        let mse = points.iter().map(|(x, y)| (y - slope * x).powi(2)).sum::<f64>() / n;
        // a non-positive slope has no Logit reading
        (if slope > 0.0 { NuValue::Finite(slope) } else { NuValue::Infinite }, mse)
    };
    let (slope_with_intercept, intercept) = if points.len() >= 2 {
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let vxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        if vxx / n < DEGENERATE_MOMENT {
            (None, None)
        } else {
            let b = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / vxx;
            (Some(b), Some(my - b * mx))
        }
    } else {
        (None, None)
    };
    PairFit {
        lanes,
        estimate: NuEstimate {
            nu,
            sse,
            sample_count: samples,
            density_band: band,
        },
        slope_with_intercept,
        intercept,
    }
}

/// Regression estimate of ν per lane pair and pooled over pairs, from the
/// usable samples in `band`.
pub fn estimate_nu_regression(samples: &[DetectorSample], band: (f64, f64)) -> Result<RegressionReport> {
    let used = band_samples(samples, band);
    if used.is_empty() {
        return Err(Error::Estimation(format!(
            "no usable samples with mean lane density in [{}, {})",
            band.0, band.1
        )));
    }
    let mut by_pair: BTreeMap<(String, String), (Vec<(f64, f64)>, usize)> = BTreeMap::new();
    let mut pooled = Vec::new();
    for s in &used {
        let mut occupied: Vec<&LaneObservation> = s.occupied().collect();
        occupied.sort_by(|a, b| a.lane.cmp(&b.lane));
        for (k, a) in occupied.iter().enumerate() {
            for b in &occupied[k + 1..] {
                let point = ((a.density / b.density).ln(), a.speed - b.speed);
                let entry = by_pair.entry((a.lane.clone(), b.lane.clone())).or_default();
                entry.0.push(point);
                entry.1 += 1;
                pooled.push(point);
            }
        }
    }
    let pairs = by_pair
        .into_iter()
        .map(|(lanes, (points, n))| fit_pairs(&points, band, n, Some(lanes)))
        .collect();
    Ok(RegressionReport {
        pooled: fit_pairs(&pooled, band, used.len(), None),
        pairs,
    })
}

/// Reads the long format `station,timestamp,lane,density,speed`; rows of one
/// station and timestamp form a sample. Samples keep first-appearance order.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<DetectorSample>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let expected = ["station", "timestamp", "lane", "density", "speed"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Record {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut samples: Vec<DetectorSample> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in csv.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Record { line, message };
        if row.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", row.len())));
        }
        let number = |k: usize, what: &str| -> Result<f64> {
            let v: f64 = row[k]
                .parse()
                .map_err(|_| bad(format!("{what} {:?} is not a number", &row[k])))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("{what} must be finite and non-negative, got {v}")));
            }
            Ok(v)
        };
        let density = number(3, "density")?;
        let speed = number(4, "speed")?;
        let key = (row[0].to_string(), row[1].to_string());
        let k = *index.entry(key.clone()).or_insert_with(|| {
            samples.push(DetectorSample {
                station: key.0.clone(),
                timestamp: key.1.clone(),
                lanes: Vec::new(),
            });
            samples.len() - 1
        });
        if samples[k].lanes.iter().any(|l| l.lane == row[2]) {
            return Err(bad(format!("lane {} repeated for {} at {}", &row[2], key.0, key.1)));
        }
        samples[k].lanes.push(LaneObservation {
            lane: row[2].to_string(),
            density,
            speed,
        });
    }
    if samples.is_empty() {
        return Err(Error::Estimation("no detector records".into()));
    }
    if !samples.iter().any(|s| s.lanes.len() >= 2) {
        return Err(Error::Estimation("insufficient lanes: every record has a single lane".into()));
    }
    Ok(samples)
}

pub fn write_samples<W: Write>(writer: W, samples: &[DetectorSample]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["station", "timestamp", "lane", "density", "speed"])?;
    for s in samples {
        for l in &s.lanes {
            csv.write_record([
                s.station.as_str(),
                s.timestamp.as_str(),
                l.lane.as_str(),
                &l.density.to_string(),
                &l.speed.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Synthetic detector data drawn from the Logit model with θ = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub nu: f64,
    pub lanes: usize,
    pub samples: usize,
    /// Lane speeds are uniform on this range, km/h.
    pub speed_range: (f64, f64),
    /// Mean lane density is uniform on this range, veh/km.
    pub density_range: (f64, f64),
    /// Standard deviation of the multiplicative Gaussian noise on reported
    /// speeds; densities stay exact.
    pub speed_noise: f64,
    pub seed: u64,
    pub station: String,
}

impl SyntheticConfig {
    pub fn new(nu: f64, seed: u64) -> Self {
        SyntheticConfig {
            nu,
            lanes: 2,
            samples: 400,
            speed_range: (30.0, 110.0),
            density_range: (5.0, 40.0),
            speed_noise: 0.0,
            seed,
            station: "SYN".into(),
        }
    }
}

pub fn synthetic_samples(cfg: &SyntheticConfig) -> Result<Vec<DetectorSample>> {
    if cfg.lanes < 2 {
        return Err(Error::invalid("synthetic.lanes", "at least two lanes required"));
    }
    if !(cfg.nu > 0.0) || !(cfg.speed_noise >= 0.0) {
        return Err(Error::invalid("synthetic", "nu must be positive and noise non-negative"));
    }
    let noise = Normal::new(0.0, cfg.speed_noise)
        .map_err(|e| Error::invalid("synthetic.speed_noise", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shares = vec![0.0; cfg.lanes];
    Ok((0..cfg.samples)
        .map(|k| {
            let speeds: Vec<f64> = (0..cfg.lanes)
                .map(|_| rng.random_range(cfg.speed_range.0..=cfg.speed_range.1))
                .collect();
            let mean = rng.random_range(cfg.density_range.0..=cfg.density_range.1);
            softmax(&speeds, cfg.nu, &mut shares);
            let total = mean * cfg.lanes as f64;
            let lanes = speeds
                .iter()
                .zip(&shares)
                .enumerate()
                .map(|(i, (&v, &p))| LaneObservation {
                    lane: format!("{}", i + 1),
                    density: total * p,
                    speed: v * (1.0 + noise.sample(&mut rng)),
                })
                .collect();
            DetectorSample {
                station: cfg.station.clone(),
                timestamp: format!("{k:05}"),
                lanes,
            }
        })
        .collect())
}

/// Both estimators for one station and density band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandReport {
    pub band: (f64, f64),
    pub sample_count: usize,
    pub grid: Option<NuEstimate>,
    pub regression: Option<RegressionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationReport {
    pub station: String,
    pub bands: Vec<BandReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationReport {
    pub grid: Vec<f64>,
    pub stations: Vec<StationReport>,
    /// `(station, band, ν, sse)` for every band with data.
    #[serde(skip)]
    pub curves: Vec<(String, (f64, f64), f64, f64)>,
}

/// Runs both estimators for every station (sorted by name) and band. Bands
/// without usable samples are reported empty.
pub fn estimate_report(samples: &[DetectorSample], bands: &[(f64, f64)], grid: &[f64]) -> Result<EstimationReport> {
    let mut stations: BTreeMap<&str, Vec<DetectorSample>> = BTreeMap::new();
    for s in samples {
        stations.entry(s.station.as_str()).or_default().push(s.clone());
    }
    if !samples.iter().any(DetectorSample::is_usable) {
        return Err(Error::Estimation(
            "insufficient lanes: no record has two lanes with positive density".into(),
        ));
    }
    let mut curves = Vec::new();
    let mut out = Vec::new();
    for (station, data) in stations {
        let mut reports = Vec::new();
        for &band in bands {
            let count = band_samples(&data, band).len();
            if count == 0 {
                reports.push(BandReport {
                    band,
                    sample_count: 0,
                    grid: None,
                    regression: None,
                });
                continue;
            }
            for (nu, e) in sse_curve(&data, band, grid)? {
                curves.push((station.to_string(), band, nu, e));
            }
            reports.push(BandReport {
                band,
                sample_count: count,
                grid: Some(estimate_nu_grid(&data, band, grid)?),
                regression: Some(estimate_nu_regression(&data, band)?),
            });
        }
        out.push(StationReport {
            station: station.to_string(),
            bands: reports,
        });
    }
    Ok(EstimationReport {
        grid: grid.to_vec(),
        stations: out,
        curves,
    })
}

pub fn write_sse_curves<W: Write>(writer: W, report: &EstimationReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["station", "band_low", "band_high", "nu", "sse"])?;
    for (station, band, nu, e) in &report.curves {
        csv.write_record([
            station.as_str(),
            &band.0.to_string(),
            &band.1.to_string(),
            &nu.to_string(),
            &e.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(lanes: &[(f64, f64)]) -> DetectorSample {
        DetectorSample {
            station: "S".into(),
            timestamp: "0".into(),
            lanes: lanes
                .iter()
                .enumerate()
                .map(|(i, &(density, speed))| LaneObservation {
                    lane: format!("{}", i + 1),
                    density,
                    speed,
                })
                .collect(),
        }
    }

    const ALL: (f64, f64) = (0.0, f64::INFINITY);

    #[test]
    fn grid_has_pinned_ends() {
        let g = default_grid();
        assert_eq!(g.len(), 60);
        assert_eq!(g[0], 17.0);
        assert_eq!(g[59], 2500.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn equal_densities_fit_infinite_nu() {
        let data: Vec<_> = (0..20).map(|k| sample(&[(10.0, 40.0 + k as f64 * 3.0), (10.0, 60.0)])).collect();
        assert_eq!(estimate_nu_grid(&data, ALL, &default_grid()).unwrap().nu, NuValue::Infinite);
    }

    #[test]
    fn faster_denser_lane_gives_finite_nu() {
        let data: Vec<_> = (0..20)
            .map(|k| sample(&[(14.0 + k as f64 * 0.1, 90.0), (6.0, 60.0)]))
            .collect();
        let grid = default_grid();
        let est = estimate_nu_grid(&data, ALL, &grid).unwrap();
        assert!(est.nu.finite().is_some());
        let curve = sse_curve(&data, ALL, &grid).unwrap();
        assert!(est.sse < curve.last().unwrap().1);
    }

    #[test]
    fn identical_lanes_make_regression_degenerate() {
        let data: Vec<_> = (0..10).map(|_| sample(&[(10.0, 50.0), (10.0, 50.0)])).collect();
        let r = estimate_nu_regression(&data, ALL).unwrap();
        assert_eq!(r.pooled.estimate.nu, NuValue::Infinite);
        assert_eq!(r.pairs[0].estimate.nu, NuValue::Infinite);
    }

    #[test]
    fn noiseless_regression_is_exact() {
        let data = synthetic_samples(&SyntheticConfig::new(20.0, 3)).unwrap();
        let r = estimate_nu_regression(&data, ALL).unwrap();
        let nu = r.pooled.estimate.nu.finite().unwrap();
        assert!((nu - 20.0).abs() < 1e-9, "{nu}");
        assert!(r.pooled.intercept.map_or(true, |b| b.abs() < 1e-6));
    }

    #[test]
    fn empty_band_is_an_error() {
        let data = vec![sample(&[(1.0, 50.0), (1.0, 60.0)])];
        assert!(estimate_nu_grid(&data, (5.0, 10.0), &default_grid()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let data = synthetic_samples(&SyntheticConfig {
            samples: 5,
            lanes: 3,
            ..SyntheticConfig::new(30.0, 1)
        })
        .unwrap();
        let mut buf = Vec::new();
        write_samples(&mut buf, &data).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "station,timestamp,lane,density,speed\nS,0,1,10,50\nS,0,2,abc,60\n";
        match read_samples(text.as_bytes()).unwrap_err() {
            Error::Record { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(read_samples("station,timestamp,lane,density,speed\n".as_bytes()).is_err());
        let single = "station,timestamp,lane,density,speed\nS,0,1,10,50\nS,1,1,12,40\n";
        let err = read_samples(single.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("insufficient lanes"), "{err}");
    }
}
