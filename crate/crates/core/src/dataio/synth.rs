//! Synthetic multimodal traffic with a known causal graph among the latent
//! concepts. Attraction drives the three demand modes, taxi demand slows
//! traffic, rain suppresses cycling and pushes riders into taxis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bundle::{DatasetBundle, Splits};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphops::normalize_adjacency;
use crate::model::{Modality, CONCEPT_LABELS};

const K: usize = CONCEPT_LABELS.len();
const POI: usize = 0;
const BIKE: usize = 1;
const TAXI: usize = 2;
const BUS: usize = 3;
const SPEED: usize = 4;

/// Number of time features: sin/cos of the day and week phases.
pub const TIME_DIM: usize = 4;
/// Weather features: temperature, precipitation, wind.
pub const WEATHER_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_regions: usize,
    /// Columns of the region grid; rows follow from `num_regions`.
    pub grid_cols: usize,
    pub timesteps: usize,
    pub steps_per_day: usize,
    pub poi_dim: usize,
    pub time_dim: usize,
    pub weather_dim: usize,
    /// Strictly upper-triangular `K×K` weights in concept order.
    pub causal_weights: Vec<Vec<f64>>,
    pub precip_to_bike: f64,
    pub precip_to_taxi: f64,
    /// Std of the exogenous innovations of the attraction concept; the
    /// other concepts use half of it.
    pub innovation_std: f64,
    /// AR(1) coefficient of the innovations.
    pub innovation_persistence: f64,
    /// Observation noise as a fraction of each modality's scale.
    pub emission_noise: f64,
    /// Length scale of the distance kernel, in grid cells.
    pub graph_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut w = vec![vec![0.0; K]; K];
        w[POI][BIKE] = 0.8;
        w[POI][TAXI] = 0.6;
        w[POI][BUS] = 0.7;
        w[TAXI][SPEED] = 0.9;
        ScenarioConfig {
            num_regions: 20,
            grid_cols: 5,
            timesteps: 2000,
            steps_per_day: 48,
            poi_dim: 8,
            time_dim: TIME_DIM,
            weather_dim: WEATHER_DIM,
            causal_weights: w,
            precip_to_bike: -1.5,
            precip_to_taxi: 1.0,
            innovation_std: 0.6,
            innovation_persistence: 0.7,
            emission_noise: 0.15,
            graph_sigma: 1.5,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn cond_dim(&self) -> usize {
        self.poi_dim + self.time_dim + self.weather_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_regions == 0 || self.grid_cols == 0 {
            return bad("num_regions and grid_cols must be positive".into());
        }
        if self.steps_per_day < 2 {
            return bad("steps_per_day must be at least 2".into());
        }
        if self.timesteps < 10 {
            return bad(format!("timesteps must be at least 10, got {}", self.timesteps));
        }
        if self.poi_dim == 0 {
            return bad("poi_dim must be positive".into());
        }
        if self.time_dim != TIME_DIM {
            return bad(format!("time_dim must be {TIME_DIM}, got {}", self.time_dim));
        }
        if self.weather_dim != WEATHER_DIM {
            return bad(format!("weather_dim must be {WEATHER_DIM}, got {}", self.weather_dim));
        }
        if self.causal_weights.len() != K || self.causal_weights.iter().any(|r| r.len() != K) {
            return bad(format!("causal_weights must be {K}x{K}"));
        }
        for i in 0..K {
            for j in 0..=i {
                if self.causal_weights[i][j] != 0.0 {
                    return bad(format!(
                        "causal_weights must be strictly upper triangular, entry [{i}][{j}] = {}",
                        self.causal_weights[i][j]
                    ));
                }
            }
        }
        let finite = [
            self.precip_to_bike,
            self.precip_to_taxi,
            self.innovation_std,
            self.innovation_persistence,
            self.emission_noise,
            self.graph_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.causal_weights.iter().flatten().any(|v| !v.is_finite()) {
            return bad("scenario parameters must be finite".into());
        }
        if self.innovation_std < 0.0 || self.emission_noise < 0.0 || self.graph_sigma <= 0.0 {
            return bad("noise levels must be >= 0 and graph_sigma > 0".into());
        }
        if self.innovation_persistence.abs() >= 1.0 {
            return bad("innovation_persistence must lie in (-1, 1)".into());
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Tensor {
        let data = self.causal_weights.iter().flatten().copied().collect();
        Tensor::new(&[K, K], data).expect("K x K weights")
    }
}

/// Per-region emission parameters, fixed by the seed.
#[derive(Clone, Debug)]
pub struct Emission {
    /// `[modality][channel][region]` offsets and gains of the flow modes.
    offset: Vec<Vec<Vec<f64>>>,
    gain: Vec<Vec<Vec<f64>>>,
    size: Vec<f64>,
    base_speed: Vec<f64>,
    /// Row-normalized smoothing operator.
    smooth: Tensor,
}

/// Flow scale per demand mode (bike, taxi, bus).
const FLOW_SCALE: [f64; 3] = [20.0, 30.0, 25.0];
const SPEED_GAIN: f64 = 4.0;
const SPEED_NOISE_SCALE: f64 = 8.0;
const SPEED_MIN: f64 = 1.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Emission {
    /// Noise-free observations from latents `[T, N, K]`.
    pub fn emit(&self, latents: &Tensor) -> Vec<Tensor> {
        let s = latents.shape();
        let (t_len, n) = (s[0], s[1]);
        let mut out = Vec::new();
        for m in Modality::ALL {
            let c = m.channels();
            let mut raw = vec![0.0; t_len * n * c];
            for t in 0..t_len {
                for r in 0..n {
                    let z = latents.at(&[t, r, m.index() + 1]);
                    for ch in 0..c {
                        raw[(t * n + r) * c + ch] = match m {
                            Modality::Speed => self.base_speed[r] - SPEED_GAIN * z,
                            _ => {
                                let mi = m.index();
                                FLOW_SCALE[mi]
                                    * self.size[r]
                                    * softplus(self.offset[mi][ch][r] + self.gain[mi][ch][r] * z)
                            }
                        };
                    }
                }
            }
            // One pass of spatial smoothing.
            let mut smoothed = vec![0.0; raw.len()];
            for t in 0..t_len {
                for i in 0..n {
                    for j in 0..n {
                        let w = self.smooth.at(&[i, j]);
                        if w == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            smoothed[(t * n + i) * c + ch] += w * raw[(t * n + j) * c + ch];
                        }
                    }
                }
            }
            out.push(Tensor::new(&[t_len, n, c], smoothed).expect("emission shape"));
        }
        out
    }
}

/// Generated data plus the hidden quantities behind it.
#[derive(Clone, Debug)]
pub struct SyntheticScenario {
    pub bundle: DatasetBundle,
    /// Concept values `[T, N, K]`.
    pub latents: Tensor,
    pub emission: Emission,
}

/// Distance-kernel adjacency on a grid, thresholded at 0.1, zero diagonal.
pub fn grid_graph(n: usize, cols: usize, sigma: f64) -> Tensor {
    let mut g = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ri, ci) = ((i / cols) as f64, (i % cols) as f64);
            let (rj, cj) = ((j / cols) as f64, (j % cols) as f64);
            let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
            let w = (-d2 / (sigma * sigma)).exp();
            if w >= 0.1 {
                g.set(&[i, j], w);
            }
        }
    }
    g
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic in `config.seed`.
pub fn synth_generate(config: &ScenarioConfig) -> Result<SyntheticScenario> {
    config.validate()?;
    let n = config.num_regions;
    let t_len = config.timesteps;
    let spd = config.steps_per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Observation noise has its own stream so the latent path does not
    // depend on the noise level.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    // Static points of interest: sparse and nonnegative.
    let mut poi = vec![vec![0.0; config.poi_dim]; n];
    for row in poi.iter_mut() {
        for v in row.iter_mut() {
            if rng.random::<f64>() < 0.4 {
                *v = rng.random_range(0.2..1.5);
            }
        }
        if row.iter().all(|v| *v == 0.0) {
            let j = rng.random_range(0..config.poi_dim);
            row[j] = rng.random_range(0.2..1.5);
        }
    }
    let poi_weights: Vec<f64> = (0..config.poi_dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let attraction: Vec<f64> = poi
        .iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&poi_weights).map(|(a, b)| a * b).sum();
            0.3 + 2.0 * s / config.poi_dim as f64
        })
        .collect();
    // Morning and evening peak strength follow the first two POI kinds.
    let morning: Vec<f64> = poi.iter().map(|r| 0.5 + r[0]).collect();
    let evening: Vec<f64> = poi.iter().map(|r| 0.5 + r[1 % config.poi_dim]).collect();

    // City-wide weather.
    let mut weather = vec![[0.0; WEATHER_DIM]; t_len];
    let (mut temp_ar, mut wind, mut precip) = (0.0, 0.5, 0.0);
    let mut raining = false;
    for (t, w) in weather.iter_mut().enumerate() {
        let phase = (t % spd) as f64 / spd as f64;
        temp_ar = 0.98 * temp_ar + 0.05 * normal(&mut rng);
        let temp = 0.8 * (2.0 * std::f64::consts::PI * (phase - 0.3)).sin() + temp_ar;
        raining = if raining {
            rng.random::<f64>() >= 0.12
        } else {
            rng.random::<f64>() < 0.03
        };
        let burst = if raining { 0.5 + 0.5 * normal(&mut rng).abs() } else { 0.0 };
        precip = 0.5 * precip + 0.5 * burst;
        wind = 0.95 * wind + 0.3 * normal(&mut rng) * (1.0 - 0.95f64 * 0.95).sqrt();
        *w = [temp, precip, wind.abs()];
    }

    // Conditions [T, N, poi + time + weather].
    let cd = config.cond_dim();
    let mut cond = vec![0.0; t_len * n * cd];
    for t in 0..t_len {
        let day = (t % spd) as f64 / spd as f64;
        let week = (t % (7 * spd)) as f64 / (7 * spd) as f64;
        let tau = 2.0 * std::f64::consts::PI;
        let time = [(tau * day).sin(), (tau * day).cos(), (tau * week).sin(), (tau * week).cos()];
        for r in 0..n {
            let row = &mut cond[(t * n + r) * cd..(t * n + r + 1) * cd];
            row[..config.poi_dim].copy_from_slice(&poi[r]);
            row[config.poi_dim..config.poi_dim + TIME_DIM].copy_from_slice(&time);
            row[config.poi_dim + TIME_DIM..].copy_from_slice(&weather[t]);
        }
    }

    // Latent concepts: exogenous drive + AR innovations, then the SCM.
    let a = &config.causal_weights;
    let rho = config.innovation_persistence;
    let innov_scale = (1.0 - rho * rho).sqrt();
    let sigma: [f64; K] = [
        config.innovation_std,
        0.5 * config.innovation_std,
        0.5 * config.innovation_std,
        0.5 * config.innovation_std,
        0.5 * config.innovation_std,
    ];
    let mut u = vec![[0.0; K]; n];
    let mut latents = vec![0.0; t_len * n * K];
    for t in 0..t_len {
        let hour = 24.0 * (t % spd) as f64 / spd as f64;
        let weekday = ((t / spd) % 7) < 5;
        let day_factor = if weekday { 1.0 } else { 0.6 };
        let [temp, precip, _] = weather[t];
        for r in 0..n {
            let profile = day_factor
                * (morning[r] * (-0.5 * ((hour - 8.0) / 1.5).powi(2)).exp()
                    + evening[r] * (-0.5 * ((hour - 18.0) / 2.0).powi(2)).exp())
                + 0.2;
            let drive = [
                attraction[r] * profile - 1.0,
                0.3 * profile + config.precip_to_bike * precip + 0.2 * temp,
                0.2 * profile + config.precip_to_taxi * precip,
                0.4 * profile * day_factor,
                0.0,
            ];
            let mut z = [0.0; K];
            for j in 0..K {
                u[r][j] = rho * u[r][j] + sigma[j] * innov_scale * normal(&mut rng);
                // z_j = e_j + Σ_i A_ij z_i over parents, in causal order.
                let mut v = drive[j] + u[r][j];
                for i in 0..j {
                    v += a[i][j] * z[i];
                }
                z[j] = v;
            }
            latents[(t * n + r) * K..(t * n + r + 1) * K].copy_from_slice(&z);
        }
    }
    let latents = Tensor::new(&[t_len, n, K], latents)?;

    // Emission parameters.
    let mut offset = Vec::new();
    let mut gain = Vec::new();
    for _ in 0..3 {
        let mut o = Vec::new();
        let mut g = Vec::new();
        for _ in 0..2 {
            o.push((0..n).map(|_| rng.random_range(-0.5..0.5)).collect());
            g.push((0..n).map(|_| rng.random_range(0.8..1.2)).collect());
        }
        offset.push(o);
        gain.push(g);
    }
    let size = (0..n).map(|_| rng.random_range(0.7..1.3)).collect();
    let base_speed = (0..n).map(|_| rng.random_range(35.0..45.0)).collect();
    let graph = grid_graph(n, config.grid_cols, config.graph_sigma);
    let mut smooth = normalize_adjacency(&graph)?;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| smooth.at(&[i, j])).sum();
        for j in 0..n {
            let v = smooth.at(&[i, j]) / row_sum;
            smooth.set(&[i, j], v);
        }
    }
    let emission = Emission {
        offset,
        gain,
        size,
        base_speed,
        smooth,
    };

    let mut obs = emission.emit(&latents);
    for m in Modality::ALL {
        let std = config.emission_noise
            * match m {
                Modality::Speed => SPEED_NOISE_SCALE,
                _ => 0.5 * FLOW_SCALE[m.index()],
            };
        for v in obs[m.index()].data_mut() {
            if std > 0.0 {
                *v += std * normal(&mut noise_rng);
            }
            *v = match m {
                Modality::Speed => v.max(SPEED_MIN),
                _ => v.max(0.0),
            };
        }
    }

    let bundle = DatasetBundle {
        cond: Tensor::new(&[t_len, n, cd], cond)?,
        obs,
        graph,
        ground_truth_a: Some(config.ground_truth()),
        splits: Splits::chronological(t_len, spd),
    };
    bundle.validate()?;
    Ok(SyntheticScenario {
        bundle,
        latents,
        emission,
    })
}
