//! Benchmark construction: linearized buoyancy, the causal exponential
//! low-pass filter for vertical velocity, and a synthetic coupled-field
//! generator with the same schema as the real benchmark.
//!
//! # Synthetic generator
//!
//! The series is cut into independent episodes of `episode_length` steps; each
//! episode draws its own modes and eddies. Within an episode, surface fields
//! are built on a periodic `H x W` grid from three ingredients: slowly
//! drifting spectral modes (random integer wavevectors, amplitude
//! `|k|^(-slope/2)`, random phase and angular frequency), Gaussian eddies that
//! translate at constant velocity, and fixed physical scalings:
//!
//! ```text
//! SSH = 0.1 m · (η_modes + η_eddies)
//! U   = -G · ∂y SSH + 0.1 m/s · ∂x χ        V = G · ∂x SSH + 0.1 m/s · ∂y χ
//! SST = T0 + 1.5 K · (θ_modes + 0.6 · η_eddies)
//! SSS = S0 + 0.3 psu · s_modes
//! B   = buoyancy(SST, SSS)
//! ```
//!
//! with `G = 10 (m/s)/m` per grid cell. All derivatives are periodic central
//! differences in grid units (`∂x f = (f[x+1] - f[x-1]) / 2`, 5-point
//! Laplacian). The raw vertical velocity at depth level `d` is
//!
//! ```text
//! w_raw[d] = w_scale · a[d] · Σ_i c[d][i] · T_i / s_i  +  noise
//! T1 = ∇²SSH            T2 = -(∂x U + ∂y V)     T3 = ∇²B
//! T4 = ∂x SSH ∂y B - ∂y SSH ∂x B                T5 = ζ · δ
//! ```
//!
//! where `ζ = ∂x V - ∂y U`, `δ = ∂x U + ∂y V`, `a` are depth attenuations,
//! `c` the coupling table and `s` fixed term scales. The noise is a spectral
//! field with fresh random phases at every step (white in time). The stored
//! target is `lowpass_w(w_raw)`, applied separately to each episode. Every
//! episode first runs `L - 1` unsaved spin-up steps, so each stored target is
//! filtered over a full window. The functional is evaluated on the surface
//! fields after rounding to `f32`, so it can be re-evaluated exactly from a
//! written dataset.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{FieldSample, VariableUniverse};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Revision of the generator formula, recorded in dataset provenance.
pub const GENERATOR_VERSION: &str = "synth-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuoyancyParams {
    /// Gravitational acceleration, m/s².
    pub g: f64,
    /// Thermal expansion coefficient, 1/K.
    pub alpha_t: f64,
    /// Haline contraction coefficient, 1/psu.
    pub beta_s: f64,
    /// Reference temperature, K.
    pub t0: f64,
    /// Reference salinity, psu.
    pub s0: f64,
}

impl Default for BuoyancyParams {
    fn default() -> Self {
        BuoyancyParams {
            g: 9.81,
            alpha_t: 2e-4,
            beta_s: 7.6e-4,
            t0: 288.15,
            s0: 35.0,
        }
    }
}

impl BuoyancyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0 && self.alpha_t > 0.0 && self.beta_s > 0.0) {
            return Err(Error::Config("buoyancy needs g, alpha_t and beta_s > 0".into()));
        }
        Ok(())
    }
}

/// `b = g·[α_T·(SST − T0) − β_S·(SSS − S0)]`, elementwise.
pub fn buoyancy<T: Real>(sst: &Tensor<T>, sss: &Tensor<T>, p: &BuoyancyParams) -> Result<Tensor<T>> {
    p.validate()?;
    if sst.shape() != sss.shape() {
        return Err(Error::Shape(format!("SST {:?} vs SSS {:?}", sst.shape(), sss.shape())));
    }
    let (g, a, b, t0, s0) = (T::lit(p.g), T::lit(p.alpha_t), T::lit(p.beta_s), T::lit(p.t0), T::lit(p.s0));
    let data = sst
        .data()
        .iter()
        .zip(sss.data())
        .map(|(&t, &s)| g * (a * (t - t0) - b * (s - s0)))
        .collect();
    Tensor::from_vec(sst.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Window length in samples.
    pub window: usize,
    /// Rescale the (possibly truncated) window weights to sum to one.
    pub normalize_weights: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            window: 8,
            normalize_weights: false,
        }
    }
}

/// Causal exponential low-pass filter over time.
///
/// `out[t] = Σ_{j=0}^{min(L−1, t)} (1/L)·e^{−j/L} · series[t−j]`; the window is
/// truncated to the available history at startup. With `normalize_weights`,
/// the weights actually used at each step are rescaled to sum to one.
pub fn lowpass_w<T: Real>(series: &[Tensor<T>], p: &FilterParams) -> Result<Vec<Tensor<T>>> {
    if p.window < 1 {
        return Err(Error::Config("filter window must be at least 1".into()));
    }
    let Some(first) = series.first() else {
        return Err(Error::Data("cannot filter an empty series".into()));
    };
    if let Some(bad) = series.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Shape(format!("series mixes shapes {:?} and {:?}", first.shape(), bad.shape())));
    }
    let l = p.window as f64;
    let weights: Vec<f64> = (0..p.window).map(|j| (-(j as f64) / l).exp() / l).collect();
    Ok((0..series.len())
        .map(|t| {
            let taps = &weights[..(t + 1).min(p.window)];
            if p.normalize_weights {
                // x_t + Σ ŵ_j (x_{t-j} - x_t): the same weighted mean, exact on constant input
                let norm: f64 = taps.iter().sum();
                let mut out = series[t].clone();
                for (j, &wt) in taps.iter().enumerate().skip(1) {
                    let scale = T::lit(wt / norm);
                    for ((o, &past), &now) in out.data_mut().iter_mut().zip(series[t - j].data()).zip(series[t].data()) {
                        *o += scale * (past - now);
                    }
                }
                return out;
            }
            let mut out = Tensor::zeros(first.shape());
            for (j, &wt) in taps.iter().enumerate() {
                out.add_scaled(&series[t - j], T::lit(wt));
            }
            out
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Number of time steps to generate.
    pub steps: usize,
    /// Steps per independent episode; the last episode may be shorter.
    pub episode_length: usize,
    pub seed: u64,
    /// Power-spectrum slope of the modal fields (amplitude ∝ |k|^(−slope/2)).
    pub spectral_slope: f64,
    pub n_modes: usize,
    pub n_eddies: usize,
    /// Largest modal angular frequency, rad per step.
    pub max_frequency: f64,
    /// Largest eddy translation speed, cells per step.
    pub eddy_speed: f64,
    /// Per-depth weights of the five terms `T1..T5`.
    pub coupling: [[f64; 5]; 3],
    /// Per-depth amplitude factors.
    pub depth_attenuation: [f64; 3],
    /// Fixed divisors bringing each term to order one.
    pub term_scales: [f64; 5],
    /// Noise amplitude relative to `w_scale`.
    pub noise_amplitude: f64,
    /// Vertical velocity scale, m/s.
    pub w_scale: f64,
    pub filter: FilterParams,
    pub buoyancy: BuoyancyParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            steps: 704,
            episode_length: 16,
            seed: 0,
            spectral_slope: 3.0,
            n_modes: 40,
            n_eddies: 6,
            max_frequency: 0.05,
            eddy_speed: 0.15,
            coupling: [
                [1.0, 1.0, 0.8, 0.6, 0.5],
                [1.0, 0.9, 0.9, 0.5, 0.4],
                [1.0, 0.8, 1.0, 0.4, 0.3],
            ],
            depth_attenuation: [1.0, 0.6, 0.35],
            term_scales: [2.0e-2, 1.7e-2, 6.5e-4, 2.6e-5, 3.2e-3],
            noise_amplitude: 0.5,
            w_scale: 1e-4,
            filter: FilterParams::default(),
            buoyancy: BuoyancyParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "synthetic grid must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("synthetic series needs at least one step".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be at least 1".into()));
        }
        if self.filter.window < 1 {
            return Err(Error::Config("filter window must be at least 1".into()));
        }
        if self.term_scales.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("term scales must be positive".into()));
        }
        if !(self.noise_amplitude >= 0.0 && self.w_scale > 0.0) {
            return Err(Error::Config("noise amplitude must be >= 0 and w_scale > 0".into()));
        }
        self.buoyancy.validate()
    }
}

const SSH_AMPLITUDE: f64 = 0.1;
const GEOSTROPHIC_GAIN: f64 = 10.0;
const DIVERGENT_AMPLITUDE: f64 = 0.1;
const SST_AMPLITUDE: f64 = 1.5;
const SST_EDDY_COUPLING: f64 = 0.6;
const SSS_AMPLITUDE: f64 = 0.3;

#[derive(Clone, Debug)]
struct Mode {
    kx: f64,
    ky: f64,
    amp: f64,
    phase: f64,
    freq: f64,
}

fn draw_modes(rng: &mut ChaCha8Rng, cfg: &SynthConfig, with_freq: bool) -> Vec<Mode> {
    let n_max = (cfg.height.min(cfg.width) / 6).max(2) as i64;
    let mut modes: Vec<Mode> = (0..cfg.n_modes)
        .map(|_| {
            let (nx, ny) = loop {
                let nx = rng.random_range(-n_max..=n_max);
                let ny = rng.random_range(-n_max..=n_max);
                let r2 = nx * nx + ny * ny;
                if r2 >= 1 && r2 <= n_max * n_max {
                    break (nx, ny);
                }
            };
            let k = ((nx * nx + ny * ny) as f64).sqrt();
            Mode {
                kx: 2.0 * PI * nx as f64 / cfg.width as f64,
                ky: 2.0 * PI * ny as f64 / cfg.height as f64,
                amp: k.powf(-cfg.spectral_slope / 2.0),
                phase: rng.random_range(0.0..2.0 * PI),
                freq: if with_freq {
                    rng.random_range(-cfg.max_frequency..=cfg.max_frequency)
                } else {
                    0.0
                },
            }
        })
        .collect();
    // unit variance: Σ amp²/2 = 1
    let var: f64 = modes.iter().map(|m| m.amp * m.amp / 2.0).sum();
    if var > 0.0 {
        let s = var.sqrt().recip();
        modes.iter_mut().for_each(|m| m.amp *= s);
    }
    modes
}

fn modal_field(modes: &[Mode], t: f64, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for m in modes {
        let cx: Vec<(f64, f64)> = (0..w).map(|x| ((m.kx * x as f64).cos(), (m.kx * x as f64).sin())).collect();
        for y in 0..h {
            let arg = m.ky * y as f64 + m.phase + m.freq * t;
            let (cy, sy) = (arg.cos(), arg.sin());
            let row = &mut out[y * w..(y + 1) * w];
            for (v, &(c, s)) in row.iter_mut().zip(&cx) {
                *v += m.amp * (c * cy - s * sy);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Eddy {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    amp: f64,
}

fn eddy_field(eddies: &[Eddy], t: f64, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let wrap = |d: f64, size: f64| d - size * (d / size).round();
    for e in eddies {
        let cy = (e.y + e.vy * t).rem_euclid(h as f64);
        let cx = (e.x + e.vx * t).rem_euclid(w as f64);
        let inv = 1.0 / (2.0 * e.radius * e.radius);
        for y in 0..h {
            let dy = wrap(y as f64 - cy, h as f64);
            for x in 0..w {
                let dx = wrap(x as f64 - cx, w as f64);
                out[y * w + x] += e.amp * (-(dy * dy + dx * dx) * inv).exp();
            }
        }
    }
    out
}

/// Periodic central-difference operators on an `h x w` grid.
struct Grid2 {
    h: usize,
    w: usize,
}

impl Grid2 {
    fn at(&self, f: &[f64], y: isize, x: isize) -> f64 {
        let y = y.rem_euclid(self.h as isize) as usize;
        let x = x.rem_euclid(self.w as isize) as usize;
        f[y * self.w + x]
    }

    fn map(&self, op: impl Fn(isize, isize) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                out.push(op(y, x));
            }
        }
        out
    }

    fn dx(&self, f: &[f64]) -> Vec<f64> {
        self.map(|y, x| 0.5 * (self.at(f, y, x + 1) - self.at(f, y, x - 1)))
    }

    fn dy(&self, f: &[f64]) -> Vec<f64> {
        self.map(|y, x| 0.5 * (self.at(f, y + 1, x) - self.at(f, y - 1, x)))
    }

    fn lap(&self, f: &[f64]) -> Vec<f64> {
        self.map(|y, x| {
            self.at(f, y + 1, x) + self.at(f, y - 1, x) + self.at(f, y, x + 1) + self.at(f, y, x - 1)
                - 4.0 * self.at(f, y, x)
        })
    }
}

/// Surface fields in physical units on an `[H,W]` grid.
#[derive(Clone, Debug)]
pub struct SurfaceFields {
    pub ssh: Tensor<f64>,
    pub u: Tensor<f64>,
    pub v: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl SurfaceFields {
    /// Reads `SSH`, `U`, `V`, `B` from a sample.
    pub fn from_sample(sample: &FieldSample) -> Result<SurfaceFields> {
        let get = |name: &str| {
            sample
                .surface
                .get(name)
                .map(|g| g.cast::<f64>())
                .ok_or_else(|| Error::Data(format!("sample lacks {name}")))
        };
        Ok(SurfaceFields {
            ssh: get("SSH")?,
            u: get("U")?,
            v: get("V")?,
            b: get("B")?,
        })
    }
}

/// The five raw terms `T1..T5`, each `[H,W]`, in grid units.
pub fn functional_terms(s: &SurfaceFields) -> [Vec<f64>; 5] {
    let shape = s.ssh.shape();
    let g = Grid2 {
        h: shape[0],
        w: shape[1],
    };
    let (ssh, u, v, b) = (s.ssh.data(), s.u.data(), s.v.data(), s.b.data());
    let (ux, uy, vx, vy) = (g.dx(u), g.dy(u), g.dx(v), g.dy(v));
    let (hx, hy, bx, by) = (g.dx(ssh), g.dy(ssh), g.dx(b), g.dy(b));
    let n = ssh.len();
    let div: Vec<f64> = (0..n).map(|i| ux[i] + vy[i]).collect();
    let t1 = g.lap(ssh);
    let t2 = div.iter().map(|d| -d).collect();
    let t3 = g.lap(b);
    let t4 = (0..n).map(|i| hx[i] * by[i] - hy[i] * bx[i]).collect();
    let t5 = (0..n).map(|i| (vx[i] - uy[i]) * div[i]).collect();
    [t1, t2, t3, t4, t5]
}

/// Noise-free raw vertical velocity `[C,H,W]` (m/s) implied by the surface fields.
pub fn surface_functional(s: &SurfaceFields, cfg: &SynthConfig) -> Tensor<f64> {
    let terms = functional_terms(s);
    let shape = s.ssh.shape();
    let n = shape[0] * shape[1];
    let mut out = Vec::with_capacity(3 * n);
    for d in 0..3 {
        let gain = cfg.w_scale * cfg.depth_attenuation[d];
        for i in 0..n {
            let acc: f64 = (0..5)
                .map(|k| cfg.coupling[d][k] * terms[k][i] / cfg.term_scales[k])
                .sum();
            out.push(gain * acc);
        }
    }
    Tensor::from_vec(&[3, shape[0], shape[1]], out).expect("functional dims")
}

/// Generator output: the samples plus the oracle quantities behind them.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub samples: Vec<FieldSample>,
    /// Noise-free functional per stored sample, `[3,H,W]` m/s.
    pub w_clean: Vec<Tensor<f64>>,
    /// Functional plus noise per stored sample, before filtering.
    pub w_raw: Vec<Tensor<f64>>,
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Modes and eddies shared by the steps of one episode.
struct Episode {
    eta: Vec<Mode>,
    chi: Vec<Mode>,
    theta: Vec<Mode>,
    salt: Vec<Mode>,
    eddies: Vec<Eddy>,
}

impl Episode {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Episode {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let eta = draw_modes(rng, cfg, true);
        let chi = draw_modes(rng, cfg, true);
        let theta = draw_modes(rng, cfg, true);
        let salt = draw_modes(rng, cfg, true);
        let eddies = (0..cfg.n_eddies)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Eddy {
                    y: rng.random_range(0.0..h),
                    x: rng.random_range(0.0..w),
                    vy: rng.random_range(-cfg.eddy_speed..=cfg.eddy_speed),
                    vx: rng.random_range(-cfg.eddy_speed..=cfg.eddy_speed),
                    radius: rng.random_range(2.5..6.0),
                    amp: sign * rng.random_range(0.5..1.0),
                }
            })
            .collect();
        Episode {
            eta,
            chi,
            theta,
            salt,
            eddies,
        }
    }

    fn surface(&self, tf: f64, cfg: &SynthConfig) -> Result<SurfaceFields> {
        let (h, w) = (cfg.height, cfg.width);
        let grid = Grid2 { h, w };
        let eddy = eddy_field(&self.eddies, tf, h, w);
        let eta: Vec<f64> = modal_field(&self.eta, tf, h, w)
            .iter()
            .zip(&eddy)
            .map(|(a, e)| SSH_AMPLITUDE * (a + e))
            .collect();
        let chi = modal_field(&self.chi, tf, h, w);
        let (chi_x, chi_y) = (grid.dx(&chi), grid.dy(&chi));
        let (eta_x, eta_y) = (grid.dx(&eta), grid.dy(&eta));
        let u: Vec<f64> = (0..h * w)
            .map(|i| -GEOSTROPHIC_GAIN * eta_y[i] + DIVERGENT_AMPLITUDE * chi_x[i])
            .collect();
        let v: Vec<f64> = (0..h * w)
            .map(|i| GEOSTROPHIC_GAIN * eta_x[i] + DIVERGENT_AMPLITUDE * chi_y[i])
            .collect();
        let sst: Vec<f64> = modal_field(&self.theta, tf, h, w)
            .iter()
            .zip(&eddy)
            .map(|(a, e)| cfg.buoyancy.t0 + SST_AMPLITUDE * (a + SST_EDDY_COUPLING * e))
            .collect();
        let sss: Vec<f64> = modal_field(&self.salt, tf, h, w)
            .iter()
            .map(|a| cfg.buoyancy.s0 + SSS_AMPLITUDE * a)
            .collect();
        let b = buoyancy(
            &Tensor::from_vec(&[h, w], sst)?,
            &Tensor::from_vec(&[h, w], sss)?,
            &cfg.buoyancy,
        )?;
        Ok(SurfaceFields {
            ssh: Tensor::from_vec(&[h, w], round_f32(eta))?,
            u: Tensor::from_vec(&[h, w], round_f32(u))?,
            v: Tensor::from_vec(&[h, w], round_f32(v))?,
            b: Tensor::from_vec(&[h, w], round_f32(b.into_data()))?,
        })
    }
}

/// Deterministic synthetic dataset for the default `SSH, U, V, B` universe.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.steps);
    let mut w_clean = Vec::with_capacity(cfg.steps);
    let mut w_raw = Vec::with_capacity(cfg.steps);
    let mut targets = Vec::with_capacity(cfg.steps);

    let spin_up = cfg.filter.window - 1;
    for (ep, first) in (0..cfg.steps).step_by(cfg.episode_length).enumerate() {
        let episode = Episode::draw(&mut rng, cfg);
        let kept = (cfg.steps - first).min(cfg.episode_length);
        let mut episode_raw = Vec::with_capacity(spin_up + kept);
        for k in 0..spin_up + kept {
            let fields = episode.surface(k as f64, cfg)?;
            let clean = surface_functional(&fields, cfg);
            let mut raw = clean.clone();
            if cfg.noise_amplitude > 0.0 {
                let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_6500_0000);
                noise_rng.set_stream(((ep as u64) << 32) | k as u64);
                for d in 0..3 {
                    let modes = draw_modes(&mut noise_rng, cfg, false);
                    let noise = modal_field(&modes, 0.0, h, w);
                    for (r, n) in raw.channel_mut(d).iter_mut().zip(noise) {
                        *r += cfg.noise_amplitude * cfg.w_scale * n;
                    }
                }
            }
            if k >= spin_up {
                let mut surface = BTreeMap::new();
                surface.insert("SSH".to_string(), fields.ssh.cast());
                surface.insert("U".to_string(), fields.u.cast());
                surface.insert("V".to_string(), fields.v.cast());
                surface.insert("B".to_string(), fields.b.cast());
                samples.push(FieldSample {
                    surface,
                    target: Tensor::zeros(&[3, h, w]),
                    time_index: first + k - spin_up,
                });
                w_clean.push(clean);
                w_raw.push(raw.clone());
            }
            episode_raw.push(raw);
        }
        targets.extend(lowpass_w(&episode_raw, &cfg.filter)?.into_iter().skip(spin_up));
    }

    for (s, f) in samples.iter_mut().zip(&targets) {
        s.target = f.cast();
    }
    Ok(SynthOutput {
        samples,
        w_clean,
        w_raw,
    })
}

/// Universe matching [`generate_synthetic`] output.
pub fn synthetic_universe() -> VariableUniverse {
    VariableUniverse::default()
}

/// Provenance string recorded in dataset manifests.
pub fn provenance(cfg: &SynthConfig) -> String {
    format!(
        "{GENERATOR_VERSION}; seed={}; grid={}x{}; steps={}; episode_length={}; filter_window={}; normalized_filter={}",
        cfg.seed, cfg.height, cfg.width, cfg.steps, cfg.episode_length, cfg.filter.window, cfg.filter.normalize_weights
    )
}
