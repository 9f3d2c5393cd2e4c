//! Procedural multi-spectral identities with controllable degradation.
//!
//! Each identity owns a persistent signature: body geometry, a colour code,
//! optional stripes, an accent disk, per-region NIR reflectance and thermal
//! hot spots. Samples re-render the signature under position, scale and
//! illumination jitter. RGB carries colour, NIR a single reflectance channel
//! and TIR a smoothed silhouette plus hot spots; NIR and TIR are replicated
//! to three channels so every spectrum shares one patch layout.
//!
//! Degradations only add a severity-scaled offset drawn before the severity
//! is known, so larger severity never moves a pixel back toward its clean
//! value.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::params::{stream_rng, streams};
use crate::spectral::SpectralImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Normal,
    /// Saturating glare and contrast loss on RGB and NIR; TIR untouched.
    Flare,
    /// Global darkening plus sensor noise on RGB.
    LowLight,
    /// Flare or low light, chosen per sample.
    Mixed,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::Flare => "flare",
            Scenario::LowLight => "low_light",
            Scenario::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "normal" => Ok(Scenario::Normal),
            "flare" => Ok(Scenario::Flare),
            "low_light" => Ok(Scenario::LowLight),
            "mixed" => Ok(Scenario::Mixed),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub train_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub n_cams: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scenario: Scenario,
    /// Severity range for degraded samples; ignored by `normal`.
    pub severity_min: f64,
    pub severity_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 8,
            train_per_id: 8,
            query_per_id: 2,
            gallery_per_id: 4,
            n_cams: 3,
            height: 32,
            width: 64,
            seed: 0,
            scenario: Scenario::Normal,
            severity_min: 0.4,
            severity_max: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_identities == 0 || self.train_per_id == 0 {
            return bad("n_identities and train_per_id must be positive".into());
        }
        if self.n_cams == 0 {
            return bad("n_cams must be positive".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.severity_min)
            || !(0.0..=1.0).contains(&self.severity_max)
            || self.severity_min > self.severity_max
        {
            return bad(format!(
                "severity range [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.severity_min, self.severity_max
            ));
        }
        if self.n_identities > 9999 || self.samples_per_id() > 9999 {
            return bad("identity and sequence numbers must fit in four digits".into());
        }
        Ok(())
    }

    pub fn samples_per_id(&self) -> usize {
        self.train_per_id + self.query_per_id + self.gallery_per_id
    }
}

/// Persistent per-identity appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    /// Upper body, lower body, accent.
    pub colors: [[f64; 3]; 3],
    /// NIR reflectance of the same three regions.
    pub nir: [f64; 3],
    pub split: f64,
    pub body: (f64, f64),
    /// `(angle, frequency)` of brightness stripes.
    pub stripes: Option<(f64, f64)>,
    /// Accent disk centre and radius in body coordinates.
    pub accent: (f64, f64, f64),
    /// Hot spots `(u, v, amplitude)` in body coordinates.
    pub heat: [(f64, f64, f64); 2],
}

impl Signature {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let color = |rng: &mut R| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let colors = [color(rng), color(rng), color(rng)];
        let nir = [
            rng.random_range(0.2..0.95),
            rng.random_range(0.2..0.95),
            rng.random_range(0.2..0.95),
        ];
        let split = rng.random_range(0.3..0.7);
        let body = (rng.random_range(0.45..0.75), rng.random_range(0.5..0.8));
        let stripes = rng
            .random_bool(0.5)
            .then(|| (rng.random_range(0.0..PI), rng.random_range(2.0..5.0)));
        let accent = (
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.1..0.22),
        );
        let spot = |rng: &mut R| {
            (
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.35..0.7),
            )
        };
        let heat = [spot(rng), spot(rng)];
        Self {
            colors,
            nir,
            split,
            body,
            stripes,
            accent,
            heat,
        }
    }
}

/// Random draws consumed by degradation, made independently of severity.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationDraws {
    /// Flare centre (image fractions) and radius (fraction of width).
    pub flare: (f64, f64, f64),
    /// Per-pixel standard normals for RGB sensor noise, plane layout.
    pub noise: Vec<f64>,
    /// Uniform draws resolving `mixed` and the severity.
    pub pick: f64,
    pub level: f64,
}

impl DegradationDraws {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let flare = (
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.25..0.45),
        );
        let noise = (0..3 * height * width)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        Self {
            flare,
            noise,
            pick: rng.random(),
            level: rng.random(),
        }
    }
}

struct Jitter {
    center: (f64, f64),
    scale: f64,
    gain: f64,
    bg: [f64; 3],
    bg_nir: f64,
    bg_slope: f64,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn replicate(plane: &[f64], height: usize, width: usize) -> SpectralImage {
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend(plane.iter().map(|&v| quantize(v)));
    }
    SpectralImage {
        channels: 3,
        height,
        width,
        data,
    }
}

/// Clean three-spectrum render of `sig` under sample-level jitter drawn
/// from `rng`. Values are quantised to 8 bits.
pub fn render_clean<R: Rng + ?Sized>(
    sig: &Signature,
    height: usize,
    width: usize,
    rng: &mut R,
) -> [SpectralImage; 3] {
    let j = Jitter {
        center: (rng.random_range(0.42..0.58), rng.random_range(0.44..0.56)),
        scale: rng.random_range(0.9..1.1),
        gain: rng.random_range(0.85..1.15),
        bg: [
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
        ],
        bg_nir: rng.random_range(0.1..0.4),
        bg_slope: rng.random_range(-0.15..0.15),
    };
    let (bw, bh) = (sig.body.0 * j.scale, sig.body.1 * j.scale);
    let n = height * width;
    let mut rgb = vec![0.0; 3 * n];
    let mut nir = vec![0.0; n];
    let mut mask = vec![0.0; n];
    let mut heat = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let u = (px - j.center.0) / bw + 0.5;
            let v = (py - j.center.1) / bh + 0.5;
            let i = y * width + x;
            for (k, &(hu, hv, amp)) in sig.heat.iter().enumerate() {
                let du = (u - hu) * bw * width as f64;
                let dv = (v - hv) * bh * height as f64;
                let sigma = if k == 0 { 2.5 } else { 3.5 };
                heat[i] += amp * (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            }
            let inside = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
            if !inside {
                let shade = 1.0 + j.bg_slope * (px - 0.5);
                for c in 0..3 {
                    rgb[c * n + i] = j.bg[c] * shade;
                }
                nir[i] = j.bg_nir * shade;
                continue;
            }
            mask[i] = 1.0;
            let (au, av, ar) = sig.accent;
            let dv_a = (v - av) * bh / bw;
            let region = if (u - au).powi(2) + dv_a.powi(2) < ar * ar {
                2
            } else if v < sig.split {
                0
            } else {
                1
            };
            let modulation = match sig.stripes {
                Some((angle, freq)) if region != 2 => {
                    1.0 + 0.25 * (2.0 * PI * freq * (u * angle.cos() + v * angle.sin())).sin()
                }
                _ => 1.0,
            };
            for c in 0..3 {
                rgb[c * n + i] = sig.colors[region][c] * modulation * j.gain;
            }
            nir[i] = sig.nir[region] * modulation * j.gain;
        }
    }
    let blurred = box_blur(&mask, height, width, 2);
    let tir: Vec<f64> = (0..n).map(|i| 0.1 + 0.35 * blurred[i] + heat[i]).collect();
    let rgb = SpectralImage {
        channels: 3,
        height,
        width,
        data: rgb.into_iter().map(quantize).collect(),
    };
    [rgb, replicate(&nir, height, width), replicate(&tir, height, width)]
}

fn box_blur(src: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(height - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(width - 1));
            let mut sum = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    sum += src[yy * width + xx];
                }
            }
            out[y * width + x] = sum / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Applies `scenario` at `severity` to a clean render. `Mixed` must be
/// resolved by the caller. Returns per-spectrum severities.
pub fn degrade(
    clean: &[SpectralImage; 3],
    scenario: Scenario,
    severity: f64,
    draws: &DegradationDraws,
) -> ([SpectralImage; 3], [f64; 3]) {
    let mut out = clean.clone();
    let sev = severity.clamp(0.0, 1.0);
    match scenario {
        Scenario::Normal | Scenario::Mixed => return (out, [0.0; 3]),
        Scenario::Flare => {
            let (fx, fy, fr) = draws.flare;
            for img in &mut out[..2] {
                let (h, w) = (img.height, img.width);
                for c in 0..img.channels {
                    for y in 0..h {
                        for x in 0..w {
                            let dx = (x as f64 + 0.5) / w as f64 - fx;
                            let dy = ((y as f64 + 0.5) / h as f64 - fy) * h as f64 / w as f64;
                            let blob = 1.2 * (-(dx * dx + dy * dy) / (2.0 * fr * fr)).exp();
                            let p = img.at_mut(c, y, x);
                            *p = quantize(*p + sev * (0.6 * (1.0 - *p) + blob));
                        }
                    }
                }
            }
            (out, [sev, sev, 0.0])
        }
        Scenario::LowLight => {
            let img = &mut out[0];
            for (p, z) in img.data.iter_mut().zip(&draws.noise) {
                *p = quantize(*p + sev * (-0.85 * *p + 0.12 * z));
            }
            (out, [sev, 0.0, 0.0])
        }
    }
}

/// Generates train / query / gallery splits in memory. Query and gallery
/// hold further samples of the training identities.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for id in 0..cfg.n_identities {
        let identity = id as u32 + 1;
        let sig = Signature::draw(&mut stream_rng(cfg.seed, streams::SYNTH, identity as u64));
        for seq in 0..cfg.samples_per_id() {
            let uid = ((identity as u64) << 32) | seq as u64;
            let mut rng = stream_rng(cfg.seed, streams::SYNTH, uid);
            let clean = render_clean(&sig, cfg.height, cfg.width, &mut rng);
            let draws = DegradationDraws::draw(&mut rng, cfg.height, cfg.width);
            let scenario = match cfg.scenario {
                Scenario::Mixed if draws.pick < 0.5 => Scenario::Flare,
                Scenario::Mixed => Scenario::LowLight,
                s => s,
            };
            let level = cfg.severity_min + (cfg.severity_max - cfg.severity_min) * draws.level;
            let (images, severity) = degrade(&clean, scenario, level, &draws);
            let sample = Sample {
                images,
                label: id,
                identity,
                cam: (seq % cfg.n_cams) as u32,
                seq: seq as u32,
                uid,
                scenario,
                severity,
            };
            if seq < cfg.train_per_id {
                train.push(sample);
            } else if seq < cfg.train_per_id + cfg.query_per_id {
                query.push(sample);
            } else {
                gallery.push(sample);
            }
        }
    }
    let mut ds = Dataset {
        train: Split::new(train),
        query: Split::new(query),
        gallery: Split::new(gallery),
    };
    ds.reindex();
    Ok(ds)
}
