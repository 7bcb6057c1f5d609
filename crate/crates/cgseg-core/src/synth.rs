//! Synthetic storm dataset generator: a desk-scale stand-in with the same
//! shape as the real data — heavy background-class imbalance, localized
//! rotating lows for tropical cyclones, and elongated moist bands for
//! atmospheric rivers.
//!
//! Intensity scales are arbitrary but fixed; what matters is imbalance,
//! locality, and the rotational wind signature.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{channels, ClimateSample, Dataset, LabelGrid, CLASS_AR, CLASS_TC};
use crate::error::{invalid, Result};
use crate::features::GridGeometry;
use crate::tensor::GridTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Years are assigned in blocks: `start_year + i / samples_per_year`.
    pub start_year: u32,
    pub samples_per_year: usize,
    /// Inclusive ranges for storms per sample.
    pub tc_count: (usize, usize),
    pub ar_count: (usize, usize),
    /// Label disk radius of a cyclone, in pixels.
    pub tc_radius: f64,
    /// Label half-width of a river band, in pixels.
    pub ar_half_width: f64,
    /// Placement keeps at least this fraction of pixels background.
    pub min_background_fraction: f64,
    /// Also emit UBOT/VBOT so features can be engineered.
    pub include_bottom_winds: bool,
    /// Amplitude of the uniform per-pixel noise on every channel.
    pub noise: f64,
    pub max_placement_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 24,
            height: 32,
            width: 64,
            seed: 7,
            start_year: 1996,
            samples_per_year: 2,
            tc_count: (1, 2),
            ar_count: (0, 1),
            tc_radius: 3.5,
            ar_half_width: 2.0,
            min_background_fraction: 0.90,
            include_bottom_winds: true,
            noise: 0.5,
            max_placement_retries: 60,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(invalid("synthetic dataset needs at least one sample"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(invalid("synthetic grid must be at least 8x8"));
        }
        if self.samples_per_year == 0 {
            return Err(invalid("samples_per_year must be >= 1"));
        }
        if self.tc_count.0 > self.tc_count.1 || self.ar_count.0 > self.ar_count.1 {
            return Err(invalid("storm count ranges must be low..=high"));
        }
        if !(self.min_background_fraction > 0.0 && self.min_background_fraction < 1.0) {
            return Err(invalid("min_background_fraction must lie in (0, 1)"));
        }
        if self.tc_radius <= 0.5 || self.ar_half_width <= 0.5 {
            return Err(invalid("storm sizes must exceed half a pixel"));
        }
        Ok(())
    }
}

/// Signed column offset under periodic longitude wrap, in [-W/2, W/2).
fn wrap_dx(c: f64, c0: f64, width: usize) -> f64 {
    let w = width as f64;
    let mut d = (c - c0) % w;
    if d < -w / 2.0 {
        d += w;
    } else if d >= w / 2.0 {
        d -= w;
    }
    d
}

struct Fields {
    tmq: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    psl: Vec<f64>,
}

/// Deterministic storm dataset for the given configuration.
pub fn gen_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let geometry = GridGeometry::equirectangular(cfg.height, cfg.width);
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let year = cfg.start_year + (i / cfg.samples_per_year) as u32;
        samples.push(gen_sample(cfg, &geometry, year, i as u32, &mut rng)?);
    }
    Ok(Dataset::new(samples))
}

fn gen_sample(
    cfg: &SynthConfig,
    geometry: &GridGeometry,
    year: u32,
    index: u32,
    rng: &mut ChaCha8Rng,
) -> Result<ClimateSample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut f = background(cfg, geometry, rng);
    let mut labels = LabelGrid::filled(h, w, 0);
    let budget = ((1.0 - cfg.min_background_fraction) * (h * w) as f64) as usize;
    let mut labeled = 0usize;

    let n_tc = rng.random_range(cfg.tc_count.0..=cfg.tc_count.1);
    for _ in 0..n_tc {
        labeled += place_tc(cfg, &mut f, &mut labels, labeled, budget, rng)?;
    }
    let n_ar = rng.random_range(cfg.ar_count.0..=cfg.ar_count.1);
    for _ in 0..n_ar {
        labeled += place_ar(cfg, &mut f, &mut labels, labeled, budget, rng)?;
    }

    let grid = |data: Vec<f64>| GridTensor::new(vec![h, w], data);
    let mut chans = vec![
        (channels::TMQ.into(), grid(f.tmq)?),
        (channels::U850.into(), grid(f.u.clone())?),
        (channels::V850.into(), grid(f.v.clone())?),
        (channels::PSL.into(), grid(f.psl)?),
    ];
    if cfg.include_bottom_winds {
        // Surface winds: the 850 mbar field damped plus its own noise.
        let ub: Vec<f64> = f
            .u
            .iter()
            .map(|&x| 0.7 * x + cfg.noise * (rng.random::<f64>() - 0.5))
            .collect();
        let vb: Vec<f64> = f
            .v
            .iter()
            .map(|&x| 0.7 * x + cfg.noise * (rng.random::<f64>() - 0.5))
            .collect();
        chans.push((channels::UBOT.into(), grid(ub)?));
        chans.push((channels::VBOT.into(), grid(vb)?));
    }
    ClimateSample::new(year, index, chans, labels, geometry.clone())
}

/// Smooth zonally varying base fields plus uniform noise.
fn background(cfg: &SynthConfig, geometry: &GridGeometry, rng: &mut ChaCha8Rng) -> Fields {
    let (h, w) = (cfg.height, cfg.width);
    let phase1 = rng.random::<f64>() * core::f64::consts::TAU;
    let phase2 = rng.random::<f64>() * core::f64::consts::TAU;
    let mut tmq = vec![0.0; h * w];
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    let mut psl = vec![0.0; h * w];
    for r in 0..h {
        let phi = geometry.lat_rad(r);
        for c in 0..w {
            let lam = geometry.lon_deg()[c] * core::f64::consts::PI / 180.0;
            let i = r * w + c;
            let cosphi = libm::cos(phi);
            tmq[i] = 12.0 + 30.0 * cosphi * cosphi
                + 3.0 * libm::sin(2.0 * lam + phase1)
                + cfg.noise * (rng.random::<f64>() - 0.5);
            u[i] = 6.0 * libm::sin(2.0 * phi)
                + 1.5 * libm::sin(lam + phase2)
                + cfg.noise * (rng.random::<f64>() - 0.5);
            v[i] = 1.0 * libm::sin(3.0 * lam + phase1)
                + cfg.noise * (rng.random::<f64>() - 0.5);
            psl[i] = 101_300.0 + 350.0 * libm::sin(2.0 * phi)
                + 40.0 * libm::cos(lam + phase2)
                + cfg.noise * 20.0 * (rng.random::<f64>() - 0.5);
        }
    }
    Fields { tmq, u, v, psl }
}

/// Pixels of a disk with wrap-aware columns.
fn disk_pixels(center: (f64, f64), radius: f64, h: usize, w: usize) -> Vec<usize> {
    let mut px = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - center.0;
            let dx = wrap_dx(c as f64, center.1, w);
            if dy * dy + dx * dx <= radius * radius {
                px.push(r * w + c);
            }
        }
    }
    px
}

fn all_background(labels: &LabelGrid, pixels: &[usize]) -> bool {
    pixels.iter().all(|&i| labels.as_slice()[i] == 0)
}

/// A rotating low: Gaussian pressure deficit, solid-body-like tangential
/// winds peaking on a ring inside the disk, and a moist core.
fn place_tc(
    cfg: &SynthConfig,
    f: &mut Fields,
    labels: &mut LabelGrid,
    labeled: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let (h, w) = (cfg.height, cfg.width);
    let margin = libm::ceil(cfg.tc_radius) as usize + 1;
    if 2 * margin >= h {
        return Err(invalid("grid too small for the configured cyclone radius"));
    }
    for _ in 0..cfg.max_placement_retries {
        let radius = cfg.tc_radius * (0.8 + 0.4 * rng.random::<f64>());
        let r0 = rng.random_range(margin..h - margin) as f64;
        let c0 = rng.random_range(0..w) as f64;
        let pixels = disk_pixels((r0, c0), radius, h, w);
        if !all_background(labels, &pixels) || labeled + pixels.len() > budget {
            continue;
        }
        let sigma = radius * 0.7;
        let swirl = 25.0 / sigma;
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 - r0;
                let dx = wrap_dx(c as f64, c0, w);
                let d2 = dx * dx + dy * dy;
                let envelope = libm::exp(-d2 / (2.0 * sigma * sigma));
                let i = r * w + c;
                f.psl[i] -= 2500.0 * libm::exp(-d2 / (2.0 * radius * radius));
                f.tmq[i] += 18.0 * envelope;
                f.u[i] += -swirl * dy * envelope;
                f.v[i] += swirl * dx * envelope;
            }
        }
        for &i in &pixels {
            labels.as_slice_mut()[i] = CLASS_TC;
        }
        return Ok(pixels.len());
    }
    Err(invalid(format!(
        "could not place a cyclone without overlap within {} retries",
        cfg.max_placement_retries
    )))
}

/// An elongated high-moisture band with mild along-band winds.
fn place_ar(
    cfg: &SynthConfig,
    f: &mut Fields,
    labels: &mut LabelGrid,
    labeled: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let (h, w) = (cfg.height, cfg.width);
    for _ in 0..cfg.max_placement_retries {
        let half_width = cfg.ar_half_width * (0.8 + 0.4 * rng.random::<f64>());
        let length = (0.25 + 0.20 * rng.random::<f64>()) * w as f64;
        let angle = (rng.random::<f64>() - 0.5) * core::f64::consts::FRAC_PI_2;
        let margin = libm::ceil(half_width + length * libm::sin(angle).abs()) as usize + 1;
        if 2 * margin >= h {
            continue;
        }
        let r0 = rng.random_range(margin..h - margin) as f64;
        let c0 = rng.random_range(0..w) as f64;
        let (dirx, diry) = (libm::cos(angle), libm::sin(angle));

        let mut pixels = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let dist = segment_distance(r as f64, c as f64, r0, c0, dirx, diry, length, w);
                if dist <= half_width {
                    pixels.push(r * w + c);
                }
            }
        }
        if pixels.is_empty()
            || !all_background(labels, &pixels)
            || labeled + pixels.len() > budget
        {
            continue;
        }
        for r in 0..h {
            for c in 0..w {
                let dist = segment_distance(r as f64, c as f64, r0, c0, dirx, diry, length, w);
                let fall = libm::exp(-(dist * dist) / (2.0 * half_width * half_width));
                let i = r * w + c;
                f.tmq[i] += 24.0 * fall;
                f.u[i] += 7.0 * dirx * fall;
                f.v[i] += 7.0 * diry * fall;
            }
        }
        for &i in &pixels {
            labels.as_slice_mut()[i] = CLASS_AR;
        }
        return Ok(pixels.len());
    }
    Err(invalid(format!(
        "could not place an atmospheric river without overlap within {} retries",
        cfg.max_placement_retries
    )))
}

/// Distance from a pixel to a segment starting at (r0, c0) with unit
/// direction (diry, dirx) and the given length, wrap-aware in columns.
#[allow(clippy::too_many_arguments)]
fn segment_distance(
    r: f64,
    c: f64,
    r0: f64,
    c0: f64,
    dirx: f64,
    diry: f64,
    length: f64,
    width: usize,
) -> f64 {
    let dy = r - r0;
    let dx = wrap_dx(c, c0, width);
    let t = (dx * dirx + dy * diry).clamp(0.0, length);
    let px = dx - t * dirx;
    let py = dy - t * diry;
    libm::sqrt(px * px + py * py)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_frequencies;
    use crate::features::{wind_speed, WindComponents, WindLevel};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic_dataset(&cfg).unwrap();
        let b = gen_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.sample(i), b.sample(i));
        }
        let c = gen_synthetic_dataset(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.sample(0), c.sample(0));
    }

    #[test]
    fn label_fractions_respect_the_background_floor() {
        let cfg = SynthConfig {
            samples: 100,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic_dataset(&cfg).unwrap();
        let mut saw_tc = false;
        let mut saw_ar = false;
        for s in ds.samples() {
            let f = class_frequencies([&s.labels]).unwrap().fractions();
            assert!(
                f[0] >= cfg.min_background_fraction,
                "background fraction {} below the floor",
                f[0]
            );
            saw_tc |= f[1] > 0.0;
            saw_ar |= f[2] > 0.0;
        }
        assert!(saw_tc && saw_ar, "expected both storm kinds across 100 samples");
    }

    #[test]
    fn years_follow_the_block_assignment() {
        let cfg = SynthConfig {
            samples: 7,
            samples_per_year: 3,
            start_year: 2001,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic_dataset(&cfg).unwrap();
        let years: Vec<u32> = ds.samples().iter().map(|s| s.year).collect();
        assert_eq!(years, vec![2001, 2001, 2001, 2002, 2002, 2002, 2003]);
    }

    #[test]
    fn cyclones_carry_wind_speed_and_pressure_signatures() {
        let cfg = SynthConfig {
            samples: 12,
            tc_count: (1, 1),
            ar_count: (0, 0),
            ..SynthConfig::default()
        };
        let ds = gen_synthetic_dataset(&cfg).unwrap();
        for s in ds.samples() {
            let u = s.channel(channels::U850).unwrap().clone();
            let v = s.channel(channels::V850).unwrap().clone();
            let speed = wind_speed(&WindComponents::new(u, v, WindLevel::Mbar850).unwrap()).unwrap();
            let psl = s.channel(channels::PSL).unwrap();

            // Pixels at least 3 cells away from any cyclone label.
            let (h, w) = (s.height(), s.width());
            let far = |r: usize, c: usize| {
                for rr in 0..h {
                    for cc in 0..w {
                        if s.labels.get(rr, cc) == CLASS_TC {
                            let dy = r as f64 - rr as f64;
                            let dx = wrap_dx(c as f64, cc as f64, w);
                            if dy * dy + dx * dx < 9.0 {
                                return false;
                            }
                        }
                    }
                }
                true
            };
            let mut max_in = f64::MIN;
            let mut max_far = f64::MIN;
            let mut psl_in = f64::MAX;
            let mut psl_far = f64::MAX;
            for r in 0..h {
                for c in 0..w {
                    let sp = speed.data()[r * w + c];
                    let p = psl.data()[r * w + c];
                    if s.labels.get(r, c) == CLASS_TC {
                        max_in = max_in.max(sp);
                        psl_in = psl_in.min(p);
                    } else if far(r, c) {
                        max_far = max_far.max(sp);
                        psl_far = psl_far.min(p);
                    }
                }
            }
            assert!(
                max_in > max_far,
                "cyclone wind {max_in} does not dominate far field {max_far}"
            );
            assert!(
                psl_in < psl_far,
                "cyclone pressure {psl_in} is no deeper than the far field {psl_far}"
            );
        }
    }

    #[test]
    fn impossible_placement_exhausts_the_retry_budget() {
        let cfg = SynthConfig {
            samples: 1,
            height: 16,
            width: 16,
            tc_count: (50, 50),
            max_placement_retries: 5,
            ..SynthConfig::default()
        };
        assert!(gen_synthetic_dataset(&cfg).is_err());
    }
}
