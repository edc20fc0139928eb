//! Synthetic vessel images: a dark smooth curve on a bright noisy
//! background, with a local narrowing on positive samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Sample};
use crate::seed;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub patients: usize,
    pub stenosis_fraction: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 880,
            height: 64,
            width: 64,
            patients: 44,
            stenosis_fraction: 0.5,
            noise: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(DataError::Config(format!(
                "synthetic images must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.count == 0 {
            return Err(DataError::Config("count must be at least 1".into()));
        }
        if self.patients < 4 {
            return Err(DataError::Config(format!("need at least 4 patients, got {}", self.patients)));
        }
        if !(0.0..=1.0).contains(&self.stenosis_fraction) {
            return Err(DataError::Config(format!(
                "stenosis_fraction {} outside [0, 1]",
                self.stenosis_fraction
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(DataError::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

/// Per-patient appearance shared by all of that patient's images.
#[derive(Debug, Clone, Copy)]
struct PatientStyle {
    background: f64,
    contrast: f64,
    /// Vessel half-width in pixels.
    radius: f64,
}

/// Splits `total` into `parts` near-equal integers, larger ones first.
fn even_counts(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Positives per patient: `round(fraction · n)` overall, spread over
/// patients by largest remainder so each patient is as balanced as possible.
fn positives_per_patient(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            missing -= 1;
        }
    }
    counts
}

fn bezier(p: &[[f64; 2]; 4], t: f64) -> [f64; 2] {
    let s = 1.0 - t;
    let w = [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t];
    let mut out = [0.0; 2];
    for (k, pk) in p.iter().enumerate() {
        out[0] += w[k] * pk[0];
        out[1] += w[k] * pk[1];
    }
    out
}

/// Random cubic crossing the frame from one side to the opposite side.
fn random_curve<R: Rng>(h: f64, w: f64, rng: &mut R) -> [[f64; 2]; 4] {
    let horizontal = rng.gen_bool(0.5);
    let (len_a, len_b) = if horizontal { (w, h) } else { (h, w) };
    let across = |rng: &mut R| rng.gen_range(0.2..0.8) * len_b;
    let mut pts = [
        [-0.05 * len_a, across(rng)],
        [rng.gen_range(0.2..0.45) * len_a, rng.gen_range(0.05..0.95) * len_b],
        [rng.gen_range(0.55..0.8) * len_a, rng.gen_range(0.05..0.95) * len_b],
        [1.05 * len_a, across(rng)],
    ];
    if rng.gen_bool(0.5) {
        pts.reverse();
    }
    if !horizontal {
        for p in &mut pts {
            p.swap(0, 1);
        }
    }
    // Stored as (x, y).
    pts
}

/// Smooth bump on `[start, start + len]`, zero outside.
fn window(s: f64, start: f64, len: f64) -> f64 {
    let x = (s - start) / len;
    if (0.0..=1.0).contains(&x) {
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * x).cos())
    } else {
        0.0
    }
}

struct Narrowing {
    start: f64,
    len: f64,
    depth: f64,
}

fn render<R: Rng>(cfg: &SynthConfig, style: PatientStyle, narrowing: Option<Narrowing>, rng: &mut R) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let curve = random_curve(h as f64, w as f64, rng);
    let samples = 4 * (h + w);
    let points: Vec<[f64; 2]> = (0..=samples).map(|i| bezier(&curve, i as f64 / samples as f64)).collect();
    // Arc-length parameter of each polyline vertex, normalized to [0, 1].
    let mut arc = vec![0.0; points.len()];
    for i in 1..points.len() {
        let (dx, dy) = (points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]);
        arc[i] = arc[i - 1] + (dx * dx + dy * dy).sqrt();
    }
    let total = arc[arc.len() - 1];
    let radius: Vec<f64> = arc
        .iter()
        .map(|a| {
            let s = a / total;
            let shrink = narrowing.as_ref().map_or(0.0, |n| n.depth * window(s, n.start, n.len));
            style.radius * (1.0 - shrink)
        })
        .collect();

    // Nearest curve vertex per pixel, searched only within a window where
    // the profile is still visible.
    let reach = (5.0 * style.radius).ceil() as isize + 1;
    let mut nearest = vec![(f64::INFINITY, style.radius); h * w];
    for (p, &r) in points.iter().zip(&radius) {
        let (cx, cy) = (p[0].floor() as isize, p[1].floor() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let d2 = (p[0] - x as f64 - 0.5).powi(2) + (p[1] - y as f64 - 0.5).powi(2);
                let slot = &mut nearest[y as usize * w + x as usize];
                if d2 < slot.0 {
                    *slot = (d2, r);
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let data = nearest
        .into_iter()
        .map(|(d2, r)| {
            // Projected density scales with the local lumen width.
            let darkness = if d2.is_finite() {
                style.contrast * (r / style.radius) * (-0.5 * d2 / (r * r)).exp()
            } else {
                0.0
            };
            let v = style.background - darkness + if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    Tensor::new(vec![h, w], data).expect("h*w samples")
}

/// Deterministic synthetic dataset. Sample ids are `s{index:05}` and patient
/// ids `p{index:03}`; each patient has its own background, contrast and
/// vessel width.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let sizes = even_counts(cfg.count, cfg.patients);
    let positives = positives_per_patient(&sizes, cfg.stenosis_fraction);
    let scale = cfg.height.min(cfg.width) as f64 / 64.0;

    let mut jobs = Vec::with_capacity(cfg.count);
    let mut next = 0usize;
    for (p, (&n, &pos)) in sizes.iter().zip(&positives).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("patient"), p as u64]));
        let style = PatientStyle {
            background: rng.gen_range(0.65..0.75),
            contrast: rng.gen_range(0.35..0.42),
            radius: rng.gen_range(2.2..2.8) * scale,
        };
        let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < pos)).collect();
        labels.shuffle(&mut rng);
        for label in labels {
            jobs.push((format!("p{p:03}"), next, label, style));
            next += 1;
        }
    }

    use rayon::prelude::*;
    let samples = jobs
        .into_par_iter()
        .map(|(patient_id, index, label, style)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("sample"), index as u64]));
            let narrowing = (label == 1).then(|| {
                let len = rng.gen_range(0.10..0.20);
                Narrowing {
                    start: rng.gen_range(0.25..0.75 - len),
                    len,
                    depth: rng.gen_range(0.4..0.7),
                }
            });
            Sample {
                id: format!("s{index:05}"),
                patient_id,
                label: Some(label),
                image: render(cfg, style, narrowing, &mut rng),
            }
        })
        .collect();
    Dataset::new(cfg.height, cfg.width, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            count: 40,
            height: 32,
            width: 32,
            patients: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small(), 5).unwrap();
        let b = generate_synthetic(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(), 6).unwrap());
    }

    #[test]
    fn zero_fraction_gives_all_negative() {
        let ds = generate_synthetic(&SynthConfig { stenosis_fraction: 0.0, ..small() }, 1).unwrap();
        assert!(ds.samples.iter().all(|s| s.label == Some(0)));
    }

    #[test]
    fn labels_balanced_to_fraction() {
        for (count, frac) in [(40, 0.5), (37, 0.3), (11, 0.9)] {
            let ds = generate_synthetic(&SynthConfig { count, stenosis_fraction: frac, ..small() }, 2).unwrap();
            let pos = ds.samples.iter().filter(|s| s.label == Some(1)).count() as f64;
            assert!((pos - frac * count as f64).abs() <= 1.0, "{count} {frac}: {pos}");
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let err = generate_synthetic(&SynthConfig { height: 31, ..small() }, 0).unwrap_err();
        assert!(matches!(err, DataError::Config(_)));
    }

    #[test]
    fn pixels_on_eight_bit_grid() {
        let ds = generate_synthetic(&small(), 3).unwrap();
        for s in &ds.samples {
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(((v * 255.0).round() / 255.0), v);
            }
        }
    }

    #[test]
    fn positives_spread_over_patients() {
        assert_eq!(positives_per_patient(&[20; 44], 0.5), vec![10; 44]);
        assert_eq!(positives_per_patient(&[3, 3, 3], 0.5).iter().sum::<usize>(), 5);
    }
}
