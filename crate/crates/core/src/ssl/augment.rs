//! Mild stochastic augmentations for grayscale images in `[0, 1]`.
//!
//! A sampled [`AugmentParams`] fully determines the transform, so every view
//! can be logged and replayed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SslError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Rotation angle range in degrees, `[lo, hi]`.
    pub rotation_deg: [f64; 2],
    /// Side length of the random crop relative to the image, resized back.
    pub crop_ratio: [f64; 2],
    /// Maximum translation as a fraction of each side.
    pub translate_frac: f64,
    pub intensity_scale: [f64; 2],
    pub intensity_shift: [f64; 2],
    pub p_rotate: f64,
    pub p_crop: f64,
    pub p_translate: f64,
    pub p_intensity: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_deg: [-15.0, 15.0],
            crop_ratio: [0.8, 1.0],
            translate_frac: 0.1,
            intensity_scale: [0.9, 1.1],
            intensity_shift: [-0.05, 0.05],
            p_rotate: 0.5,
            p_crop: 0.5,
            p_translate: 0.5,
            p_intensity: 0.8,
        }
    }
}

impl AugmentationConfig {
    /// No transform is ever applied.
    pub fn identity() -> Self {
        Self {
            p_rotate: 0.0,
            p_crop: 0.0,
            p_translate: 0.0,
            p_intensity: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SslError> {
        let range = |name: &'static str, r: [f64; 2], lo: f64, hi: f64| {
            if r[0] <= r[1] && r[0] >= lo && r[1] <= hi && r.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(SslError::Config(format!("{name} range {r:?} must satisfy {lo} <= lo <= hi <= {hi}")))
            }
        };
        range("rotation_deg", self.rotation_deg, -180.0, 180.0)?;
        range("crop_ratio", self.crop_ratio, f64::MIN_POSITIVE, 1.0)?;
        range("intensity_scale", self.intensity_scale, f64::MIN_POSITIVE, 10.0)?;
        range("intensity_shift", self.intensity_shift, -1.0, 1.0)?;
        if !(0.0..=0.5).contains(&self.translate_frac) {
            return Err(SslError::Config(format!(
                "translate_frac {} must lie in [0, 0.5]",
                self.translate_frac
            )));
        }
        for (name, p) in [
            ("p_rotate", self.p_rotate),
            ("p_crop", self.p_crop),
            ("p_translate", self.p_translate),
            ("p_intensity", self.p_intensity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SslError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Crop side relative to the full image.
    pub ratio: f64,
    /// Top-left corner of the crop window, in pixels.
    pub x0: f64,
    pub y0: f64,
}

/// One sampled transform ξ. `None` means the step was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentParams {
    pub crop: Option<CropParams>,
    pub rotation_deg: Option<f64>,
    pub translate: Option<[f64; 2]>,
    pub intensity: Option<[f64; 2]>,
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let mut out = AugmentParams::default();
        if rng.gen::<f64>() < cfg.p_crop {
            let ratio = sample_range(rng, cfg.crop_ratio);
            let max_x = width as f64 * (1.0 - ratio);
            let max_y = height as f64 * (1.0 - ratio);
            out.crop = Some(CropParams {
                ratio,
                x0: sample_range(rng, [0.0, max_x]),
                y0: sample_range(rng, [0.0, max_y]),
            });
        }
        if rng.gen::<f64>() < cfg.p_rotate {
            out.rotation_deg = Some(sample_range(rng, cfg.rotation_deg));
        }
        if rng.gen::<f64>() < cfg.p_translate {
            let t = cfg.translate_frac;
            out.translate = Some([
                sample_range(rng, [-t, t]) * width as f64,
                sample_range(rng, [-t, t]) * height as f64,
            ]);
        }
        if rng.gen::<f64>() < cfg.p_intensity {
            out.intensity = Some([
                sample_range(rng, cfg.intensity_scale),
                sample_range(rng, cfg.intensity_shift),
            ]);
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentParams::default()
    }

    /// Applies crop-and-resize, then rotation + translation about the image
    /// centre, then the intensity map, and clips to `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut cur = image.clone();
        if let Some(c) = self.crop {
            cur = crop_resize(&cur, c);
        }
        if self.rotation_deg.is_some() || self.translate.is_some() {
            let theta = self.rotation_deg.unwrap_or(0.0).to_radians();
            let t = self.translate.unwrap_or([0.0, 0.0]);
            cur = rotate_translate(&cur, theta, t);
        }
        if let Some([scale, shift]) = self.intensity {
            cur.data_mut().iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        cur.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        debug_assert_eq!(cur.shape(), &[h, w]);
        cur
    }
}

/// Bilinear sample at `(x, y)`; points outside the frame read as zero.
fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let px = |xi: isize, yi: isize| {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            img[yi as usize * w + xi as usize]
        }
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    let top = px(xi, yi) * (1.0 - fx) + px(xi + 1, yi) * fx;
    let bottom = px(xi, yi + 1) * (1.0 - fx) + px(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn crop_resize(img: &Tensor, c: CropParams) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (cw, ch) = (w as f64 * c.ratio, h as f64 * c.ratio);
    let mut out = Tensor::zeros(&[h, w]);
    let src = img.data();
    for y in 0..h {
        for x in 0..w {
            // Map pixel centres of the output onto the crop window, clamped
            // inside the frame so the resize never pads.
            let sx = (c.x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let sy = (c.y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            out.data_mut()[y * w + x] = bilinear(src, h, w, sx, sy);
        }
    }
    out
}

fn rotate_translate(img: &Tensor, theta: f64, t: [f64; 2]) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let mut out = Tensor::zeros(&[h, w]);
    let src = img.data();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - t[0];
            let dy = y as f64 - cy - t[1];
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            out.data_mut()[y * w + x] = bilinear(src, h, w, round_tiny(sx), round_tiny(sy));
        }
    }
    out
}

/// Removes trig round-off (e.g. `cos(π/2) ≈ 6e-17`) from sample positions.
fn round_tiny(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Two independently augmented views of `image` plus the sampled transforms.
pub fn make_views<R: Rng + ?Sized>(
    image: &Tensor,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor, AugmentParams, AugmentParams), SslError> {
    if image.shape().len() != 2 {
        return Err(SslError::Config(format!(
            "expected a 2-D image, got shape {:?}",
            image.shape()
        )));
    }
    if let Some(bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SslError::Config(format!("image value {bad} outside [0, 1]")));
    }
    let first = image.data().first().copied().unwrap_or(0.0);
    if image.data().iter().all(|&v| v == first) {
        log::warn!("make_views: constant image");
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let xi1 = AugmentParams::sample(cfg, h, w, rng);
    let xi2 = AugmentParams::sample(cfg, h, w, rng);
    Ok((xi1.apply(image), xi2.apply(image), xi1, xi2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_probabilities_give_identity() {
        let img = test_image(16, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, xa, xb) = make_views(&img, &AugmentationConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
        assert!(xa.is_identity() && xb.is_identity());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let img = test_image(32, 32, 2);
        let cfg = AugmentationConfig::default();
        let run = || make_views(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let (a1, b1, x1, y1) = run();
        let (a2, b2, x2, y2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
        assert_eq!((x1, y1), (x2, y2));
    }

    #[test]
    fn quarter_turn_permutes_two_by_two() {
        // Sampling src = c + R(θ)ᵀ-style inverse map; at +90° the grid
        // [[a, b], [c, d]] becomes [[c, a], [d, b]] (clockwise, y down).
        let img = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let cfg = AugmentationConfig {
            rotation_deg: [90.0, 90.0],
            p_rotate: 1.0,
            ..AugmentationConfig::identity()
        };
        let (a, b, _, _) = make_views(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.data(), &[0.3, 0.1, 0.4, 0.2]);
        assert_eq!(a, b);
    }

    #[test]
    fn params_serialize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentationConfig {
            p_rotate: 1.0,
            p_crop: 1.0,
            p_translate: 1.0,
            p_intensity: 1.0,
            ..AugmentationConfig::default()
        };
        let xi = AugmentParams::sample(&cfg, 32, 32, &mut rng);
        let json = serde_json::to_string(&xi).unwrap();
        let back: AugmentParams = serde_json::from_str(&json).unwrap();
        assert_eq!(xi, back);
        assert!(xi.crop.is_some() && xi.rotation_deg.is_some());
    }

    #[test]
    fn rejects_out_of_range_config() {
        let bad = AugmentationConfig {
            crop_ratio: [0.9, 0.8],
            ..AugmentationConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            p_crop: 1.5,
            ..AugmentationConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_values_outside_unit_interval() {
        let img = Tensor::filled(&[4, 4], 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_views(&img, &AugmentationConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn constant_image_is_processed() {
        let img = Tensor::filled(&[8, 8], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _, _, _) = make_views(&img, &AugmentationConfig::default(), &mut rng).unwrap();
        assert_eq!(a.shape(), &[8, 8]);
    }
}
