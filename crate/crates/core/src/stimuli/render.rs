use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{StimulusClass, StimulusSpec, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusImage {
    /// Shape (3, 32, 32), grayscale replicated over the channels.
    pub pixels: Tensor,
    pub spec: StimulusSpec,
}

fn gray_to_rgb(gray: &[f32]) -> Tensor {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        data.extend_from_slice(gray);
    }
    Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).expect("plane size")
}

/// Noise-free rasterization. Shapes have hard edges: a pixel belongs to a
/// shape iff its center does.
pub fn render(spec: &StimulusSpec) -> Result<StimulusImage> {
    spec.validate_geometry()?;
    let n = IMAGE_SIZE;
    let mut gray = vec![spec.background; n * n];
    match spec.orientations {
        None => {
            for row in spec.y0..spec.y0 + spec.size {
                gray[row * n + spec.x0..row * n + spec.x0 + spec.size].fill(spec.inducer);
            }
        }
        Some(mouths) => {
            let r = spec.radius();
            let r2 = r * r;
            for (&(cx, cy), mouth) in spec.corners().iter().zip(mouths) {
                let (sx, sy) = mouth.signs();
                let lo_x = (cx - r).floor().max(0.0) as usize;
                let hi_x = ((cx + r).ceil() as usize).min(n);
                let lo_y = (cy - r).floor().max(0.0) as usize;
                let hi_y = ((cy + r).ceil() as usize).min(n);
                for row in lo_y..hi_y {
                    let dy = row as f64 + 0.5 - cy;
                    for col in lo_x..hi_x {
                        let dx = col as f64 + 0.5 - cx;
                        let in_mouth = dx * sx > 0.0 && dy * sy > 0.0;
                        if dx * dx + dy * dy <= r2 && !in_mouth {
                            gray[row * n + col] = spec.inducer;
                        }
                    }
                }
            }
        }
    }
    Ok(StimulusImage {
        pixels: gray_to_rgb(&gray),
        spec: spec.clone(),
    })
}

/// Slow per-pixel reference rasterizer working in polar coordinates around
/// each corner. Kept independent of [`render`] so each can check the other.
pub fn render_oracle(spec: &StimulusSpec) -> Result<Tensor> {
    spec.validate_geometry()?;
    let n = IMAGE_SIZE;
    let mut gray = vec![0f32; n * n];
    for (i, g) in gray.iter_mut().enumerate() {
        let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        let inside = match spec.class {
            StimulusClass::Square => {
                let (x0, y0, s) = (spec.x0 as f64, spec.y0 as f64, spec.size as f64);
                px > x0 && px < x0 + s && py > y0 && py < y0 + s
            }
            _ => {
                let mouths = spec.orientations.expect("validated");
                spec.corners().iter().zip(mouths).any(|(&(cx, cy), mouth)| {
                    let (dx, dy) = (px - cx, py - cy);
                    let dist = (dx * dx + dy * dy).sqrt();
                    let (sx, sy) = mouth.signs();
                    let bisector = sy.atan2(sx);
                    let mut diff = dy.atan2(dx) - bisector;
                    while diff > std::f64::consts::PI {
                        diff -= 2.0 * std::f64::consts::PI;
                    }
                    while diff < -std::f64::consts::PI {
                        diff += 2.0 * std::f64::consts::PI;
                    }
                    dist <= spec.radius() && diff.abs() >= std::f64::consts::FRAC_PI_4
                })
            }
        };
        *g = if inside { spec.inducer } else { spec.background };
    }
    Ok(gray_to_rgb(&gray))
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma`, the same
/// draw on all three channels of a pixel, then clamps to [0, 1].
pub fn apply_noise<R: Rng + ?Sized>(image: &Tensor, sigma: f32, rng: &mut R) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        other => {
            return Err(Error::Rank {
                op: "apply_noise",
                expected: 3,
                actual: other.to_vec(),
            })
        }
    };
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Input(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Input(e.to_string()))?;
    let plane = h * w;
    let draws: Vec<f32> = (0..plane).map(|_| normal.sample(rng)).collect();
    let mut out = image.clone();
    for ch in 0..c {
        for (v, z) in out.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(&draws) {
            *v = (*v + z).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Renders `spec` and applies its noise level with the spec's own seed.
pub fn render_noisy(spec: &StimulusSpec) -> Result<StimulusImage> {
    let clean = render(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let pixels = apply_noise(&clean.pixels, spec.noise_sigma, &mut rng)?;
    Ok(StimulusImage {
        pixels,
        spec: clean.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{sample_spec, SamplingRanges};

    fn spec(class: StimulusClass, seed: u64) -> StimulusSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_spec(class, &SamplingRanges::default(), &mut rng)
    }

    fn at(img: &Tensor, x: usize, y: usize) -> f32 {
        img.data()[y * IMAGE_SIZE + x]
    }

    #[test]
    fn equal_luminances_render_uniform() {
        let mut s = spec(StimulusClass::AllIn, 1);
        s.inducer = s.background;
        let img = render(&s).unwrap().pixels;
        assert!(img.data().iter().all(|&v| v == s.background));
    }

    #[test]
    fn all_in_covers_corners_and_leaves_edge_midpoints() {
        for seed in 0..20 {
            let s = spec(StimulusClass::AllIn, seed);
            let img = render(&s).unwrap().pixels;
            let (x0, y0, sz) = (s.x0, s.y0, s.size);
            // pixels whose corner touches each virtual-square corner, outside the square
            assert_eq!(at(&img, x0 - 1, y0 - 1), s.inducer);
            assert_eq!(at(&img, x0 + sz, y0 - 1), s.inducer);
            assert_eq!(at(&img, x0 + sz, y0 + sz), s.inducer);
            assert_eq!(at(&img, x0 - 1, y0 + sz), s.inducer);
            // the first pixel inside each corner falls in the mouth
            assert_eq!(at(&img, x0, y0), s.background);
            let mid = x0 + sz / 2;
            assert_eq!(at(&img, mid, y0), s.background);
            assert_eq!(at(&img, mid, y0 + sz - 1), s.background);
            assert_eq!(at(&img, x0, y0 + sz / 2), s.background);
        }
    }

    #[test]
    fn square_class_fills_the_square() {
        let s = spec(StimulusClass::Square, 5);
        let img = render(&s).unwrap().pixels;
        let count = img.data()[..IMAGE_SIZE * IMAGE_SIZE].iter().filter(|&&v| v == s.inducer).count();
        assert_eq!(count, s.size * s.size);
    }

    #[test]
    fn fast_renderer_matches_oracle() {
        for seed in 0..40 {
            let s = spec(StimulusClass::ALL[seed as usize % 4], 100 + seed);
            assert_eq!(render(&s).unwrap().pixels, render_oracle(&s).unwrap());
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_noise_stays_in_range() {
        let s = spec(StimulusClass::Random, 7);
        let clean = render(&s).unwrap().pixels;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_noise(&clean, 0.0, &mut rng).unwrap(), clean);
        let noisy = apply_noise(&clean, 0.3, &mut rng).unwrap();
        assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        assert_eq!(noisy.data()[..plane], noisy.data()[plane..2 * plane]);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let flat = Tensor::full(&[3, 256, 256], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = apply_noise(&flat, 0.1, &mut rng).unwrap();
        let plane = &noisy.data()[..256 * 256];
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64 - 0.5).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - 0.5 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() < 0.005, "{}", var.sqrt());
    }

    #[test]
    fn noisy_render_is_reproducible() {
        let s = spec(StimulusClass::AllOut, 8).with_noise(0.2);
        assert_eq!(render_noisy(&s).unwrap(), render_noisy(&s).unwrap());
    }
}
