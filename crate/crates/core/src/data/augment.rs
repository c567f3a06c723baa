use rand::Rng;

use super::GrayImage;

/// One concrete affine transform about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    /// Pixels; positive moves content right.
    pub translate_x: f64,
    /// Pixels; positive moves content down.
    pub translate_y: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation: 0.0,
        translate_x: 0.0,
        translate_y: 0.0,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Sampling ranges for random augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub max_rotation: f64,
    pub max_translate: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_rotation: 15f64.to_radians(),
            max_translate: 8.0,
            min_scale: 0.85,
            max_scale: 1.15,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            max_rotation: 0.0,
            max_translate: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AugmentParams {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let rotation = sym(rng, self.max_rotation);
        let translate_x = sym(rng, self.max_translate);
        let translate_y = sym(rng, self.max_translate);
        let scale = if self.max_scale > self.min_scale {
            rng.gen_range(self.min_scale..=self.max_scale)
        } else {
            self.min_scale
        };
        AugmentParams {
            rotation,
            translate_x,
            translate_y,
            scale,
        }
    }
}

/// Apply `params` by inverse mapping each output pixel into the source and
/// sampling bilinearly. Samples outside the source read as background.
pub fn augment(img: &GrayImage, params: &AugmentParams) -> GrayImage {
    assert!(params.scale > 0.0, "scale must be positive");
    if params.is_identity() {
        return img.clone();
    }
    let side = img.side();
    let center = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = params.rotation.sin_cos();
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let x = (c as f64 - center - params.translate_x) / params.scale;
            let y = (r as f64 - center - params.translate_y) / params.scale;
            // Inverse rotation.
            let sx = cos * x + sin * y + center;
            let sy = -sin * x + cos * y + center;
            out[r * side + c] = img.sample_bilinear(sy, sx).clamp(0.0, 1.0);
        }
    }
    GrayImage::new(side, out).expect("bilinear samples stay in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_strokes, SynthOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image(seed: u64) -> GrayImage {
        let opts = SynthOptions {
            side: 64,
            ..Default::default()
        };
        synth_strokes(&mut ChaCha8Rng::seed_from_u64(seed), &opts)
    }

    #[test]
    fn identity_is_bit_identical() {
        let img = sample_image(1);
        assert_eq!(augment(&img, &AugmentParams::IDENTITY), img);
    }

    #[test]
    fn integer_translation_moves_a_pixel_exactly() {
        let mut img = GrayImage::blank(32);
        img.set(10, 5, 1.0);
        let p = AugmentParams {
            translate_x: 8.0,
            ..AugmentParams::IDENTITY
        };
        let out = augment(&img, &p);
        assert_eq!(out.get(10, 13), 1.0);
        assert!((out.pixels().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_then_inverse_recovers_interior() {
        // Smooth content so bilinear resampling error stays small.
        let side = 64;
        let px: Vec<f64> = (0..side * side)
            .map(|i| {
                let (r, c) = ((i / side) as f64, (i % side) as f64);
                0.5 + 0.4 * (r / 9.0).sin() * (c / 11.0).cos()
            })
            .collect();
        let img = GrayImage::new(side, px).unwrap();
        let theta = 12f64.to_radians();
        let fwd = AugmentParams {
            rotation: theta,
            ..AugmentParams::IDENTITY
        };
        let back = AugmentParams {
            rotation: -theta,
            ..AugmentParams::IDENTITY
        };
        let round = augment(&augment(&img, &fwd), &back);
        let margin = 8;
        let mut se = 0.0;
        let mut n = 0;
        for r in margin..side - margin {
            for c in margin..side - margin {
                se += (round.get(r, c) - img.get(r, c)).powi(2);
                n += 1;
            }
        }
        assert!(se / (n as f64) < 1e-3, "mse {}", se / n as f64);
    }

    #[test]
    fn random_augmentation_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranges = AugmentRanges::default();
        for seed in 0..20 {
            let out = augment(&sample_image(seed), &ranges.sample(&mut rng));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
