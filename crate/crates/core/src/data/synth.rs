use rand::Rng;

use super::GrayImage;

/// Synthetic stroke characters: bright quadratic Bézier strokes on black.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub side: usize,
    pub n_strokes: usize,
    pub pen_width: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            side: 128,
            n_strokes: 3,
            pen_width: 2.0,
        }
    }
}

const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.20;
const SEGMENTS: usize = 48;

fn bezier(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
        u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
    )
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn draw_stroke(px: &mut [f64], side: usize, ctrl: [(f64, f64); 3], width: f64) {
    let half = width / 2.0;
    let pts: Vec<(f64, f64)> = (0..=SEGMENTS)
        .map(|i| bezier(ctrl[0], ctrl[1], ctrl[2], i as f64 / SEGMENTS as f64))
        .collect();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pad = half + 1.0;
        let c0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
        let c1 = ((a.0.max(b.0) + pad).ceil().min(side as f64 - 1.0)) as usize;
        let r0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
        let r1 = ((a.1.max(b.1) + pad).ceil().min(side as f64 - 1.0)) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d = seg_dist((c as f64 + 0.5, r as f64 + 0.5), a, b);
                // One-pixel linear falloff at the pen edge.
                let v = (half + 0.5 - d).clamp(0.0, 1.0);
                let slot = &mut px[r * side + c];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
}

fn draw_once<R: Rng>(rng: &mut R, opts: &SynthOptions) -> GrayImage {
    let s = opts.side as f64;
    let mut px = vec![0.0; opts.side * opts.side];
    let point = |rng: &mut R| (rng.gen_range(0.15 * s..0.85 * s), rng.gen_range(0.15 * s..0.85 * s));
    for _ in 0..opts.n_strokes {
        let p0 = point(rng);
        let mut p2 = point(rng);
        while ((p2.0 - p0.0).powi(2) + (p2.1 - p0.1).powi(2)).sqrt() < 0.3 * s {
            p2 = point(rng);
        }
        let p1 = point(rng);
        draw_stroke(&mut px, opts.side, [p0, p1, p2], opts.pen_width);
    }
    GrayImage::new(opts.side, px).expect("rasterized values are in range")
}

/// Draw one random character.
///
/// Drawings whose foreground fraction (pixels ≥ 0.5) falls outside
/// `[0.02, 0.20]` are redrawn from the same rng stream, so the result is a
/// pure function of the rng state.
pub fn synth_strokes<R: Rng>(rng: &mut R, opts: &SynthOptions) -> GrayImage {
    if opts.n_strokes == 0 {
        return GrayImage::blank(opts.side);
    }
    let mut last = draw_once(rng, opts);
    for _ in 0..256 {
        let f = last.foreground_fraction();
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            break;
        }
        last = draw_once(rng, opts);
    }
    last
}

pub fn synth_dataset<R: Rng>(rng: &mut R, n: usize, opts: &SynthOptions) -> Vec<GrayImage> {
    (0..n).map(|_| synth_strokes(rng, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_strokes_is_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = SynthOptions {
            n_strokes: 0,
            ..Default::default()
        };
        assert!(synth_strokes(&mut rng, &opts).pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_image() {
        let opts = SynthOptions::default();
        let a = synth_strokes(&mut ChaCha8Rng::seed_from_u64(9), &opts);
        let b = synth_strokes(&mut ChaCha8Rng::seed_from_u64(9), &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn foreground_fraction_within_bounds_over_many_seeds() {
        for side in [64, 128] {
            let opts = SynthOptions {
                side,
                ..Default::default()
            };
            let seeds = if side == 64 { 1000 } else { 200 };
            for seed in 0..seeds {
                let img = synth_strokes(&mut ChaCha8Rng::seed_from_u64(seed), &opts);
                let f = img.foreground_fraction();
                assert!(
                    (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f),
                    "side {side} seed {seed}: fraction {f}"
                );
            }
        }
    }
}
