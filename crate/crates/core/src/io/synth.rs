use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::Dataset;

/// Number of distinct spatial patterns a class can be drawn from.
pub const PATTERN_COUNT: usize = 8;

/// Generator settings for [`synth_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Gaussian pixel noise as a fraction of the 0..255 range.
    pub noise: f64,
    pub seed: u64,
    /// Class `c` draws pattern `(c + pattern_offset) % PATTERN_COUNT`.
    pub pattern_offset: usize,
}

impl SynthSpec {
    pub fn new(n_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            n_classes,
            per_class,
            size,
            noise: 0.08,
            seed,
            pattern_offset: 0,
        }
    }
}

/// Two-colour textures whose class is carried only by spatial layout.
///
/// Foreground and background colours are drawn from the same distribution for
/// every class and each mask covers about half the image, so per-channel
/// means carry no class signal. Samples are interleaved by class.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.n_classes > PATTERN_COUNT {
        return Err(Error::Spec(format!(
            "classes must be in 1..={PATTERN_COUNT}, got {}",
            spec.n_classes
        )));
    }
    if spec.per_class == 0 || spec.size < 8 {
        return Err(Error::Spec("per-class must be positive and size at least 8".into()));
    }
    if !(0.0..1.0).contains(&spec.noise) {
        return Err(Error::Spec(format!("noise {} outside [0, 1)", spec.noise)));
    }
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise * 255.0).expect("valid normal");
    let n = spec.n_classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut mask = vec![false; s * s];
    for _ in 0..spec.per_class {
        for c in 0..spec.n_classes {
            draw_mask((c + spec.pattern_offset) % PATTERN_COUNT, s, &mut rng, &mut mask);
            let (fg, bg) = colours(&mut rng);
            for ch in 0..3 {
                for &m in &mask {
                    let base = if m { fg[ch] } else { bg[ch] };
                    let v = base + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(c as u16);
        }
    }
    Dataset::new(3, s, s, spec.n_classes, pixels, labels)
}

fn colours(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let contrast: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if contrast > 150.0 {
            return (a, b);
        }
    }
}

fn draw_mask(pattern: usize, s: usize, rng: &mut ChaCha8Rng, mask: &mut [bool]) {
    let scale = s as f64 / 32.0;
    let period = rng.gen_range(4.0..8.0) * scale;
    let phase = rng.gen_range(0.0..period * 2.0);
    let cx = rng.gen_range(0.3..0.7) * s as f64;
    let cy = rng.gen_range(0.3..0.7) * s as f64;
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe = |t: f64| ((t + phase) / period).floor().rem_euclid(2.0) == 1.0;
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            mask[y * s + x] = match pattern {
                0 => stripe(fy),
                1 => stripe(fx),
                2 => stripe((fx + fy) / std::f64::consts::SQRT_2),
                3 => stripe((fx - fy) / std::f64::consts::SQRT_2 + s as f64),
                4 => stripe(fx) != stripe(fy + period),
                5 => stripe((dx * dx + dy * dy).sqrt()),
                6 => (dx * dx + dy * dy).sqrt() < s as f64 / (2.0 * std::f64::consts::PI).sqrt(),
                _ => dx * angle.cos() + dy * angle.sin() > 0.0,
            };
        }
    }
}
