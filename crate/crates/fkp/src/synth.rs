//! Dead-leaves test images.
//!
//! Occluding discs with a power-law radius distribution reproduce the
//! scale-invariant edge statistics of natural photographs, which is what the
//! kernel estimators need from a test image.

use fkp_core::rng::stream;
use fkp_core::Image;
use rand::Rng;

const MIN_RADIUS: f64 = 1.5;
const SUPERSAMPLE: usize = 3;

/// Grayscale dead-leaves image drawn from the `synth/leaves` stream of
/// `seed`. Disc radii follow `p(r) ∝ r⁻³` on `[1.5, max(h, w)/4]` and
/// intensities are uniform on `[0.05, 0.95]`.
pub fn dead_leaves(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = stream(seed, "synth/leaves");
    let max_radius = (height.max(width) as f64 / 4.0).max(MIN_RADIUS * 2.0);
    let (a, b) = (MIN_RADIUS.powi(-2), max_radius.powi(-2));
    let n = SUPERSAMPLE;
    let (sh, sw) = (height * n, width * n);
    let mut canvas = vec![f64::NAN; sh * sw];
    let mut empty = sh * sw;
    // front to back: a pixel keeps the first disc that covers it
    let mut guard = 0;
    while empty > 0 && guard < 200_000 {
        guard += 1;
        let u: f64 = rng.random();
        let r = (a - u * (a - b)).powf(-0.5) * n as f64;
        let ci = rng.random_range(-r..sh as f64 + r);
        let cj = rng.random_range(-r..sw as f64 + r);
        let value = rng.random_range(0.05..0.95);
        let i0 = (ci - r).floor().max(0.0) as usize;
        let i1 = ((ci + r).ceil().max(0.0) as usize).min(sh);
        let j0 = (cj - r).floor().max(0.0) as usize;
        let j1 = ((cj + r).ceil().max(0.0) as usize).min(sw);
        for i in i0..i1 {
            let di = i as f64 + 0.5 - ci;
            for j in j0..j1 {
                let dj = j as f64 + 0.5 - cj;
                let slot = &mut canvas[i * sw + j];
                if slot.is_nan() && di * di + dj * dj <= r * r {
                    *slot = value;
                    empty -= 1;
                }
            }
        }
    }
    let fill = 0.5;
    let area = (n * n) as f64;
    let data = (0..height * width)
        .map(|p| {
            let (i, j) = (p / width, p % width);
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let v = canvas[(i * n + a) * sw + j * n + b];
                    acc += if v.is_nan() { fill } else { v };
                }
            }
            acc / area
        })
        .collect();
    Image::new(height, width, 1, data).expect("extents are positive")
}
