use rand::Rng;

use crate::numerics::Tensor;
use crate::rng;

/// Lower bound on the pixel standard deviation of a synthesized image.
pub const MIN_CLEAN_STD: f64 = 0.05;

fn smoothstep(edge: f64) -> f64 {
    // Coverage of a pixel by a shape whose signed distance is `edge` (1 px ramp).
    (0.5 - edge).clamp(0.0, 1.0)
}

fn draw(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut r = rng::stream(seed);
    let (h, w) = (height as f64, width as f64);
    let n = height * width;
    let mut img = vec![0.0f64; 3 * n];

    // Smooth two-colour gradient along a random direction.
    let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let c0: [f64; 3] = [r.random(), r.random(), r.random()];
    let c1: [f64; 3] = [r.random(), r.random(), r.random()];
    let half = 0.5 * (h.abs() * dy.abs() + w.abs() * dx.abs()).max(1.0);
    for y in 0..height {
        for x in 0..width {
            let p = ((x as f64 - w / 2.0) * dx + (y as f64 - h / 2.0) * dy) / (2.0 * half) + 0.5;
            let p = p.clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * n + y * width + x] = c0[c] * (1.0 - p) + c1[c] * p;
            }
        }
    }

    // Anti-aliased discs and rectangles.
    let shapes = r.random_range(3..7);
    let scale = h.min(w);
    for _ in 0..shapes {
        let colour: [f64; 3] = [r.random(), r.random(), r.random()];
        let alpha: f64 = r.random_range(0.6..1.0);
        let (cx, cy) = (r.random_range(0.0..w), r.random_range(0.0..h));
        let disc = r.random_bool(0.5);
        let (a, b) = (
            r.random_range(0.08 * scale..0.3 * scale),
            r.random_range(0.08 * scale..0.3 * scale),
        );
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sd = if disc {
                    (px * px + py * py).sqrt() - a
                } else {
                    (px.abs() - a).max(py.abs() - b)
                };
                let cov = smoothstep(sd) * alpha;
                if cov > 0.0 {
                    for c in 0..3 {
                        let v = &mut img[c * n + y * width + x];
                        *v = *v * (1.0 - cov) + colour[c] * cov;
                    }
                }
            }
        }
    }

    // Band-limited texture: a few mid-frequency plane waves.
    let waves = r.random_range(2..5);
    for _ in 0..waves {
        let freq = r.random_range(0.15..0.9);
        let dir: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = r.random_range(0.02..0.06);
        let tint: [f64; 3] = [
            r.random_range(0.5..1.0),
            r.random_range(0.5..1.0),
            r.random_range(0.5..1.0),
        ];
        for y in 0..height {
            for x in 0..width {
                let s = amp * (freq * (x as f64 * dir.cos() + y as f64 * dir.sin()) + phase).sin();
                for c in 0..3 {
                    img[c * n + y * width + x] += s * tint[c];
                }
            }
        }
    }

    Tensor::new(
        [3, height, width],
        img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .expect("consistent shape")
}

fn std_dev(x: &Tensor<f32>) -> f64 {
    let n = x.len() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Random smooth gradient, shapes and texture, values in `[0, 1]`.
///
/// Draws that come out too flat are rejected and redrawn from a derived seed,
/// so the result always has standard deviation at least [`MIN_CLEAN_STD`].
pub fn synth_clean(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    let mut attempt = 0u64;
    loop {
        let img = draw(rng::derive_seed(seed, attempt), height, width);
        if std_dev(&img) >= MIN_CLEAN_STD || height * width < 4 {
            return img;
        }
        attempt += 1;
    }
}
