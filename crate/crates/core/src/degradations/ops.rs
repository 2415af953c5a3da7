use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

fn dims(x: &Tensor<f32>) -> (usize, usize, usize) {
    match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => panic!("degradations expect C×H×W images, got {:?}", x.shape()),
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// `clamp(x + n)` with `n ~ N(0, (σ/255)²)` per element.
pub fn apply_noise(x: &Tensor<f32>, sigma: f64, seed: u64) -> Tensor<f32> {
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let mut r = rng::stream(seed);
    let data = x
        .data()
        .iter()
        .map(|&v| clamp01(v as f64 + normal.sample(&mut r)))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalized `len × len` line kernel at `angle` degrees (0 = horizontal).
///
/// `len` taps spaced one pixel apart along the line are splatted bilinearly,
/// so angle 0 gives exactly `len` equal taps.
pub fn motion_kernel(len: usize, angle: f64) -> Result<Tensor<f64>> {
    if len.is_multiple_of(2) {
        return Err(Error::Parameter(format!("motion blur length must be odd, got {len}")));
    }
    let c = (len / 2) as f64;
    let (dx, dy) = (angle.to_radians().cos(), -angle.to_radians().sin());
    let mut k = vec![0.0f64; len * len];
    for j in 0..len {
        let t = j as f64 - c;
        let (px, py) = (c + t * dx, c + t * dy);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let wgt = wx * wy;
                if wgt <= 1e-12 {
                    continue;
                }
                let (xi, yi) = ((x0 + ox) as usize, (y0 + oy) as usize);
                k[yi.min(len - 1) * len + xi.min(len - 1)] += wgt;
            }
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Tensor::new([len, len], k)
}

/// Convolution with a linear motion kernel, reflect padding. The blur is
/// fully determined by `len` and `angle`; `_seed` keeps the operator
/// signature uniform.
pub fn apply_motion_blur(x: &Tensor<f32>, len: usize, angle: f64, _seed: u64) -> Result<Tensor<f32>> {
    let k = motion_kernel(len, angle)?;
    if len == 1 {
        return Ok(x.clone());
    }
    let (ch, h, w) = dims(x);
    let r = (len / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..len * len)
        .filter(|&i| k.data()[i] != 0.0)
        .map(|i| ((i / len) as isize - r, (i % len) as isize - r, k.data()[i]))
        .collect();
    let xd = x.data();
    let mut out = vec![0.0f32; x.len()];
    for c in 0..ch {
        let plane = &xd[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f64;
                for &(ky, kx, wgt) in &taps {
                    // Correlation with the flipped kernel is convolution.
                    let sy = reflect(y as isize - ky, h);
                    let sx = reflect(xx as isize - kx, w);
                    acc += wgt * plane[sy * w + sx] as f64;
                }
                out[c * h * w + y * w + xx] = clamp01(acc);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Adds `weight` to `mask` around the sub-pixel point `(px, py)`.
fn splat(mask: &mut [f64], h: usize, w: usize, px: f64, py: f64, weight: f64) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x0 as isize + ox, y0 as isize + oy);
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                mask[yi as usize * w + xi as usize] += weight * wx * wy;
            }
        }
    }
}

fn add_mask(x: &Tensor<f32>, mask: &[f64]) -> Tensor<f32> {
    let (ch, h, w) = dims(x);
    let n = h * w;
    let mut out = x.data().to_vec();
    for c in 0..ch {
        for i in 0..n {
            out[c * n + i] = clamp01(out[c * n + i] as f64 + mask[i].min(1.0));
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("density must lie in (0, 1), got {density}")))
    }
}

/// Thin bright streaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Approximate fraction of pixels crossed by a streak.
    pub density: f64,
    /// Streak length in pixels.
    pub length: f64,
    /// Mean streak angle in degrees from vertical.
    pub angle: f64,
    pub angle_jitter: f64,
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            density: 0.08,
            length: 6.0,
            angle: 12.0,
            angle_jitter: 6.0,
            intensity: 0.5,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        check_density(self.density)?;
        if !(self.length > 0.0 && self.intensity > 0.0 && self.angle_jitter >= 0.0) {
            return Err(Error::Parameter("rain length and intensity must be positive".into()));
        }
        Ok(())
    }
}

/// `clamp(x + mask·intensity)` with a seeded layer of oriented segments.
pub fn apply_rain(x: &Tensor<f32>, p: &RainParams, seed: u64) -> Result<Tensor<f32>> {
    p.validate()?;
    let (_, h, w) = dims(x);
    let mut r = rng::stream(seed);
    let count = (p.density * (h * w) as f64 / p.length).round() as usize;
    let mut mask = vec![0.0f64; h * w];
    for _ in 0..count {
        let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let jitter = if p.angle_jitter > 0.0 {
            r.random_range(-p.angle_jitter..p.angle_jitter)
        } else {
            0.0
        };
        let a = (p.angle + jitter).to_radians();
        let (dx, dy) = (a.sin(), a.cos());
        let strength = p.intensity * r.random_range(0.6..1.0);
        let steps = (2.0 * p.length).ceil() as usize;
        for s in 0..=steps {
            let t = (s as f64 / steps as f64 - 0.5) * p.length;
            splat(&mut mask, h, w, cx + t * dx, cy + t * dy, 0.5 * strength);
        }
    }
    Ok(add_mask(x, &mask))
}

/// Soft bright discs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnowParams {
    /// Approximate fraction of pixels covered by flakes.
    pub density: f64,
    /// Mean flake radius in pixels.
    pub size: f64,
    pub intensity: f64,
}

impl Default for SnowParams {
    fn default() -> Self {
        Self {
            density: 0.05,
            size: 1.2,
            intensity: 0.8,
        }
    }
}

impl SnowParams {
    pub fn validate(&self) -> Result<()> {
        check_density(self.density)?;
        if !(self.size > 0.0 && self.intensity > 0.0) {
            return Err(Error::Parameter("snow size and intensity must be positive".into()));
        }
        Ok(())
    }
}

/// `clamp(x + mask)` with seeded Gaussian-profile flakes.
pub fn apply_snow(x: &Tensor<f32>, p: &SnowParams, seed: u64) -> Result<Tensor<f32>> {
    p.validate()?;
    let (_, h, w) = dims(x);
    let mut r = rng::stream(seed);
    let area = std::f64::consts::PI * p.size * p.size;
    let count = (p.density * (h * w) as f64 / area).round() as usize;
    let mut mask = vec![0.0f64; h * w];
    for _ in 0..count {
        let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let radius = p.size * r.random_range(0.6..1.4);
        let strength = p.intensity * r.random_range(0.7..1.0);
        let reach = (3.0 * radius).ceil() as isize;
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let (xi, yi) = (cx.floor() as isize + ox, cy.floor() as isize + oy);
                if xi < 0 || yi < 0 || xi as usize >= w || yi as usize >= h {
                    continue;
                }
                let (ddx, ddy) = (xi as f64 + 0.5 - cx, yi as f64 + 0.5 - cy);
                let d2 = ddx * ddx + ddy * ddy;
                mask[yi as usize * w + xi as usize] += strength * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    Ok(add_mask(x, &mask))
}

/// Smooth synthetic depth in `[0.2, 1]`.
pub fn haze_depth(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut r = rng::stream(seed);
    let ramp: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.02..0.15),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.1..0.4),
            )
        })
        .collect();
    let mut d: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let s = (h.max(w)) as f64;
            let mut v = (x * ramp.cos() + y * ramp.sin()) / s;
            for &(f, dir, ph, amp) in &waves {
                v += amp * (f * (x * dir.cos() + y * dir.sin()) + ph).cos();
            }
            v
        })
        .collect();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    for v in &mut d {
        let unit = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        *v = 0.2 + 0.8 * unit;
    }
    d
}

/// Atmospheric scattering `y = x·t + A·(1 − t)`, `t = exp(−β·d)`.
pub fn apply_haze(x: &Tensor<f32>, beta: f64, airlight: f64, seed: u64) -> Result<Tensor<f32>> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if !(0.7..=1.0).contains(&airlight) {
        return Err(Error::Parameter(format!(
            "airlight must lie in [0.7, 1.0], got {airlight}"
        )));
    }
    let (ch, h, w) = dims(x);
    let depth = haze_depth(seed, h, w);
    let n = h * w;
    let mut out = x.data().to_vec();
    for c in 0..ch {
        for i in 0..n {
            let t = (-beta * depth[i]).exp();
            out[c * n + i] = clamp01(out[c * n + i] as f64 * t + airlight * (1.0 - t));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{psnr, synth_clean, EvalChannel};

    fn gray(v: f32, h: usize, w: usize) -> Tensor<f32> {
        Tensor::filled([3, h, w], v)
    }

    #[test]
    fn noise_psnr_matches_closed_form_at_mid_gray() {
        let x = gray(0.5, 64, 64);
        let expected = 20.0 * (255.0f64 / 25.0).log10();
        for seed in 0..5 {
            let y = apply_noise(&x, 25.0, seed);
            let p = psnr(&y, &x, EvalChannel::Rgb).unwrap();
            assert!((p - expected).abs() < 0.15, "seed {seed}: {p} vs {expected}");
        }
    }

    #[test]
    fn tiny_noise_is_tiny_and_seeded() {
        let x = synth_clean(1, 16, 16);
        let y = apply_noise(&x, 1e-6, 3);
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(apply_noise(&x, 25.0, 7).bitwise_eq(&apply_noise(&x, 25.0, 7)));
        assert!(!apply_noise(&x, 25.0, 7).bitwise_eq(&apply_noise(&x, 25.0, 8)));
    }

    #[test]
    fn noise_psnr_decreases_with_sigma() {
        for seed in 0..10 {
            let x = synth_clean(seed, 32, 32);
            let p: Vec<f64> = [15.0, 25.0, 50.0]
                .iter()
                .map(|&s| psnr(&x, &apply_noise(&x, s, seed), EvalChannel::Rgb).unwrap())
                .collect();
            assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
        }
    }

    #[test]
    fn motion_kernel_construction() {
        let k = motion_kernel(5, 0.0).unwrap();
        for (i, &v) in k.data().iter().enumerate() {
            let expect = if i / 5 == 2 { 0.2 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "tap {i}: {v}");
        }
        for angle in [0.0, 17.0, 45.0, 90.0, 133.0] {
            let k = motion_kernel(7, angle).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-12);
            assert!(k.data().iter().all(|&v| v >= 0.0));
        }
        assert!(matches!(motion_kernel(4, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn blur_of_an_impulse_spreads_horizontally() {
        let mut x = Tensor::<f32>::zeros([3, 9, 9]);
        for c in 0..3 {
            x.data_mut()[c * 81 + 4 * 9 + 4] = 1.0;
        }
        let y = apply_motion_blur(&x, 5, 0.0, 0).unwrap();
        for c in 0..3 {
            for yy in 0..9 {
                for xx in 0..9 {
                    let v = y.data()[c * 81 + yy * 9 + xx];
                    let expect = if yy == 4 && (2..=6).contains(&xx) { 0.2 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn blur_identities() {
        let x = synth_clean(4, 16, 16);
        assert!(apply_motion_blur(&x, 1, 30.0, 0).unwrap().bitwise_eq(&x));
        let flat = gray(0.3, 16, 16);
        let y = apply_motion_blur(&flat, 7, 33.0, 0).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert!(matches!(apply_motion_blur(&x, 6, 0.0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn blur_preserves_interior_mean() {
        for seed in 0..5 {
            let x = synth_clean(seed, 64, 64);
            let y = apply_motion_blur(&x, 5, 20.0 * seed as f64, 0).unwrap();
            let mean = |t: &Tensor<f32>| {
                let mut s = 0.0f64;
                let mut n = 0;
                for c in 0..3 {
                    for yy in 8..56 {
                        for xx in 8..56 {
                            s += t.data()[c * 4096 + yy * 64 + xx] as f64;
                            n += 1;
                        }
                    }
                }
                s / n as f64
            };
            assert!((mean(&x) - mean(&y)).abs() < 1e-3, "seed {seed}");
        }
    }

    #[test]
    fn rain_and_snow_only_brighten() {
        let x = synth_clean(5, 32, 32);
        let rain = apply_rain(&x, &RainParams::default(), 1).unwrap();
        let snow = apply_snow(&x, &SnowParams::default(), 1).unwrap();
        for y in [&rain, &snow] {
            assert!(y.data().iter().zip(x.data()).all(|(a, b)| a >= b));
            assert!(!y.bitwise_eq(&x));
        }
        assert!(rain.bitwise_eq(&apply_rain(&x, &RainParams::default(), 1).unwrap()));
        assert!(!rain.bitwise_eq(&apply_rain(&x, &RainParams::default(), 2).unwrap()));
        assert!(snow.bitwise_eq(&apply_snow(&x, &SnowParams::default(), 1).unwrap()));
    }

    #[test]
    fn vanishing_density_is_identity() {
        let x = synth_clean(6, 32, 32);
        let rain = RainParams {
            density: 1e-9,
            ..RainParams::default()
        };
        let snow = SnowParams {
            density: 1e-9,
            ..SnowParams::default()
        };
        assert!(apply_rain(&x, &rain, 3).unwrap().bitwise_eq(&x));
        assert!(apply_snow(&x, &snow, 3).unwrap().bitwise_eq(&x));
        let zero = RainParams {
            density: 0.0,
            ..RainParams::default()
        };
        assert!(matches!(apply_rain(&x, &zero, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn haze_limits_and_monotonicity() {
        let x = synth_clean(7, 32, 32);
        let thin = apply_haze(&x, 1e-9, 0.9, 2).unwrap();
        assert!(thin.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let thick = apply_haze(&x, 1e3, 0.9, 2).unwrap();
        assert!(thick.data().iter().all(|v| (v - 0.9).abs() < 1e-6));
        let gap = |beta: f64| {
            let y = apply_haze(&x, beta, 0.9, 2).unwrap();
            (y.data().iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64 - 0.9).abs()
        };
        let (g1, g2, g3) = (gap(0.5), gap(1.0), gap(2.0));
        assert!(g1 > g2 && g2 > g3, "{g1} {g2} {g3}");
        assert!(matches!(apply_haze(&x, 0.0, 0.9, 2), Err(Error::Parameter(_))));
        assert!(matches!(apply_haze(&x, 1.0, 0.5, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }
}
