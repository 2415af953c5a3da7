use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which signal PSNR is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalChannel {
    Rgb,
    /// `Y = 0.299 R + 0.587 G + 0.114 B`.
    LumaY,
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, channel: EvalChannel) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = match channel {
        EvalChannel::Rgb => {
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            s / a.len().max(1) as f64
        }
        EvalChannel::LumaY => {
            let [3, h, w] = *a.shape() else {
                return Err(Error::Dimension(format!(
                    "luma PSNR needs a 3×H×W image, got {:?}",
                    a.shape()
                )));
            };
            let n = h * w;
            let luma = |t: &Tensor<f32>, i: usize| {
                let d = t.data();
                0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64
            };
            (0..n).map(|i| (luma(a, i) - luma(b, i)).powi(2)).sum::<f64>() / n.max(1) as f64
        }
    };
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::synth_clean;

    #[test]
    fn identical_images_are_infinite() {
        let x = synth_clean(0, 8, 8);
        assert_eq!(psnr(&x, &x, EvalChannel::Rgb).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&x, &x, EvalChannel::LumaY).unwrap(), f64::INFINITY);
    }

    #[test]
    fn one_level_offset() {
        let x = Tensor::<f32>::filled([3, 16, 16], 0.5);
        let y = x.map(|v| v + 1.0 / 255.0);
        let expected = 20.0 * 255.0f64.log10();
        assert!((psnr(&x, &y, EvalChannel::Rgb).unwrap() - expected).abs() < 0.01);
        // Luma weights sum to one, so a grey offset gives the same figure.
        assert!((psnr(&x, &y, EvalChannel::LumaY).unwrap() - expected).abs() < 0.01);
    }

    #[test]
    fn symmetric_and_shape_checked() {
        let a = synth_clean(1, 8, 8);
        let b = synth_clean(2, 8, 8);
        for ch in [EvalChannel::Rgb, EvalChannel::LumaY] {
            assert_eq!(psnr(&a, &b, ch).unwrap(), psnr(&b, &a, ch).unwrap());
        }
        let c = synth_clean(1, 8, 16);
        assert!(matches!(psnr(&a, &c, EvalChannel::Rgb), Err(Error::Dimension(_))));
    }

    #[test]
    fn luma_ignores_chroma_only_changes() {
        let x = Tensor::<f32>::filled([3, 4, 4], 0.5);
        // A shift along a direction orthogonal to the luma weights.
        let mut y = x.clone();
        let n = 16;
        for i in 0..n {
            y.data_mut()[i] += 0.587 * 0.01;
            y.data_mut()[n + i] -= 0.299 * 0.01;
        }
        assert!(psnr(&x, &y, EvalChannel::LumaY).unwrap() > 100.0);
        assert!(psnr(&x, &y, EvalChannel::Rgb).unwrap() < 60.0);
    }
}
