use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_compatible, stage_of};
use crate::error::Result;
use crate::model::Checkpoint;
use crate::nn::LayerGroup;
use crate::numerics::{svd, Tensor};

/// Singular-value spectrum of one weight delta and its accumulative energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub layer: String,
    pub group: LayerGroup,
    pub stage: String,
    pub rows: usize,
    pub cols: usize,
    /// Nonincreasing singular values of the delta.
    pub sigma: Vec<f64>,
    /// `energy[r - 1]` is the fraction of squared Frobenius norm in the top `r` components.
    pub energy: Vec<f64>,
}

impl EnergyCurve {
    /// Curve for `delta`, or `None` when it is identically zero.
    pub fn from_delta(layer: impl Into<String>, group: LayerGroup, delta: &Tensor<f64>) -> Result<Option<Self>> {
        let (rows, cols) = delta.dims2()?;
        if delta.is_zero() {
            return Ok(None);
        }
        let sigma = svd(delta)?.sigma;
        let energy = accumulative_energy(&sigma);
        let layer = layer.into();
        Ok(Some(Self {
            stage: stage_of(&layer).to_string(),
            layer,
            group,
            rows,
            cols,
            sigma,
            energy,
        }))
    }

    pub fn full_rank(&self) -> usize {
        self.sigma.len()
    }

    /// Captured energy at rank `r`, saturating at full rank.
    pub fn energy_at(&self, r: usize) -> f64 {
        match r.min(self.energy.len()) {
            0 => 0.0,
            k => self.energy[k - 1],
        }
    }
}

/// `E(r) = Σ_{i≤r} σᵢ² / Σ σᵢ²` for every `r`.
pub fn accumulative_energy(sigma: &[f64]) -> Vec<f64> {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyAnalysis {
    pub curves: Vec<EnergyCurve>,
    /// Layers whose delta was exactly zero.
    pub skipped: Vec<String>,
}

impl EnergyAnalysis {
    /// gnuplot data: one block per layer, separated by two blank lines so
    /// each layer is addressable with `index`.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::new();
        for c in &self.curves {
            let _ = writeln!(
                s,
                "# layer {} stage {} group {} ({}x{})",
                c.layer,
                c.stage,
                c.group.key(),
                c.rows,
                c.cols
            );
            let _ = writeln!(s, "# rank energy");
            for (i, e) in c.energy.iter().enumerate() {
                let _ = writeln!(s, "{} {:.8}", i + 1, e);
            }
            s.push_str("\n\n");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("analysis serializes")
    }
}

/// Energy curves of `finetuned − reference` for every matrix weight outside
/// the LayerNorm group. All-zero deltas are skipped and listed.
pub fn energy_curves(reference: &Checkpoint, finetuned: &Checkpoint) -> Result<EnergyAnalysis> {
    check_compatible(reference, finetuned)?;
    let results: Vec<(String, Option<EnergyCurve>)> = reference
        .backbone
        .par_iter()
        .zip(finetuned.backbone.par_iter())
        .filter(|(a, _)| a.group != LayerGroup::LayerNorm && a.tensor.ndim() == 2)
        .map(|(a, b)| {
            let delta: Tensor<f64> = b.tensor.cast::<f64>().sub(&a.tensor.cast::<f64>())?;
            Ok((
                a.name.clone(),
                EnergyCurve::from_delta(a.name.clone(), a.group, &delta)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out = EnergyAnalysis {
        curves: Vec::new(),
        skipped: Vec::new(),
    };
    for (name, curve) in results {
        match curve {
            Some(c) => out.curves.push(c),
            None => out.skipped.push(name),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::testutil::{checkpoint, perturbed};
    use proptest::prelude::*;

    fn oracle_sigma(t: &Tensor<f64>) -> Vec<f64> {
        let (r, c) = t.dims2().unwrap();
        nalgebra::DMatrix::from_row_slice(r, c, t.data())
            .singular_values()
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn diag_three_four() {
        let c = EnergyCurve::from_delta("w", LayerGroup::FfnProjection, &Tensor::diag(&[3.0, 4.0]))
            .unwrap()
            .unwrap();
        assert!((c.energy[0] - 0.64).abs() < 1e-12);
        assert!((c.energy[1] - 1.0).abs() < 1e-12);
        assert_eq!(c.energy_at(0), 0.0);
        assert_eq!(c.energy_at(10), 1.0);
    }

    #[test]
    fn rank_one_delta_is_captured_at_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7];
        let d = Tensor::from_fn([4, 3], |i| u[i / 3] * v[i % 3]);
        let c = EnergyCurve::from_delta("w", LayerGroup::QkvProjection, &d)
            .unwrap()
            .unwrap();
        assert!((c.energy[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_delta_is_skipped() {
        assert!(
            EnergyCurve::from_delta("w", LayerGroup::OutputLayer, &Tensor::zeros([3, 5]))
                .unwrap()
                .is_none()
        );
        let a = checkpoint(0);
        let mut b = a.clone();
        let target = b.backbone.iter_mut().find(|t| t.name == "embed.weight").unwrap();
        target.tensor.data_mut()[0] += 0.5;
        let an = energy_curves(&a, &b).unwrap();
        assert_eq!(an.curves.len(), 1);
        assert_eq!(an.curves[0].layer, "embed.weight");
        assert_eq!(an.curves[0].stage, "embed");
        assert!(an.skipped.len() > 10);
        assert!(an.skipped.iter().all(|n| !n.contains("norm")));
    }

    #[test]
    fn curves_cover_every_matrix_weight() {
        let a = checkpoint(0);
        let b = perturbed(&a, 9, 0.01);
        let an = energy_curves(&a, &b).unwrap();
        let expected = a.backbone.iter().filter(|t| t.group != LayerGroup::LayerNorm).count();
        assert_eq!(an.curves.len(), expected);
        assert!(an.skipped.is_empty());
        for c in &an.curves {
            assert!((c.energy.last().unwrap() - 1.0).abs() < 1e-6);
            assert_eq!(c.full_rank(), c.rows.min(c.cols));
        }
        let text = an.to_gnuplot();
        assert_eq!(text.matches("# layer ").count(), an.curves.len());
    }

    #[test]
    fn spectrum_matches_independent_svd() {
        let a = checkpoint(0);
        let b = perturbed(&a, 5, 0.03);
        for (x, y) in a.backbone.iter().zip(&b.backbone) {
            if x.group == LayerGroup::LayerNorm {
                continue;
            }
            let d = y.tensor.cast::<f64>().sub(&x.tensor.cast::<f64>()).unwrap();
            let mine = EnergyCurve::from_delta(&x.name, x.group, &d).unwrap().unwrap();
            let mut theirs = oracle_sigma(&d);
            theirs.sort_by(|p, q| q.total_cmp(p));
            let total: f64 = theirs.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            for (k, s) in theirs.iter().enumerate() {
                acc += s * s;
                assert!((mine.energy[k] - acc / total).abs() < 1e-9, "{} r={}", x.name, k + 1);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nondecreasing_normalized_and_scale_invariant(
            rows in 1usize..7,
            cols in 1usize..7,
            data in prop::collection::vec(-5.0f64..5.0, 36),
            scale in prop::sample::select(vec![-3.0, -0.01, 0.5, 7.0, 1e3]),
        ) {
            let d = Tensor::new([rows, cols], data[..rows * cols].to_vec()).unwrap();
            prop_assume!(d.max_abs() > 1e-6);
            let c = EnergyCurve::from_delta("w", LayerGroup::FfnProjection, &d).unwrap().unwrap();
            prop_assert!(c.energy.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            prop_assert!((c.energy.last().unwrap() - 1.0).abs() < 1e-6);
            let s = EnergyCurve::from_delta("w", LayerGroup::FfnProjection, &d.scale(scale)).unwrap().unwrap();
            for (e, f) in c.energy.iter().zip(&s.energy) {
                prop_assert!((e - f).abs() < 1e-9);
            }
        }
    }
}
