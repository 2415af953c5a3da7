use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EnergyAnalysis;
use crate::error::Result;
use crate::modulation::{bias_param_count, RankStrategy};
use crate::nn::LayerGroup;

/// Layers where the proportional rank keeps less energy than this are flagged.
pub const LOW_ENERGY_FLAG: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub layer: String,
    pub group: LayerGroup,
    pub stage: String,
    pub rows: usize,
    pub cols: usize,
    pub constant_rank: usize,
    pub constant_energy: f64,
    pub proportional_rank: usize,
    pub proportional_energy: f64,
    /// Proportional energy below [`LOW_ENERGY_FLAG`].
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: RankStrategy,
    pub mean_energy: f64,
    pub min_energy: f64,
    pub bias_params: usize,
    pub dense_params: usize,
    /// `bias_params / dense_params`.
    pub params_fraction: f64,
}

/// Constant against proportional rank, per layer and in aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub constant: StrategySummary,
    pub proportional: StrategySummary,
    pub rows: Vec<RankRow>,
    pub skipped: Vec<String>,
}

impl RankReport {
    pub fn flagged(&self) -> impl Iterator<Item = &RankRow> {
        self.rows.iter().filter(|r| r.flagged)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,group,stage,rows,cols,constant_rank,constant_energy,proportional_rank,proportional_energy,flagged\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{},{:.6},{}",
                r.layer,
                r.group.key(),
                r.stage,
                r.rows,
                r.cols,
                r.constant_rank,
                r.constant_energy,
                r.proportional_rank,
                r.proportional_energy,
                r.flagged
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn summarize(strategy: RankStrategy, energies: &[f64], shapes: &[(usize, usize)]) -> StrategySummary {
    let budget = bias_param_count(shapes, strategy);
    // No changed layer: nothing is lost, so report full energy.
    let mean_energy = if energies.is_empty() {
        1.0
    } else {
        energies.iter().sum::<f64>() / energies.len() as f64
    };
    StrategySummary {
        strategy,
        mean_energy,
        min_energy: energies.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
        bias_params: budget.params,
        dense_params: budget.dense_params,
        params_fraction: budget.fraction(),
    }
}

/// Energy captured by `Constant(constant_r)` and `Proportional(proportional_p)`
/// on every analysed layer, with the parameter cost of each choice.
pub fn rank_strategy_report(analysis: &EnergyAnalysis, constant_r: usize, proportional_p: f64) -> Result<RankReport> {
    let constant = RankStrategy::constant(constant_r);
    let proportional = RankStrategy::proportional(proportional_p);
    constant.validate()?;
    proportional.validate()?;
    let rows: Vec<RankRow> = analysis
        .curves
        .iter()
        .map(|c| {
            let cr = constant.rank_for(c.rows, c.cols);
            let pr = proportional.rank_for(c.rows, c.cols);
            let pe = c.energy_at(pr);
            RankRow {
                layer: c.layer.clone(),
                group: c.group,
                stage: c.stage.clone(),
                rows: c.rows,
                cols: c.cols,
                constant_rank: cr,
                constant_energy: c.energy_at(cr),
                proportional_rank: pr,
                proportional_energy: pe,
                flagged: pe < LOW_ENERGY_FLAG,
            }
        })
        .collect();
    let shapes: Vec<(usize, usize)> = rows.iter().map(|r| (r.rows, r.cols)).collect();
    let ce: Vec<f64> = rows.iter().map(|r| r.constant_energy).collect();
    let pe: Vec<f64> = rows.iter().map(|r| r.proportional_energy).collect();
    Ok(RankReport {
        constant: summarize(constant, &ce, &shapes),
        proportional: summarize(proportional, &pe, &shapes),
        rows,
        skipped: analysis.skipped.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::EnergyCurve;
    use crate::error::Error;
    use crate::numerics::{matmul, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([rows, cols], |_| StandardNormal.sample(&mut rng))
    }

    fn analysis_of(deltas: &[Tensor<f64>]) -> EnergyAnalysis {
        EnergyAnalysis {
            curves: deltas
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    EnergyCurve::from_delta(format!("l{i}.w"), LayerGroup::FfnProjection, d)
                        .unwrap()
                        .unwrap()
                })
                .collect(),
            skipped: vec![],
        }
    }

    /// ‖truncate_r(D)‖² / ‖D‖² by explicit reconstruction from the oracle SVD.
    fn oracle_energy(d: &Tensor<f64>, r: usize) -> f64 {
        let (rows, cols) = d.dims2().unwrap();
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, d.data());
        let svd = m.clone().svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut approx = nalgebra::DMatrix::<f64>::zeros(rows, cols);
        for &k in order.iter().take(r) {
            approx += svd.singular_values[k] * u.column(k) * vt.row(k);
        }
        approx.norm_squared() / m.norm_squared()
    }

    #[test]
    fn planted_rank_three_is_captured_by_constant_three() {
        let deltas: Vec<Tensor<f64>> = [(16, 24), (32, 16), (9, 40)]
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| matmul(&gaussian(r, 3, i as u64), &gaussian(3, c, 100 + i as u64)).unwrap())
            .collect();
        let rep = rank_strategy_report(&analysis_of(&deltas), 3, 0.05).unwrap();
        for row in &rep.rows {
            assert_eq!(row.constant_rank, 3);
            assert!((row.constant_energy - 1.0).abs() < 1e-6, "{}", row.constant_energy);
        }
        assert!((rep.constant.mean_energy - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_constant_rank_captures_everything() {
        let deltas = vec![gaussian(5, 8, 1), gaussian(12, 4, 2)];
        let rep = rank_strategy_report(&analysis_of(&deltas), 64, 1.0).unwrap();
        for row in &rep.rows {
            assert!((row.constant_energy - 1.0).abs() < 1e-9);
            assert!((row.proportional_energy - 1.0).abs() < 1e-9);
            assert!(!row.flagged);
        }
    }

    #[test]
    fn params_fraction_recount() {
        let deltas = vec![gaussian(16, 16, 1), gaussian(32, 16, 2), gaussian(3, 144, 3)];
        let rep = rank_strategy_report(&analysis_of(&deltas), 4, 0.25).unwrap();
        let dense = 16 * 16 + 32 * 16 + 3 * 144;
        let c_params = 4 * 32 + 4 * 48 + 3 * 147;
        let p_params = 4 * 32 + 4 * 48 + 147;
        assert_eq!(rep.constant.bias_params, c_params);
        assert_eq!(rep.proportional.bias_params, p_params);
        assert_eq!(rep.constant.dense_params, dense);
        assert!((rep.constant.params_fraction - c_params as f64 / dense as f64).abs() < 1e-15);
        assert!((rep.proportional.params_fraction - p_params as f64 / dense as f64).abs() < 1e-15);
    }

    #[test]
    fn flags_low_proportional_energy() {
        // Flat spectrum: rank 1 of 8 keeps 1/8 of the energy.
        let rep = rank_strategy_report(&analysis_of(&[Tensor::eye(8)]), 8, 0.125).unwrap();
        assert_eq!(rep.rows[0].proportional_rank, 1);
        assert!((rep.rows[0].proportional_energy - 0.125).abs() < 1e-12);
        assert_eq!(rep.flagged().count(), 1);
        let csv = rep.to_csv();
        assert!(csv.lines().nth(1).unwrap().ends_with(",true"));
    }

    #[test]
    fn invalid_strategies_are_rejected() {
        let an = analysis_of(&[Tensor::eye(3)]);
        assert!(matches!(rank_strategy_report(&an, 0, 0.5), Err(Error::Parameter(_))));
        assert!(matches!(rank_strategy_report(&an, 2, 1.5), Err(Error::Parameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn energies_match_truncated_reconstruction(
            seed in 0u64..10_000,
            rows in 2usize..12,
            cols in 2usize..12,
            r in 1usize..6,
            p in 0.05f64..1.0,
        ) {
            let d = gaussian(rows, cols, seed);
            let rep = rank_strategy_report(&analysis_of(std::slice::from_ref(&d)), r, p).unwrap();
            let row = &rep.rows[0];
            prop_assert!((row.constant_energy - oracle_energy(&d, row.constant_rank)).abs() < 1e-9);
            prop_assert!((row.proportional_energy - oracle_energy(&d, row.proportional_rank)).abs() < 1e-9);
        }
    }
}
