use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::leading_left_singular;
use crate::tensor::{matricize, Mode, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerModel {
    pub core: Tensor3,
    pub time_factors: DMatrix<f64>,
    pub asset_factors: DMatrix<f64>,
    pub feature_factors: DMatrix<f64>,
    pub ranks: [usize; 3],
    pub explained_variance: f64,
    pub iterations: usize,
}

impl TuckerModel {
    /// `G ×1 A ×2 B ×3 C`.
    pub fn reconstruct(&self) -> Tensor3 {
        self.core
            .mode_product(&self.time_factors, Mode::Time)
            .and_then(|t| t.mode_product(&self.asset_factors, Mode::Asset))
            .and_then(|t| t.mode_product(&self.feature_factors, Mode::Feature))
            .expect("factor shapes fixed at construction")
    }

    fn factor(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::Time => &self.time_factors,
            Mode::Asset => &self.asset_factors,
            Mode::Feature => &self.feature_factors,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TuckerOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TuckerOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

fn project_except(x: &Tensor3, factors: &[DMatrix<f64>; 3], skip: Mode) -> Result<Tensor3> {
    let mut y = x.clone();
    for m in Mode::ALL {
        if m != skip {
            y = y.mode_product(&factors[m.index() - 1].transpose(), m)?;
        }
    }
    Ok(y)
}

/// Tucker decomposition by higher-order orthogonal iteration, started from
/// the truncated HOSVD.
pub fn tucker(x: &Tensor3, ranks: [usize; 3], opts: &TuckerOptions) -> Result<TuckerModel> {
    let shape = x.shape();
    for (n, (&r, &d)) in ranks.iter().zip(&shape).enumerate() {
        if r == 0 || r > d {
            return Err(Error::invalid(
                "ranks",
                format!("mode-{} rank {r} outside 1..={d}", n + 1),
            ));
        }
    }
    for n in 0..3 {
        let others = ranks[(n + 1) % 3] * ranks[(n + 2) % 3];
        if ranks[n] > others {
            return Err(Error::invalid(
                "ranks",
                format!("mode-{} rank {} exceeds the product of the other ranks ({others})", n + 1, ranks[n]),
            ));
        }
    }
    let norm_x = x.frobenius_sq();
    let mut factors: [DMatrix<f64>; 3] = [0, 1, 2].map(|n| {
        leading_left_singular(&matricize(x, Mode::ALL[n]).matrix, ranks[n])
    });

    let mut core_norm = 0.0;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        for m in Mode::ALL {
            let y = project_except(x, &factors, m)?;
            let n = m.index() - 1;
            factors[n] = leading_left_singular(&matricize(&y, m).matrix, ranks[n]);
        }
        let core = project_except(x, &factors, Mode::Feature)?
            .mode_product(&factors[2].transpose(), Mode::Feature)?;
        let new_norm = core.frobenius_sq();
        let done = (new_norm - core_norm).abs() <= opts.tol * norm_x.max(f64::MIN_POSITIVE);
        core_norm = new_norm;
        if done {
            break;
        }
    }

    // sign convention: largest-magnitude entry of each column positive
    for f in factors.iter_mut() {
        for mut col in f.column_iter_mut() {
            let peak = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            if peak < 0.0 {
                col.neg_mut();
            }
        }
    }
    let core = project_except(x, &factors, Mode::Feature)?
        .mode_product(&factors[2].transpose(), Mode::Feature)?;
    let [a, b, c] = factors;
    let mut model = TuckerModel {
        core,
        time_factors: a,
        asset_factors: b,
        feature_factors: c,
        ranks,
        explained_variance: f64::NAN,
        iterations,
    };
    model.explained_variance = super::explained_variance(x, &model.reconstruct())?;
    debug_assert!(Mode::ALL.iter().all(|&m| model.factor(m).ncols() == ranks[m.index() - 1]));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::is_orthonormal;
    use crate::tensor::synth_tensor;

    #[test]
    fn full_ranks_are_lossless() {
        let (t, _) = synth_tensor([6, 5, 4], 3, 0.5, 1).unwrap();
        let m = tucker(t.values(), [6, 5, 4], &Default::default()).unwrap();
        assert!(m.explained_variance >= 1.0 - 1e-9);
    }

    #[test]
    fn factors_are_orthonormal() {
        let (t, _) = synth_tensor([20, 8, 5], 2, 0.1, 3).unwrap();
        let m = tucker(t.values(), [3, 2, 2], &Default::default()).unwrap();
        for f in [&m.time_factors, &m.asset_factors, &m.feature_factors] {
            assert!(is_orthonormal(f, 1e-9));
        }
    }

    #[test]
    fn invalid_ranks_rejected() {
        let (t, _) = synth_tensor([4, 3, 2], 1, 0.0, 1).unwrap();
        assert!(tucker(t.values(), [5, 1, 1], &Default::default()).is_err());
        assert!(tucker(t.values(), [1, 0, 1], &Default::default()).is_err());
    }
}
