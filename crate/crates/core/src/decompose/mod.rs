//! CP and Tucker decompositions, explained variance and factor matching.

mod cp;
mod tucker;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use cp::{cp_als, CpModel, CpOptions};
pub use tucker::{tucker, TuckerModel, TuckerOptions};

use crate::align::tucker_phi;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// `1 − ‖X − X̂‖² / ‖X − x̄‖²` with `x̄` the global mean of `X`.
pub fn explained_variance(x: &Tensor3, reconstruction: &Tensor3) -> Result<f64> {
    if x.shape() != reconstruction.shape() {
        return Err(Error::Shape(format!(
            "tensor {:?} vs reconstruction {:?}",
            x.shape(),
            reconstruction.shape()
        )));
    }
    let mean = x.mean();
    let (mut resid, mut total) = (0.0, 0.0);
    for (a, b) in x.as_slice().iter().zip(reconstruction.as_slice()) {
        resid += (a - b).powi(2);
        total += (a - mean).powi(2);
    }
    if total == 0.0 {
        return Err(Error::ZeroVariance("tensor (constant)".into()));
    }
    Ok(1.0 - resid / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub rank: usize,
    pub explained_variance: f64,
}

#[derive(Debug, Clone)]
pub struct RankSelection {
    pub rank: usize,
    pub curve: Vec<RankPoint>,
    /// False when no rank up to `max_rank` hit the target; `rank` is then `max_rank`.
    pub target_reached: bool,
    pub models: Vec<CpModel>,
}

impl RankSelection {
    pub fn selected(&self) -> &CpModel {
        &self.models[self.rank - 1]
    }
}

/// Fit ranks `1..=max_rank` and pick the smallest reaching `target_ev`.
pub fn select_rank(
    x: &Tensor3,
    target_ev: f64,
    max_rank: usize,
    base: &CpOptions,
) -> Result<RankSelection> {
    if !(target_ev > 0.0 && target_ev < 1.0) {
        return Err(Error::invalid("target_ev", "must lie in (0, 1)"));
    }
    if max_rank == 0 {
        return Err(Error::invalid("max_rank", "must be at least 1"));
    }
    let models = (1..=max_rank)
        .map(|rank| cp_als(x, &CpOptions { rank, ..*base }))
        .collect::<Result<Vec<_>>>()?;
    let curve: Vec<RankPoint> = models
        .iter()
        .map(|m| RankPoint {
            rank: m.rank,
            explained_variance: m.explained_variance,
        })
        .collect();
    let hit = curve.iter().find(|p| p.explained_variance >= target_ev);
    if hit.is_none() {
        log::warn!("target EV {target_ev} not reached up to rank {max_rank}");
    }
    Ok(RankSelection {
        rank: hit.map_or(max_rank, |p| p.rank),
        target_reached: hit.is_some(),
        curve,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorMatch {
    pub mean_abs_phi: f64,
    /// `(column in first, column in second, φ)` for every matched pair.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy column matching by largest `|φ|`, ignoring sign and order.
pub fn factor_congruence(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<FactorMatch> {
    if b1.nrows() != b2.nrows() {
        return Err(Error::Shape(format!(
            "factor matrices have {} and {} rows",
            b1.nrows(),
            b2.nrows()
        )));
    }
    let mut cells = Vec::with_capacity(b1.ncols() * b2.ncols());
    for i in 0..b1.ncols() {
        for j in 0..b2.ncols() {
            let phi = tucker_phi(b1.column(i).as_slice(), b2.column(j).as_slice())?.value;
            cells.push((i, j, phi));
        }
    }
    cells.sort_by(|x, y| y.2.abs().total_cmp(&x.2.abs()).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut used_i = vec![false; b1.ncols()];
    let mut used_j = vec![false; b2.ncols()];
    let mut pairs = Vec::new();
    for (i, j, phi) in cells {
        if !used_i[i] && !used_j[j] {
            used_i[i] = true;
            used_j[j] = true;
            pairs.push((i, j, phi));
        }
    }
    let mean_abs_phi = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.2.abs()).sum::<f64>() / pairs.len() as f64
    };
    Ok(FactorMatch {
        mean_abs_phi,
        pairs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CpManifest {
    method: String,
    rank: usize,
    shape: [usize; 3],
    weights: Vec<f64>,
    explained_variance: f64,
    seed: u64,
    iterations: usize,
    converged: bool,
    gram_rank_deficient: bool,
    ridge_used: bool,
    factors: [String; 3],
}

const FACTOR_FILES: [&str; 3] = ["time_factors.bin", "asset_factors.bin", "feature_factors.bin"];

/// Row-major matrix file: `u64 rows, u64 cols` (little-endian) then f64 entries.
pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * m.len());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Shape(format!("{}: truncated", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(Error::Shape(format!("{}: size mismatch", path.display())));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

/// Write `manifest.json` plus one binary file per factor matrix.
pub fn save_cp_model(model: &CpModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CpManifest {
        method: "cp".into(),
        rank: model.rank,
        shape: model.shape(),
        weights: model.weights.clone(),
        explained_variance: model.explained_variance,
        seed: model.seed,
        iterations: model.iterations,
        converged: model.converged,
        gram_rank_deficient: model.gram_rank_deficient,
        ridge_used: model.ridge_used,
        factors: FACTOR_FILES.map(String::from),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    for (name, m) in FACTOR_FILES.iter().zip([
        &model.time_factors,
        &model.asset_factors,
        &model.feature_factors,
    ]) {
        write_matrix_bin(&dir.join(name), m)?;
    }
    Ok(())
}

pub fn load_cp_model(dir: impl AsRef<Path>) -> Result<CpModel> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let man: CpManifest = serde_json::from_slice(&bytes)?;
    let [a, b, c] = man.factors.clone().map(|f| read_matrix_bin(&dir.join(f)));
    Ok(CpModel {
        time_factors: a?,
        asset_factors: b?,
        feature_factors: c?,
        weights: man.weights,
        rank: man.rank,
        explained_variance: man.explained_variance,
        iterations: man.iterations,
        converged: man.converged,
        seed: man.seed,
        gram_rank_deficient: man.gram_rank_deficient,
        ridge_used: man.ridge_used,
        error_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::synth_tensor;

    #[test]
    fn ev_of_exact_reconstruction_is_one() {
        let (t, _) = synth_tensor([3, 3, 2], 1, 0.3, 1).unwrap();
        assert_eq!(explained_variance(t.values(), t.values()).unwrap(), 1.0);
    }

    #[test]
    fn ev_of_mean_tensor_is_zero() {
        let (t, _) = synth_tensor([3, 3, 2], 1, 0.3, 1).unwrap();
        let mean = t.values().mean();
        let flat = Tensor3::from_fn(t.shape(), |_, _, _| mean);
        assert!(explained_variance(t.values(), &flat).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ev_hand_case() {
        // X = [1, 3], X̂ = [1, 2]: residual 1, total 2
        let x = Tensor3::from_vec([2, 1, 1], vec![1.0, 3.0]).unwrap();
        let r = Tensor3::from_vec([2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(explained_variance(&x, &r).unwrap(), 0.5);
    }

    #[test]
    fn ev_constant_tensor_errors() {
        let x = Tensor3::from_vec([2, 1, 1], vec![2.0, 2.0]).unwrap();
        assert!(explained_variance(&x, &x).is_err());
    }

    #[test]
    fn permuted_negated_columns_match_perfectly() {
        let b1 = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 2.0, -1.0, 0.0, 3.0, -1.0, 1.0]);
        let b2 = DMatrix::from_columns(&[-b1.column(1), b1.column(0).into_owned()]);
        let m = factor_congruence(&b1, &b2).unwrap();
        assert!((m.mean_abs_phi - 1.0).abs() < 1e-12);
        assert_eq!(m.pairs.len(), 2);
    }

    #[test]
    fn unequal_widths_match_min_columns() {
        let b1 = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let b2 = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 2.0, 0.0, 3.0]);
        let m = factor_congruence(&b1, &b2).unwrap();
        assert_eq!(m.pairs, vec![(0, 1, 1.0)]);
    }

    #[test]
    fn model_roundtrip_on_disk() {
        let (t, _) = synth_tensor([6, 4, 3], 2, 0.1, 2).unwrap();
        let m = cp_als(t.values(), &CpOptions::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cp_model(&m, dir.path()).unwrap();
        let back = load_cp_model(dir.path()).unwrap();
        assert_eq!(back.asset_factors, m.asset_factors);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.seed, m.seed);
    }
}
