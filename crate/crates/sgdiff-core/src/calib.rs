//! Calibration-matrix fitting for incremental feature correction: gather
//! paired feature increments from full-compute runs, fit per-layer linear
//! maps by ridge least squares, truncate by SVD for cheap application.

use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocknet::{BlockNet, FeatureTap};
use crate::cache::CachePolicy;
use crate::error::{Error, Result};
use crate::guidance::GuidanceSchedule;
use crate::model::Cond;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Paired (delta-in, delta-out) feature increments for one layer, stored as
/// columns.
#[derive(Debug, Clone)]
pub struct LayerIncrements {
    pub d_in: DMatrix<f64>,
    pub d_out: DMatrix<f64>,
}

impl LayerIncrements {
    pub fn n_pairs(&self) -> usize {
        self.d_in.ncols()
    }
}

/// One calibration run: a start point, its condition, and the guidance
/// schedule it samples under.
#[derive(Debug, Clone)]
pub struct CalibRun {
    pub x_t: Vec<f64>,
    pub class: usize,
    pub gsched: GuidanceSchedule,
}

/// Execute full-compute runs with feature taps and gather increment pairs at
/// every would-be-cached step, for every branch executed at both the step
/// and its predecessor.
pub fn collect_calibration_data(
    net: &BlockNet,
    runs: &[CalibRun],
    policy: &CachePolicy,
    grid: &TimestepGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<LayerIncrements>> {
    let n_layers = net.n_blocks();
    let width = net.config().width;
    let mut pairs: Vec<Vec<(DVector<f64>, DVector<f64>)>> = vec![Vec::new(); n_layers];

    for run in runs {
        if run.gsched.len() != grid.len() {
            return Err(Error::Config("calibration run schedule/grid length mismatch".into()));
        }
        let mut x = run.x_t.clone();
        // taps from the previous step, per branch (cond, uncond)
        let mut prev: [Option<FeatureTap>; 2] = [None, None];
        for i in 0..grid.len() {
            let t = grid.step(i);
            let t_prev = grid.prev(i);
            let active = run.gsched.is_active(i);
            let mut cur: [Option<FeatureTap>; 2] = [None, None];

            let mut tap = FeatureTap::new();
            let eps_c = net.forward_tapped(&x, t, Cond::Class(run.class), Some(&mut tap));
            cur[0] = Some(tap);
            let eps = if active {
                let mut tap_u = FeatureTap::new();
                let eps_u = net.forward_tapped(&x, t, Cond::Null, Some(&mut tap_u));
                cur[1] = Some(tap_u);
                crate::sampler::apply_cfg(&eps_u, &eps_c, run.gsched.w[i])
            } else {
                eps_c
            };

            if policy.is_reuse_step(i) {
                for b in 0..2 {
                    if let (Some(now), Some(before)) = (&cur[b], &prev[b]) {
                        for (l, layer_pairs) in pairs.iter_mut().enumerate() {
                            layer_pairs.push((
                                &now.h_in[l] - &before.h_in[l],
                                &now.h_out[l] - &before.h_out[l],
                            ));
                        }
                    }
                }
            }
            x = crate::sampler::ddim_step(&x, &eps, t, t_prev, sched, 0.0, None)?;
            prev = cur;
        }
    }

    Ok(pairs
        .into_iter()
        .map(|p| {
            let m = p.len();
            let mut d_in = DMatrix::zeros(width, m);
            let mut d_out = DMatrix::zeros(width, m);
            for (c, (di, dd)) in p.iter().enumerate() {
                d_in.set_column(c, di);
                d_out.set_column(c, dd);
            }
            LayerIncrements { d_in, d_out }
        })
        .collect())
}

/// Fit diagnostics kept alongside each calibration matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub samples: usize,
    /// Frobenius norm of the training residual dOut - A dIn.
    pub residual_fro: f64,
    /// Fewer increment pairs than the layer width.
    pub rank_deficient: bool,
}

/// Full calibration matrix with its (lazily computed) SVD and an optional
/// active truncation.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub a: DMatrix<f64>,
    pub stats: FitStats,
    svd: Option<SvdFactors>,
}

#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

/// Ridge least squares A = argmin |dOut - A dIn|_F^2 + ridge_eff |A|_F^2 in
/// closed form, with ridge_eff = ridge * tr(X X^T) / d. ridge = 0 solves the
/// minimum-norm problem restricted to the span of the increments and errors
/// only when that span is empty.
pub fn fit_calibration(inc: &LayerIncrements, ridge: f64) -> Result<LayerCalibration> {
    let d = inc.d_in.nrows();
    let m = inc.n_pairs();
    if m == 0 {
        return Err(Error::Config("calibration fit needs at least one increment pair".into()));
    }
    if ridge < 0.0 {
        return Err(Error::Config("ridge must be >= 0".into()));
    }
    let a = if ridge > 0.0 {
        let xxt = &inc.d_in * inc.d_in.transpose();
        // trace-normalized; all-zero increments fall back to an absolute
        // ridge so the solution degrades to A = 0 instead of failing
        let scale = xxt.trace() / d as f64;
        let ridge_eff = ridge * if scale > 0.0 { scale } else { 1.0 };
        let mut gram = xxt;
        for i in 0..d {
            gram[(i, i)] += ridge_eff;
        }
        let yxt = &inc.d_out * inc.d_in.transpose();
        let chol = gram.cholesky().ok_or_else(|| {
            Error::SingularFit(format!(
                "normal equations singular with {m} pairs in dimension {d}"
            ))
        })?;
        // A = Y X^T (X X^T + ridge I)^{-1}; solve on the transposed system
        chol.solve(&yxt.transpose()).transpose()
    } else {
        let smax = inc.d_in.clone().svd(false, false).singular_values.max();
        if !(smax > 0.0) {
            return Err(Error::SingularFit(
                "all increment pairs are zero; set ridge > 0".into(),
            ));
        }
        let pinv = inc
            .d_in
            .clone()
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| Error::SingularFit(e.to_string()))?;
        &inc.d_out * pinv
    };
    let residual = (&inc.d_out - &a * &inc.d_in).norm();
    Ok(LayerCalibration {
        a,
        stats: FitStats { samples: m, residual_fro: residual, rank_deficient: m < d },
        svd: None,
    })
}

/// Rank-truncated factors of one layer's calibration matrix.
#[derive(Debug, Clone)]
pub struct TruncatedFactors {
    pub r: usize,
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
    /// r was clamped down to the layer dimension.
    pub clamped: bool,
}

impl TruncatedFactors {
    /// U_r S_r V_r^T delta, applied at r(d_in + d_out) MAC cost.
    pub fn apply(&self, delta: &DVector<f64>) -> DVector<f64> {
        let mut z = &self.v_t * delta;
        for i in 0..self.r {
            z[i] *= self.s[i];
        }
        &self.u * z
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.r, self.r);
        for i in 0..self.r {
            s[(i, i)] = self.s[i];
        }
        &self.u * s * &self.v_t
    }
}

/// Per-layer calibration factors for a whole network. Full matrices are
/// retained so re-truncation never refits.
#[derive(Debug, Clone)]
pub struct CalibrationBank {
    layers: Vec<LayerCalibration>,
}

impl CalibrationBank {
    pub fn fit(increments: &[LayerIncrements], ridge: f64) -> Result<Self> {
        Ok(Self {
            layers: increments
                .iter()
                .map(|inc| fit_calibration(inc, ridge))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCalibration {
        &self.layers[l]
    }

    fn ensure_svd(&mut self, l: usize) {
        if self.layers[l].svd.is_none() {
            let svd = self.layers[l].a.clone().svd(true, true);
            self.layers[l].svd = Some(SvdFactors {
                u: svd.u.expect("svd with u"),
                s: svd.singular_values.clone(),
                v_t: svd.v_t.expect("svd with v_t"),
            });
        }
    }

    /// Top-r singular triplets of layer `l`'s calibration matrix; r beyond
    /// the layer dimension is clamped (flagged on the result).
    pub fn truncate_rank(&mut self, l: usize, r: usize) -> Result<TruncatedFactors> {
        if r == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        let d = self.layers[l].a.nrows().min(self.layers[l].a.ncols());
        let clamped = r > d;
        let r = r.min(d);
        self.ensure_svd(l);
        let f = self.layers[l].svd.as_ref().unwrap();
        Ok(TruncatedFactors {
            r,
            u: f.u.columns(0, r).into_owned(),
            s: DVector::from_fn(r, |i, _| f.s[i]),
            v_t: f.v_t.rows(0, r).into_owned(),
            clamped,
        })
    }

    /// Singular values of layer `l` (descending).
    pub fn singular_values(&mut self, l: usize) -> DVector<f64> {
        self.ensure_svd(l);
        self.layers[l].svd.as_ref().unwrap().s.clone()
    }

    pub fn to_json(&self) -> BankJson {
        BankJson {
            layers: self
                .layers
                .iter()
                .map(|lc| BankLayerJson {
                    shape: [lc.a.nrows(), lc.a.ncols()],
                    a_b64: encode_matrix(&lc.a),
                    stats: lc.stats.clone(),
                })
                .collect(),
        }
    }

    pub fn from_json(j: &BankJson) -> Result<Self> {
        Ok(Self {
            layers: j
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerCalibration {
                        a: decode_matrix(&l.a_b64, l.shape[0], l.shape[1])?,
                        stats: l.stats.clone(),
                        svd: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Binary-free bank serialization: explicit shapes plus base64 of the
/// column-major f64 little-endian payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankJson {
    pub layers: Vec<BankLayerJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankLayerJson {
    pub shape: [usize; 2],
    pub a_b64: String,
    pub stats: FitStats,
}

fn encode_matrix(m: &DMatrix<f64>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_matrix(b64: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| Error::Serde(format!("bad base64 matrix payload: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Serde(format!(
            "matrix payload has {} bytes, expected {}",
            bytes.len(),
            rows * cols * 8
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, vals))
}
