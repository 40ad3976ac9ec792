//! Diffusion tensor fitting and tensor-derived scalar maps.
//!
//! The log-linear model is `ln S = ln S0 - b gᵀ D g`. Fitting is ordinary
//! least squares followed by one reweighted pass with weights equal to the
//! squared predicted signals.

use std::path::Path;

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::eig::{eig3_sym, EigenSystem, Mat3};
use crate::error::{Error, Result};
use crate::par;
use crate::volume::{ensure_compatible, Intent, Volume};

/// Unique tensor components in the order xx, yy, zz, xy, xz, yz (mm²/s).
pub type Tensor6 = [f64; 6];

/// Volumes at or below this b-value carry no gradient direction.
pub const B0_THRESHOLD: f64 = 50.0;

pub fn tensor_matrix(d: &Tensor6) -> Mat3 {
    [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]]
}

/// Noise-free signal of the tensor model.
pub fn dwi_signal(s0: f64, d: &Tensor6, b: f64, g: [f64; 3]) -> f64 {
    let q = d[0] * g[0] * g[0]
        + d[1] * g[1] * g[1]
        + d[2] * g[2] * g[2]
        + 2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2]);
    s0 * (-b * q).exp()
}

/// A DWI series with its b-values (s/mm²) and gradient directions.
#[derive(Debug, Clone)]
pub struct DiffusionSet {
    pub dwi: Volume,
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

impl DiffusionSet {
    /// Validate and normalize gradient directions of the diffusion-weighted volumes.
    pub fn new(dwi: Volume, bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != dwi.channels() || bvecs.len() != dwi.channels() {
            return Err(Error::Validation(format!(
                "{} DWI volumes but {} b-values and {} b-vectors",
                dwi.channels(),
                bvals.len(),
                bvecs.len()
            )));
        }
        let mut bvecs = bvecs;
        for (k, (b, g)) in bvals.iter().zip(bvecs.iter_mut()).enumerate() {
            if !(*b >= 0.0) || !b.is_finite() {
                return Err(Error::Validation(format!("b-value {b} at volume {k}")));
            }
            if *b > B0_THRESHOLD {
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if (n - 1.0).abs() > 1e-3 {
                    return Err(Error::Validation(format!("b-vector {k} has norm {n}")));
                }
                g.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(Self { dwi, bvals, bvecs })
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_numbers(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Validation(format!("not a number: {t:?}"))))
        .collect()
}

/// FSL `.bval`: whitespace-separated values.
pub fn parse_bvals(text: &str) -> Result<Vec<f64>> {
    let v = parse_numbers(text)?;
    if v.is_empty() {
        return Err(Error::Validation("empty b-value file".into()));
    }
    Ok(v)
}

/// FSL `.bvec`: three rows (x, y, z). An N×3 column layout is also accepted.
pub fn parse_bvecs(text: &str) -> Result<Vec<[f64; 3]>> {
    let rows: Vec<Vec<f64>> =
        text.lines().filter(|l| !l.trim().is_empty()).map(parse_numbers).collect::<Result<_>>()?;
    if rows.len() == 3 && rows[0].len() == rows[1].len() && rows[1].len() == rows[2].len() {
        return Ok((0..rows[0].len()).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect());
    }
    if !rows.is_empty() && rows.iter().all(|r| r.len() == 3) {
        return Ok(rows.iter().map(|r| [r[0], r[1], r[2]]).collect());
    }
    Err(Error::Validation("b-vector file is neither 3 rows nor N×3".into()))
}

pub fn read_bvals(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    parse_bvals(&read_text(path.as_ref())?)
}

pub fn read_bvecs(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>> {
    parse_bvecs(&read_text(path.as_ref())?)
}

pub fn format_bvals(bvals: &[f64]) -> String {
    let s: Vec<String> = bvals.iter().map(|b| format!("{b}")).collect();
    s.join(" ") + "\n"
}

pub fn format_bvecs(bvecs: &[[f64; 3]]) -> String {
    (0..3)
        .map(|ax| bvecs.iter().map(|g| format!("{}", g[ax])).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

fn design_row(b: f64, g: [f64; 3]) -> [f64; 7] {
    let (x, y, z) = (g[0], g[1], g[2]);
    [-b * x * x, -b * y * y, -b * z * z, -2.0 * b * x * y, -2.0 * b * x * z, -2.0 * b * y * z, 1.0]
}

/// Log-linear design matrix, one row per volume.
pub fn design_matrix(bvals: &[f64], bvecs: &[[f64; 3]]) -> DMatrix<f64> {
    let rows: Vec<[f64; 7]> = bvals.iter().zip(bvecs).map(|(&b, &g)| design_row(b, g)).collect();
    DMatrix::from_fn(rows.len(), 7, |r, c| rows[r][c])
}

/// Numerical rank, with tensor columns rescaled by the largest b-value.
pub fn design_rank(x: &DMatrix<f64>) -> usize {
    let bmax = x.rows(0, x.nrows()).columns(0, 3).iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut scaled = x.clone();
    for c in 0..6 {
        scaled.column_mut(c).scale_mut(1.0 / bmax);
    }
    let sv = scaled.singular_values();
    let tol = sv.max() * 1e-10 * x.nrows().max(7) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtiOptions {
    /// Exclude volumes with b above this value.
    pub max_b: Option<f64>,
}

/// Six tensor components (6 channels), ln S0 and a validity mask.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub components: Volume,
    pub log_s0: Volume,
    pub valid_mask: Volume,
}

impl TensorField {
    pub fn tensor(&self, i: usize) -> Tensor6 {
        let n = self.components.n_voxels();
        let d = self.components.data();
        [d[i], d[n + i], d[2 * n + i], d[3 * n + i], d[4 * n + i], d[5 * n + i]]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid_mask.data()[i] != 0.0
    }
}

type M7 = SMatrix<f64, 7, 7>;
type V7 = SVector<f64, 7>;

/// Weighted normal-equation solve; `None` if the system is (near) singular.
fn solve_normal(rows: &[[f64; 7]], y: &[f64], w: &[f64]) -> Option<V7> {
    let mut ata = M7::zeros();
    let mut aty = V7::zeros();
    for ((r, &yi), &wi) in rows.iter().zip(y).zip(w) {
        let rv = V7::from_row_slice(r);
        ata += wi * rv * rv.transpose();
        aty += wi * yi * rv;
    }
    let chol = ata.cholesky()?;
    let l = chol.l();
    let diag: Vec<f64> = (0..7).map(|i| l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || (min / max).powi(2) < 1e-14 {
        return None;
    }
    let beta = chol.solve(&aty);
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

/// Fit one voxel. `rows` are pre-scaled design rows (tensor columns divided
/// by `bscale`), `signals` the matching samples.
fn fit_voxel(rows: &[[f64; 7]], signals: &[f64], bscale: f64) -> Option<(Tensor6, f64)> {
    let mut sel_rows = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    for (r, &s) in rows.iter().zip(signals) {
        if s > 0.0 && s.is_finite() {
            sel_rows.push(*r);
            y.push(s.ln());
        }
    }
    if y.len() < 7 {
        return None;
    }
    let ones = vec![1.0; y.len()];
    let beta0 = solve_normal(&sel_rows, &y, &ones)?;
    let pred: Vec<f64> = sel_rows.iter().map(|r| V7::from_row_slice(r).dot(&beta0)).collect();
    let pmax = pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // squared predicted signal, normalized by the largest one
    let w: Vec<f64> = pred.iter().map(|p| (2.0 * (p - pmax)).exp()).collect();
    let beta = solve_normal(&sel_rows, &y, &w)?;
    let mut d = [0.0; 6];
    for k in 0..6 {
        d[k] = beta[k] / bscale;
    }
    Some((d, beta[6]))
}

/// Voxelwise tensor fit inside `mask` (everywhere if absent).
pub fn fit_tensor(ds: &DiffusionSet, mask: Option<&Volume>, opts: &DtiOptions) -> Result<TensorField> {
    if let Some(m) = mask {
        ensure_compatible(&ds.dwi, m, "dwi", "mask")?;
    }
    let used: Vec<usize> =
        (0..ds.bvals.len()).filter(|&k| opts.max_b.map_or(true, |mb| ds.bvals[k] <= mb)).collect();
    let bvals: Vec<f64> = used.iter().map(|&k| ds.bvals[k]).collect();
    let bvecs: Vec<[f64; 3]> = used.iter().map(|&k| ds.bvecs[k]).collect();
    let x = design_matrix(&bvals, &bvecs);
    if used.len() < 7 || design_rank(&x) < 7 {
        return Err(Error::Validation("diffusion design is rank deficient (need 6 independent directions and a b0)".into()));
    }
    let bscale = bvals.iter().cloned().fold(1.0, f64::max);
    let rows: Vec<[f64; 7]> = bvals
        .iter()
        .zip(&bvecs)
        .map(|(&b, &g)| {
            let mut r = design_row(b, g);
            r.iter_mut().take(6).for_each(|v| *v /= bscale);
            r
        })
        .collect();

    let n = ds.dwi.n_voxels();
    let dwi = &ds.dwi;
    let fits = par::map_indices(n, |i| {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            return None;
        }
        let n_all = dwi.n_voxels();
        let signals: Vec<f64> = used.iter().map(|&k| dwi.data()[k * n_all + i]).collect();
        fit_voxel(&rows, &signals, bscale)
    });

    let mut comp = vec![0.0; 6 * n];
    let mut log_s0 = vec![0.0; n];
    let mut valid = vec![0.0; n];
    for (i, f) in fits.iter().enumerate() {
        if let Some((d, ls0)) = f {
            for k in 0..6 {
                comp[k * n + i] = d[k];
            }
            log_s0[i] = *ls0;
            valid[i] = 1.0;
        }
    }
    let grid = dwi.channel_volume(0)?;
    Ok(TensorField {
        components: grid.like_channels(6, Intent::VectorChannel, comp)?,
        log_s0: grid.like(Intent::Intensity, log_s0)?,
        valid_mask: grid.like(Intent::Label, valid)?,
    })
}

/// Fractional anisotropy of (already clamped) eigenvalues; 0 when all vanish.
pub fn fractional_anisotropy(l: [f64; 3]) -> f64 {
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev = ((l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2)).sqrt();
    (1.5f64).sqrt() * dev / norm
}

/// Westin shape measures (WL, WP, WS), normalized by λ1.
pub fn westin(l1: f64, l2: f64, l3: f64) -> (f64, f64, f64) {
    if !(l1 > 0.0) {
        return (0.0, 0.0, 0.0);
    }
    ((l1 - l2) / l1, (l2 - l3) / l1, l3 / l1)
}

/// Scalar and vector maps derived from a tensor field.
#[derive(Debug, Clone)]
pub struct DtiMaps {
    pub fa: Volume,
    pub trace: Volume,
    pub ad: Volume,
    pub rd: Volume,
    /// λ1, λ2, λ3 (clamped at 0).
    pub evals: Volume,
    /// Principal eigenvector, 3 channels.
    pub evec1: Volume,
    /// WL, WP, WS.
    pub westin: Volume,
}

/// Per-voxel derived quantities; negative eigenvalues are clamped to 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoxelScalars {
    pub fa: f64,
    pub trace: f64,
    pub ad: f64,
    pub rd: f64,
    pub evals: [f64; 3],
    pub evec1: [f64; 3],
    pub westin: [f64; 3],
}

pub fn voxel_scalars(es: &EigenSystem) -> VoxelScalars {
    let l = es.values.map(|v| v.max(0.0));
    let (wl, wp, ws) = westin(l[0], l[1], l[2]);
    VoxelScalars {
        fa: fractional_anisotropy(l),
        trace: l[0] + l[1] + l[2],
        ad: l[0],
        rd: 0.5 * (l[1] + l[2]),
        evals: l,
        evec1: es.vectors[0],
        westin: [wl, wp, ws],
    }
}

pub fn scalar_maps(ts: &TensorField) -> Result<DtiMaps> {
    let n = ts.valid_mask.n_voxels();
    let per = par::map_indices(n, |i| {
        if !ts.is_valid(i) {
            return VoxelScalars::default();
        }
        voxel_scalars(&eig3_sym(&tensor_matrix(&ts.tensor(i))))
    });
    let grid = &ts.valid_mask;
    let scalar = |f: fn(&VoxelScalars) -> f64| grid.like(Intent::Intensity, per.iter().map(f).collect());
    let triple = |f: fn(&VoxelScalars) -> [f64; 3]| {
        let mut data = vec![0.0; 3 * n];
        for (i, s) in per.iter().enumerate() {
            let v = f(s);
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        grid.like_channels(3, Intent::VectorChannel, data)
    };
    Ok(DtiMaps {
        fa: scalar(|s| s.fa)?,
        trace: scalar(|s| s.trace)?,
        ad: scalar(|s| s.ad)?,
        rd: scalar(|s| s.rd)?,
        evals: triple(|s| s.evals)?,
        evec1: triple(|s| s.evec1)?,
        westin: triple(|s| s.westin)?,
    })
}

/// Deterministic, roughly uniform unit directions on a Fibonacci spiral
/// over the upper hemisphere.
pub fn spiral_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
