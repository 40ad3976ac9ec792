//! Synthetic subjects with known PD/T1, tensors and labels.
//!
//! Randomness comes from a single ChaCha8 stream (`ChaCha8Rng::seed_from_u64`).
//! Uniform draws are `(next_u64 >> 11) * 2^-53`, and a normal draw consumes two
//! uniforms `u1, u2` as `sqrt(-2 ln(1 - u1)) * cos(2π u2)`. Draw order:
//!
//! 1. label retention: one uniform per voxel with a nonzero dense label, in
//!    voxel order; the label is kept when the draw is below `sparsity`;
//! 2. only if `noise > 0`: per voxel, one normal for MPRAGE then one for FGATIR;
//! 3. only if `noise > 0`: per DWI volume, per voxel, one normal.
//!
//! Voxel order is x fastest, then y, then z.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dti::{dwi_signal, format_bvals, format_bvecs, spiral_directions, Tensor6};
use crate::error::{Error, Result};
use crate::nifti::write_nifti;
use crate::qmri::{ir_signal, AcquisitionPair};
use crate::volume::{scaled_affine, Intent, Volume};

pub const MPRAGE: &str = "mprage.nii.gz";
pub const FGATIR: &str = "fgatir.nii.gz";
pub const BIAS1: &str = "bias1.nii.gz";
pub const BIAS2: &str = "bias2.nii.gz";
pub const BRAIN_MASK: &str = "brain_mask.nii.gz";
pub const DWI: &str = "dwi.nii.gz";
pub const BVAL: &str = "dwi.bval";
pub const BVEC: &str = "dwi.bvec";
pub const LABELS_SPARSE: &str = "gt_labels_sparse.nii.gz";
pub const LABELS_DENSE: &str = "gt_labels_dense.nii.gz";
pub const GT_PD: &str = "gt_pd.nii.gz";
pub const GT_T1: &str = "gt_t1.nii.gz";
pub const GT_TENSORS: &str = "gt_tensors.nii.gz";

/// Region shapes in continuous voxel coordinates (voxel centers at integers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    /// Half-open box `min <= p < max`.
    Box { min: [f64; 3], max: [f64; 3] },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] < max[a]),
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
        }
    }
}

fn default_tensor() -> Tensor6 {
    [7e-4, 7e-4, 7e-4, 0.0, 0.0, 0.0]
}

fn default_s0() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape: Shape,
    pub pd: f64,
    pub t1: f64,
    /// xx, yy, zz, xy, xz, yz in mm²/s.
    #[serde(default = "default_tensor")]
    pub tensor: Tensor6,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default)]
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwiProtocol {
    /// b-values (s/mm²) of the diffusion-weighted shells.
    pub shells: Vec<f64>,
    /// Gradient directions per shell.
    pub directions: usize,
    /// Number of b = 0 volumes, placed first.
    pub b0: usize,
}

impl Default for DwiProtocol {
    fn default() -> Self {
        Self { shells: vec![1000.0], directions: 32, b0: 2 }
    }
}

impl DwiProtocol {
    pub fn gradients(&self) -> (Vec<f64>, Vec<[f64; 3]>) {
        let mut bvals = vec![0.0; self.b0];
        let mut bvecs = vec![[0.0; 3]; self.b0];
        let dirs = spiral_directions(self.directions);
        for &b in &self.shells {
            bvals.extend(std::iter::repeat(b).take(dirs.len()));
            bvecs.extend_from_slice(&dirs);
        }
        (bvals, bvecs)
    }
}

/// Bias monomials over normalized coordinates `u, v, w` in (-1, 1).
pub const BIAS_TERMS: [&str; 9] = ["u", "v", "w", "u2", "v2", "w2", "uv", "uw", "vw"];

fn one() -> f64 {
    1.0
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub regions: Vec<Region>,
    /// Later regions overwrite earlier ones; otherwise overlap is an error.
    #[serde(default)]
    pub priority_ordered: bool,
    /// Gaussian noise sd as a fraction of the voxel's PD (structural) or S0 (DWI).
    #[serde(default)]
    pub noise: f64,
    /// Coefficients of `BIAS_TERMS`; the field is `exp` of the polynomial.
    #[serde(default)]
    pub bias1: Vec<f64>,
    #[serde(default)]
    pub bias2: Vec<f64>,
    /// Fraction of labeled voxels kept in the sparse labels.
    #[serde(default = "one")]
    pub sparsity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub acquisition: AcquisitionPair,
    #[serde(default)]
    pub dwi: DwiProtocol,
}

impl PhantomSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::json("phantom spec", e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation("phantom dims must be positive".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Validation(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::Validation(format!("sparsity must lie in (0, 1], got {}", self.sparsity)));
        }
        if self.bias1.len() > BIAS_TERMS.len() || self.bias2.len() > BIAS_TERMS.len() {
            return Err(Error::Validation(format!("at most {} bias coefficients", BIAS_TERMS.len())));
        }
        for (k, r) in self.regions.iter().enumerate() {
            if !(r.pd >= 0.0) || !(r.t1 > 0.0) || !(r.s0 >= 0.0) {
                return Err(Error::Validation(format!("region {k}: pd and s0 must be >= 0 and t1 > 0")));
            }
            if let Shape::Ellipsoid { radii, .. } = r.shape {
                if radii.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::Validation(format!("region {k}: ellipsoid radii must be positive")));
                }
            }
        }
        if self.dwi.b0 + self.dwi.shells.len() * self.dwi.directions == 0 {
            return Err(Error::Validation("DWI protocol has no volumes".into()));
        }
        self.acquisition.validate()
    }

    /// Brain-like layout: gray-matter shell, white-matter core, two CSF
    /// boxes and 13 labeled nuclei (codes 1..=13) with distinct T1 and
    /// principal diffusion directions.
    pub fn demo(dims: [usize; 3], seed: u64) -> Self {
        let d = dims.map(|x| x as f64);
        let c = d.map(|x| (x - 1.0) / 2.0);
        let frac = |f: [f64; 3]| [f[0] * d[0], f[1] * d[1], f[2] * d[2]];
        let iso = |l: f64| [l, l, l, 0.0, 0.0, 0.0];
        let mut regions = vec![
            Region {
                shape: Shape::Ellipsoid { center: c, radii: frac([0.46, 0.46, 0.46]) },
                pd: 85.0,
                t1: 1350.0,
                tensor: iso(8e-4),
                s0: 900.0,
                label: 0,
            },
            Region {
                shape: Shape::Ellipsoid { center: c, radii: frac([0.38, 0.38, 0.38]) },
                pd: 70.0,
                t1: 800.0,
                tensor: [1.6e-3, 4e-4, 4e-4, 0.0, 0.0, 0.0],
                s0: 800.0,
                label: 0,
            },
        ];
        for side in [0.2, 0.7] {
            regions.push(Region {
                shape: Shape::Box { min: frac([side, 0.45, 0.25]), max: frac([side + 0.1, 0.55, 0.35]) },
                pd: 100.0,
                t1: 3500.0,
                tensor: iso(3e-3),
                s0: 1200.0,
                label: 0,
            });
        }
        let lo = [0.32, 0.32, 0.38];
        let step = [0.12, 0.12, 0.12];
        for k in 0..13usize {
            let slot = [k % 3, (k / 3) % 3, k / 9];
            let min = frac([0, 1, 2].map(|a| lo[a] + step[a] * slot[a] as f64));
            let max = frac([0, 1, 2].map(|a| lo[a] + step[a] * (slot[a] + 1) as f64));
            let theta = k as f64 * std::f64::consts::PI / 13.0;
            let v = [theta.cos(), theta.sin(), 0.25];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let v = v.map(|x| x / n);
            let (l1, l2) = (1.4e-3, 5e-4);
            let t = |i: usize, j: usize| (l1 - l2) * v[i] * v[j] + if i == j { l2 } else { 0.0 };
            regions.push(Region {
                shape: Shape::Box { min, max },
                pd: 78.0 + k as f64,
                t1: 1000.0 + 30.0 * k as f64,
                tensor: [t(0, 0), t(1, 1), t(2, 2), t(0, 1), t(0, 2), t(1, 2)],
                s0: 850.0,
                label: k as u32 + 1,
            });
        }
        Self {
            dims,
            spacing: [1.0; 3],
            regions,
            priority_ordered: true,
            noise: 0.0,
            bias1: vec![0.1, -0.05, 0.0, -0.1],
            bias2: vec![0.1, -0.05, 0.0, -0.1],
            sparsity: 0.6,
            seed,
            acquisition: AcquisitionPair::default(),
            dwi: DwiProtocol::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub mprage: Volume,
    pub fgatir: Volume,
    pub bias1: Volume,
    pub bias2: Volume,
    pub brain_mask: Volume,
    pub dwi: Volume,
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
    pub labels_sparse: Volume,
    pub labels_dense: Volume,
    pub pd: Volume,
    pub t1: Volume,
    pub tensors: Volume,
}

struct Stream(ChaCha8Rng);

impl Stream {
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        let (u1, u2) = (self.uniform(), self.uniform());
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn bias_field(coeffs: &[f64], dims: [usize; 3], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            let [u, v, w] = [0, 1, 2].map(|a| 2.0 * (p[a] as f64 + 0.5) / dims[a] as f64 - 1.0);
            let terms = [u, v, w, u * u, v * v, w * w, u * v, u * w, v * w];
            coeffs.iter().zip(terms).map(|(c, t)| c * t).sum::<f64>().exp()
        })
        .collect()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.iter().product::<usize>();
    let affine = scaled_affine(spec.spacing, [0.0; 3]);
    let grid = Volume::new(dims, 1, spec.spacing, affine, Intent::Intensity, vec![0.0; n])?;

    // owner[i] = index of the region that defines voxel i
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let p = grid.coords(i).map(|x| x as f64);
        for (k, r) in spec.regions.iter().enumerate() {
            if r.shape.contains(p) {
                if let (Some(prev), false) = (owner[i], spec.priority_ordered) {
                    return Err(Error::Validation(format!(
                        "regions {prev} and {k} overlap at voxel {:?} and priority_ordered is off",
                        grid.coords(i)
                    )));
                }
                owner[i] = Some(k);
            }
        }
    }
    let field = |f: &dyn Fn(&Region) -> f64| -> Vec<f64> { owner.iter().map(|o| o.map_or(0.0, |k| f(&spec.regions[k]))).collect() };
    let pd = field(&|r| r.pd);
    let t1 = field(&|r| r.t1);
    let s0 = field(&|r| r.s0);
    let dense = field(&|r| r.label as f64);
    let mask: Vec<f64> = owner.iter().zip(&pd).map(|(o, &p)| (o.is_some() && p > 0.0) as u8 as f64).collect();
    let mut tensors = vec![0.0; 6 * n];
    for (i, o) in owner.iter().enumerate() {
        if let Some(k) = o {
            for c in 0..6 {
                tensors[c * n + i] = spec.regions[*k].tensor[c];
            }
        }
    }

    let b1 = bias_field(&spec.bias1, dims, n);
    let b2 = bias_field(&spec.bias2, dims, n);
    let acq_m = spec.acquisition.mprage()?;
    let acq_f = spec.acquisition.fgatir()?;
    let signal = |acq| -> Vec<f64> {
        (0..n).map(|i| if t1[i] > 0.0 { ir_signal(pd[i], t1[i], acq) } else { 0.0 }).collect()
    };
    let mut mprage: Vec<f64> = signal(acq_m).iter().zip(&b1).map(|(s, b)| s * b).collect();
    let mut fgatir: Vec<f64> = signal(acq_f).iter().zip(&b2).map(|(s, b)| s * b).collect();

    let (bvals, bvecs) = spec.dwi.gradients();
    let nv = bvals.len();
    let mut dwi = vec![0.0; nv * n];
    for (k, (&b, &g)) in bvals.iter().zip(&bvecs).enumerate() {
        for i in 0..n {
            if owner[i].is_some() {
                let d = [0, 1, 2, 3, 4, 5].map(|c| tensors[c * n + i]);
                dwi[k * n + i] = dwi_signal(s0[i], &d, b, g);
            }
        }
    }

    let mut rng = Stream(ChaCha8Rng::seed_from_u64(spec.seed));
    let mut sparse = dense.clone();
    for s in sparse.iter_mut().filter(|s| **s != 0.0) {
        if rng.uniform() >= spec.sparsity {
            *s = 0.0;
        }
    }
    if spec.noise > 0.0 {
        for i in 0..n {
            mprage[i] += spec.noise * pd[i] * rng.normal();
            fgatir[i] += spec.noise * pd[i] * rng.normal();
        }
        for k in 0..nv {
            for i in 0..n {
                dwi[k * n + i] += spec.noise * s0[i] * rng.normal();
            }
        }
    }

    Ok(Phantom {
        mprage: grid.like(Intent::Intensity, mprage)?,
        fgatir: grid.like(Intent::Intensity, fgatir)?,
        bias1: grid.like(Intent::Intensity, b1)?,
        bias2: grid.like(Intent::Intensity, b2)?,
        brain_mask: grid.like(Intent::Label, mask)?,
        dwi: grid.like_channels(nv, Intent::Intensity, dwi)?,
        bvals,
        bvecs,
        labels_sparse: grid.like(Intent::Label, sparse)?,
        labels_dense: grid.like(Intent::Label, dense)?,
        pd: grid.like(Intent::Intensity, pd)?,
        t1: grid.like(Intent::Intensity, t1)?,
        tensors: grid.like_channels(6, Intent::VectorChannel, tensors)?,
    })
}

impl Phantom {
    /// Write every output under `dir` using the file names above.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vols = [
            (MPRAGE, &self.mprage),
            (FGATIR, &self.fgatir),
            (BIAS1, &self.bias1),
            (BIAS2, &self.bias2),
            (BRAIN_MASK, &self.brain_mask),
            (DWI, &self.dwi),
            (LABELS_SPARSE, &self.labels_sparse),
            (LABELS_DENSE, &self.labels_dense),
            (GT_PD, &self.pd),
            (GT_T1, &self.t1),
            (GT_TENSORS, &self.tensors),
        ];
        for (name, v) in vols {
            write_nifti(v, dir.join(name))?;
        }
        for (name, text) in [(BVAL, format_bvals(&self.bvals)), (BVEC, format_bvecs(&self.bvecs))] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
