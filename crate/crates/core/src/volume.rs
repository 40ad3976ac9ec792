//! Volume container and grid bookkeeping.
//!
//! Data is stored as `f64` in x-fastest order with the channel axis
//! slowest, i.e. the on-disk NIfTI order.

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

/// What the voxel values mean. Drives the on-disk datatype and intent code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Intent {
    #[default]
    Intensity,
    Label,
    VectorChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    channels: usize,
    four_d: bool,
    spacing: [f64; 3],
    affine: Affine,
    intent: Intent,
    data: Vec<f64>,
}

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

/// Affine with the given voxel size and origin, no rotation.
pub fn scaled_affine(spacing: [f64; 3], origin: [f64; 3]) -> Affine {
    let mut a = identity_affine();
    for i in 0..3 {
        a[i][i] = spacing[i];
        a[i][3] = origin[i];
    }
    a
}

fn det3(a: &Affine) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl Volume {
    /// Build a volume, validating dims, spacing and affine.
    /// `channels > 1` (or `four_d`) produces a 4D volume.
    pub fn new(
        dims: [usize; 3],
        channels: usize,
        spacing: [f64; 3],
        affine: Affine,
        intent: Intent,
        data: Vec<f64>,
    ) -> Result<Self> {
        Self::build(dims, channels, channels > 1, spacing, affine, intent, data)
    }

    pub(crate) fn build(
        dims: [usize; 3],
        channels: usize,
        four_d: bool,
        spacing: [f64; 3],
        affine: Affine,
        intent: Intent,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(Error::Parameter(format!("dims must be positive, got {dims:?}x{channels}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("spacing must be positive, got {spacing:?}")));
        }
        let det = det3(&affine);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Parameter("affine spatial block is singular".into()));
        }
        let n = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != n {
            return Err(Error::Parameter(format!("data length {} does not match dims ({n})", data.len())));
        }
        if intent == Intent::Label && data.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
            return Err(Error::Parameter("label volume must hold non-negative integers".into()));
        }
        Ok(Self { dims, channels, four_d: four_d || channels > 1, spacing, affine, intent, data })
    }

    /// 3D volume on the same grid as `self`.
    pub fn like(&self, intent: Intent, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, 1, self.spacing, self.affine, intent, data)
    }

    /// 4D volume with `channels` channels on the same grid as `self`.
    pub fn like_channels(&self, channels: usize, intent: Intent, data: Vec<f64>) -> Result<Self> {
        Self::build(self.dims, channels, true, self.spacing, self.affine, intent, data)
    }

    pub fn zeros_like(&self) -> Self {
        let mut v = self.clone();
        v.channels = 1;
        v.four_d = false;
        v.intent = Intent::Intensity;
        v.data = vec![0.0; self.n_voxels()];
        v
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_4d(&self) -> bool {
        self.four_d
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn intent(&self) -> Intent {
        self.intent
    }

    pub fn set_intent(&mut self, intent: Intent) {
        self.intent = intent;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of spatial voxels (one channel).
    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy one channel out as a 3D volume.
    pub fn channel_volume(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            return Err(Error::Parameter(format!("channel {c} out of range ({})", self.channels)));
        }
        let intent = if self.intent == Intent::VectorChannel { Intent::Intensity } else { self.intent };
        self.like(intent, self.channel(c).to_vec())
    }

    /// Values of all channels at spatial voxel `i`.
    pub fn voxel_channels(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.n_voxels();
        (0..self.channels).map(move |c| self.data[c * n + i])
    }

    pub fn signature(&self) -> GridSignature {
        GridSignature { dims: self.dims, spacing: self.spacing, affine: self.affine }
    }

    /// World coordinates (mm) of a voxel index.
    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[r][0] * ijk[0] + a[r][1] * ijk[1] + a[r][2] * ijk[2] + a[r][3];
        }
        out
    }

    /// Stack 3D volumes (or channels of 4D ones) into a single 4D volume.
    pub fn stack(parts: &[&Volume]) -> Result<Volume> {
        let first = parts.first().ok_or_else(|| Error::Input("nothing to stack".into()))?;
        let mut data = Vec::with_capacity(first.n_voxels() * parts.iter().map(|p| p.channels).sum::<usize>());
        let mut channels = 0;
        for (k, p) in parts.iter().enumerate() {
            ensure_compatible(first, p, "part 0", &format!("part {k}"))?;
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        first.like_channels(channels, Intent::VectorChannel, data)
    }
}

/// Spatial grid of a volume: dims, spacing and affine.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSignature {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

pub const DEFAULT_GRID_TOLERANCE: f64 = 1e-4;

impl GridSignature {
    pub fn compatible_with(&self, other: &GridSignature, tol: f64) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(other.spacing.iter()).all(|(a, b)| (a - b).abs() <= tol)
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Error unless `a` and `b` share a grid at the default tolerance.
pub fn ensure_compatible(a: &Volume, b: &Volume, name_a: &str, name_b: &str) -> Result<()> {
    if a.signature().compatible_with(&b.signature(), DEFAULT_GRID_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::GridMismatch { left: name_a.to_string(), right: name_b.to_string() })
    }
}

/// Cut a `size` box centered at `center` out of `v`.
///
/// The box starts at `center - size/2` (integer division). The affine is
/// shifted so retained voxels keep their world coordinates. No padding: a
/// box that leaves the grid is an error.
pub fn center_crop(v: &Volume, size: [usize; 3], center: [usize; 3]) -> Result<Volume> {
    let mut start = [0usize; 3];
    for ax in 0..3 {
        if size[ax] == 0 {
            return Err(Error::Parameter("crop size must be positive".into()));
        }
        let half = size[ax] / 2;
        if center[ax] < half || center[ax] - half + size[ax] > v.dims[ax] {
            return Err(Error::OutOfBounds(format!(
                "axis {ax}: box of {} centered at {} exceeds extent {}",
                size[ax], center[ax], v.dims[ax]
            )));
        }
        start[ax] = center[ax] - half;
    }
    let n_out = size[0] * size[1] * size[2];
    let mut data = Vec::with_capacity(n_out * v.channels);
    for c in 0..v.channels {
        let src = v.channel(c);
        for z in 0..size[2] {
            for y in 0..size[1] {
                let row = v.index(start[0], start[1] + y, start[2] + z);
                data.extend_from_slice(&src[row..row + size[0]]);
            }
        }
    }
    let mut affine = v.affine;
    let shift = v.voxel_to_world([start[0] as f64, start[1] as f64, start[2] as f64]);
    for (r, s) in shift.iter().enumerate() {
        affine[r][3] = *s;
    }
    Volume::build(size, v.channels, v.four_d, v.spacing, affine, v.intent, data)
}

/// Grid midpoint, the default crop center.
pub fn grid_midpoint(v: &Volume) -> [usize; 3] {
    let d = v.dims();
    [d[0] / 2, d[1] / 2, d[2] / 2]
}
