//! Knutsson mapping of sign-ambiguous orientations to 5D, and the
//! orientation edge map computed from the mapped field.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{ensure_compatible, Intent, Volume};

const INV_SQRT3: f64 = 0.577_350_269_189_625_8;

/// `(x²−y², 2xy, 2xz, 2yz, (2z²−x²−y²)/√3)` of the normalized input.
/// Unit inputs map to vectors of norm 2/√3; the zero vector maps to zero.
pub fn knutsson_map(v: [f64; 3]) -> [f64; 5] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return [0.0; 5];
    }
    let (x, y, z) = (v[0] / n, v[1] / n, v[2] / n);
    [x * x - y * y, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z, INV_SQRT3 * (2.0 * z * z - x * x - y * y)]
}

/// Voxelwise map of a 3-channel orientation field to a 5-channel field.
/// Voxels outside `mask` are zero.
pub fn knutsson_field(orientation: &Volume, mask: Option<&Volume>) -> Result<Volume> {
    if orientation.channels() != 3 {
        return Err(Error::Input(format!("orientation field needs 3 channels, got {}", orientation.channels())));
    }
    if let Some(m) = mask {
        ensure_compatible(orientation, m, "orientation", "mask")?;
    }
    let n = orientation.n_voxels();
    let mapped = par::map_indices(n, |i| {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            return [0.0; 5];
        }
        let d = orientation.data();
        knutsson_map([d[i], d[n + i], d[2 * n + i]])
    });
    let mut data = vec![0.0; 5 * n];
    for (i, k) in mapped.iter().enumerate() {
        for c in 0..5 {
            data[c * n + i] = k[c];
        }
    }
    orientation.like_channels(5, Intent::VectorChannel, data)
}

/// Frobenius norm of the spatial Jacobian of a multichannel field.
///
/// Central differences in voxel units with replicated borders. Background
/// voxels (all channels zero) get 0 and are treated like the border when
/// they neighbor a foreground voxel, so the mask outline is not an edge.
pub fn edge_map(field: &Volume) -> Result<Volume> {
    let n = field.n_voxels();
    let nc = field.channels();
    let [nx, ny, nz] = field.dims();
    let d = field.data();
    let is_bg = |i: usize| (0..nc).all(|c| d[c * n + i] == 0.0);
    let out = par::map_indices(n, |i| {
        if is_bg(i) {
            return 0.0;
        }
        let [x, y, z] = field.coords(i);
        let mut sum = 0.0;
        for (pos, len, stride) in [(x, nx, 1), (y, ny, nx), (z, nz, nx * ny)] {
            let lo = if pos > 0 && !is_bg(i - stride) { i - stride } else { i };
            let hi = if pos + 1 < len && !is_bg(i + stride) { i + stride } else { i };
            for c in 0..nc {
                let g = 0.5 * (d[c * n + hi] - d[c * n + lo]);
                sum += g * g;
            }
        }
        sum.sqrt()
    });
    field.like(Intent::Intensity, out)
}

/// Separable Gaussian smoothing of every channel (voxel units, replicated
/// borders). A non-positive sigma returns a copy.
pub fn gaussian_smooth(field: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma > 0.0) {
        return Ok(field.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= s);

    let dims = field.dims();
    let n = field.n_voxels();
    let mut data = field.data().to_vec();
    for ax in 0..3 {
        let stride = [1, dims[0], dims[0] * dims[1]][ax];
        let len = dims[ax] as isize;
        let src = data.clone();
        par::for_each_chunk(&mut data, n, |c, chan| {
            let base = &src[c * n..(c + 1) * n];
            for (i, out) in chan.iter_mut().enumerate() {
                let pos = ((i / stride) % dims[ax]) as isize;
                let row = i as isize - pos * stride as isize;
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let p = (pos + k as isize - radius).clamp(0, len - 1);
                        w * base[(row + p * stride as isize) as usize]
                    })
                    .sum();
            }
        });
    }
    field.like_channels(field.channels(), field.intent(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;

    const TWO_OVER_SQRT3: f64 = 1.154_700_538_379_251_5;

    fn close(a: [f64; 5], b: [f64; 5]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    #[test]
    fn mapping_examples() {
        assert!(close(knutsson_map([0.0, 0.0, 1.0]), [0.0, 0.0, 0.0, 0.0, TWO_OVER_SQRT3]));
        assert!(close(knutsson_map([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.0, -INV_SQRT3]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(knutsson_map([h, h, 0.0]), [0.0, 1.0, 0.0, 0.0, -INV_SQRT3]));
        assert_eq!(knutsson_map([0.0; 3]), [0.0; 5]);
        // non-unit input is normalized first
        assert!(close(knutsson_map([0.0, 0.0, 3.0]), knutsson_map([0.0, 0.0, 1.0])));
    }

    fn field(dims: [usize; 3], f: impl Fn([usize; 3]) -> [f64; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        let mut data = vec![0.0; 3 * n];
        let probe = Volume::new(dims, 1, [1.0; 3], identity_affine(), Intent::Intensity, vec![0.0; n]).unwrap();
        for i in 0..n {
            let v = f(probe.coords(i));
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        Volume::new(dims, 3, [1.0; 3], identity_affine(), Intent::VectorChannel, data).unwrap()
    }

    #[test]
    fn constant_field() {
        let of = field([4, 4, 4], |_| [0.0, 0.0, 1.0]);
        let kf = knutsson_field(&of, None).unwrap();
        for i in 0..64 {
            let v: Vec<f64> = kf.voxel_channels(i).collect();
            assert!((v[4] - TWO_OVER_SQRT3).abs() < 1e-15 && v[..4].iter().all(|&x| x == 0.0));
        }
        assert!(edge_map(&kf).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn sign_flips_are_invisible() {
        let dir = [0.36, -0.48, 0.8];
        let plain = knutsson_field(&field([5, 5, 5], |_| dir), None).unwrap();
        let flipped = knutsson_field(
            &field([5, 5, 5], |[x, y, z]| if (x * 7 + y * 3 + z) % 2 == 0 { dir } else { dir.map(|v| -v) }),
            None,
        )
        .unwrap();
        assert_eq!(plain.data(), flipped.data());
        assert!(edge_map(&flipped).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn interface_ridge() {
        let of = field([8, 3, 3], |[x, _, _]| if x < 4 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
        let e = edge_map(&knutsson_field(&of, None).unwrap()).unwrap();
        for i in 0..e.n_voxels() {
            let [x, _, _] = e.coords(i);
            let on_interface = x == 3 || x == 4;
            assert_eq!(e.data()[i] > 0.0, on_interface, "x = {x}");
        }
        // |K(e_x) - K(e_z)| / 2 is the only derivative term at the interface
        let diff = 0.5 * (1.0f64 + 3.0).sqrt();
        assert!((e.data()[3] - diff).abs() < 1e-12);
    }

    #[test]
    fn mask_zeroes_background_and_hides_outline() {
        let of = field([6, 1, 1], |_| [0.0, 1.0, 0.0]);
        let mask = Volume::new([6, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Label, vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0])
            .unwrap();
        let kf = knutsson_field(&of, Some(&mask)).unwrap();
        assert!(kf.voxel_channels(0).all(|v| v == 0.0));
        assert!(edge_map(&kf).unwrap().data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn wrong_channel_count() {
        let v = Volume::new([1, 1, 1], 2, [1.0; 3], identity_affine(), Intent::VectorChannel, vec![0.0; 2]).unwrap();
        assert!(knutsson_field(&v, None).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let kf = knutsson_field(&field([5, 4, 3], |_| [0.6, 0.8, 0.0]), None).unwrap();
        let s = gaussian_smooth(&kf, 1.2).unwrap();
        for (a, b) in s.data().iter().zip(kf.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = field([9, 1, 1], |[x, _, _]| if x == 4 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
        let k = knutsson_field(&f, None).unwrap();
        let s = gaussian_smooth(&k, 1.0).unwrap();
        assert!(s.data()[4] < k.data()[4] && s.data()[3] > k.data()[3]);
    }
}
