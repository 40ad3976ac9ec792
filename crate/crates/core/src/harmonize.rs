//! Joint intensity harmonization of the MPRAGE/FGATIR pair.
//!
//! Both images are divided by one shared bias field (the geometric mean of
//! the per-image fields) and multiplied by one shared scale, so the
//! voxelwise FGATIR/MPRAGE ratio the T1 fit depends on is left untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{ensure_compatible, Intent, Volume};

/// Strictly positive multiplicative gain field.
#[derive(Debug, Clone)]
pub struct BiasField(Volume);

impl BiasField {
    pub fn new(field: Volume) -> Result<Self> {
        if let Some((i, v)) = field.data().iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("bias field value {v} at voxel {i} is not positive")));
        }
        Ok(Self(field))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// Voxelwise geometric mean `sqrt(b1 * b2)`.
pub fn harmonic_bias(b1: &BiasField, b2: &BiasField) -> Result<BiasField> {
    ensure_compatible(&b1.0, &b2.0, "bias1", "bias2")?;
    let data = b1.0.data().iter().zip(b2.0.data()).map(|(a, b)| (a * b).sqrt()).collect();
    BiasField::new(b1.0.like(Intent::Intensity, data)?)
}

/// Voxelwise `img / b`.
pub fn apply_bias(img: &Volume, b: &BiasField) -> Result<Volume> {
    ensure_compatible(img, &b.0, "image", "bias")?;
    let data = img.data().iter().zip(b.0.data()).map(|(x, g)| x / g).collect();
    img.like(img.intent(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcmOptions {
    pub classes: usize,
    pub fuzziness: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmOptions {
    fn default() -> Self {
        Self { classes: 3, fuzziness: 2.0, tol: 1e-4, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct FcmResult {
    /// Ascending.
    pub centroids: Vec<f64>,
    /// One channel per class, in centroid order; zero outside the mask.
    pub memberships: Volume,
    pub fuzziness: f64,
    pub iterations: usize,
    /// Objective after each membership update.
    pub objective_history: Vec<f64>,
    pub objective: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Memberships of one sample; crisp when it sits exactly on a centroid.
fn memberships_into(x: f64, centroids: &[f64], exponent: f64, out: &mut [f64]) {
    if let Some(hit) = centroids.iter().position(|&v| v == x) {
        out.iter_mut().for_each(|u| *u = 0.0);
        out[hit] = 1.0;
        return;
    }
    for (c, u) in out.iter_mut().enumerate() {
        let dc = (x - centroids[c]).abs();
        let s: f64 = centroids.iter().map(|&v| (dc / (x - v).abs()).powf(exponent)).sum();
        *u = 1.0 / s;
    }
}

/// Fuzzy C-means on the in-mask intensities of `img`.
///
/// Centroids start at evenly spaced percentiles between the 10th and 90th
/// (10/50/90 for three classes), so the result is seed-free.
pub fn fcm(img: &Volume, mask: &Volume, opts: &FcmOptions) -> Result<FcmResult> {
    ensure_compatible(img, mask, "image", "mask")?;
    let c = opts.classes;
    let m = opts.fuzziness;
    if c < 2 {
        return Err(Error::Parameter(format!("FCM needs at least 2 classes, got {c}")));
    }
    if !(m > 1.0) {
        return Err(Error::Parameter(format!("FCM fuzziness must exceed 1, got {m}")));
    }
    let idx: Vec<usize> = (0..img.n_voxels()).filter(|&i| mask.data()[i] != 0.0).collect();
    if idx.is_empty() {
        return Err(Error::Input("FCM mask is empty".into()));
    }
    let xs: Vec<f64> = idx.iter().map(|&i| img.data()[i]).collect();
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite intensity inside the FCM mask".into()));
    }
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < c {
        return Err(Error::Degenerate(format!("{} distinct in-mask intensities for {c} classes", distinct.len())));
    }

    let mut centroids: Vec<f64> =
        (0..c).map(|k| percentile(&sorted, 10.0 + 80.0 * k as f64 / (c - 1) as f64)).collect();
    let exponent = 2.0 / (m - 1.0);
    let n = xs.len();
    let mut history = Vec::new();
    let mut iterations = 0;

    // Partial sums per chunk: [Σu^m x (c), Σu^m (c), objective].
    let accumulate = |centroids: &[f64]| -> Vec<f64> {
        par::ordered_reduce(
            n,
            vec![0.0; 2 * c + 1],
            |range| {
                let mut acc = vec![0.0; 2 * c + 1];
                let mut u = vec![0.0; c];
                for &x in &xs[range] {
                    memberships_into(x, centroids, exponent, &mut u);
                    for k in 0..c {
                        let w = u[k].powf(m);
                        acc[k] += w * x;
                        acc[c + k] += w;
                        let d = x - centroids[k];
                        acc[2 * c] += w * d * d;
                    }
                }
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
    };

    while iterations < opts.max_iter {
        iterations += 1;
        let acc = accumulate(&centroids);
        history.push(acc[2 * c]);
        let mut shift: f64 = 0.0;
        for k in 0..c {
            if acc[c + k] > 0.0 {
                let v = acc[k] / acc[c + k];
                shift = shift.max((v - centroids[k]).abs());
                centroids[k] = v;
            }
        }
        if shift < opts.tol {
            break;
        }
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let centroids: Vec<f64> = order.iter().map(|&k| centroids[k]).collect();

    let nv = img.n_voxels();
    let mut data = vec![0.0; nv * c];
    let per_sample = par::map_indices(n, |j| {
        let mut u = vec![0.0; c];
        memberships_into(xs[j], &centroids, exponent, &mut u);
        u
    });
    let mut objective = 0.0;
    for (j, u) in per_sample.iter().enumerate() {
        for k in 0..c {
            data[k * nv + idx[j]] = u[k];
            let d = xs[j] - centroids[k];
            objective += u[k].powf(m) * d * d;
        }
    }
    let memberships = img.like_channels(c, Intent::VectorChannel, data)?;
    Ok(FcmResult { centroids, memberships, fuzziness: m, iterations, objective_history: history, objective })
}

/// Voxels whose membership in the brightest class exceeds `threshold`.
pub fn wm_mask(f: &FcmResult, threshold: f64) -> Result<Volume> {
    let top = f.centroids.len() - 1;
    let data = f.memberships.channel(top).iter().map(|&u| if u > threshold { 1.0 } else { 0.0 }).collect();
    f.memberships.like(Intent::Label, data)
}

/// Scale both images by `target / mean(mprage over wm)`.
pub fn wm_mean_normalize(mprage: &Volume, fgatir: &Volume, wm: &Volume, target: f64) -> Result<(Volume, Volume, f64)> {
    ensure_compatible(mprage, fgatir, "mprage", "fgatir")?;
    ensure_compatible(mprage, wm, "mprage", "wm mask")?;
    let (sum, count) = mprage
        .data()
        .iter()
        .zip(wm.data())
        .filter(|(_, &w)| w != 0.0)
        .fold((0.0, 0usize), |(s, n), (&x, _)| (s + x, n + 1));
    if count == 0 {
        return Err(Error::Input("white-matter mask is empty".into()));
    }
    let mean = sum / count as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Input(format!("mean white-matter intensity {mean} is not positive")));
    }
    let scale = target / mean;
    let scaled = |v: &Volume| v.like(v.intent(), v.data().iter().map(|x| x * scale).collect());
    Ok((scaled(mprage)?, scaled(fgatir)?, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizeOptions {
    pub fcm: FcmOptions,
    pub wm_threshold: f64,
    pub target: f64,
}

impl Default for HarmonizeOptions {
    fn default() -> Self {
        Self { fcm: FcmOptions::default(), wm_threshold: 0.5, target: 1000.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Harmonized {
    pub mprage: Volume,
    pub fgatir: Volume,
    pub wm_mask: Volume,
    pub scale: f64,
    pub fcm: FcmResult,
}

/// Shared bias correction, FCM white-matter mask on MPRAGE, then shared
/// white-matter mean normalization. Without bias fields the correction
/// step is skipped; without a brain mask every voxel is used.
pub fn harmonize(
    mprage: &Volume,
    fgatir: &Volume,
    bias: Option<(&BiasField, &BiasField)>,
    brain_mask: Option<&Volume>,
    opts: &HarmonizeOptions,
) -> Result<Harmonized> {
    ensure_compatible(mprage, fgatir, "mprage", "fgatir")?;
    let (m, f) = match bias {
        Some((b1, b2)) => {
            let b = harmonic_bias(b1, b2)?;
            (apply_bias(mprage, &b)?, apply_bias(fgatir, &b)?)
        }
        None => (mprage.clone(), fgatir.clone()),
    };
    let full;
    let mask = match brain_mask {
        Some(mk) => mk,
        None => {
            full = m.like(Intent::Label, vec![1.0; m.n_voxels()])?;
            &full
        }
    };
    let fcm = fcm(&m, mask, &opts.fcm)?;
    let wm = wm_mask(&fcm, opts.wm_threshold)?;
    let (mprage, fgatir, scale) = wm_mean_normalize(&m, &f, &wm, opts.target)?;
    Ok(Harmonized { mprage, fgatir, wm_mask: wm, scale, fcm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn vol(data: Vec<f64>) -> Volume {
        let n = data.len();
        Volume::new([n, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Intensity, data).unwrap()
    }

    fn ones(n: usize) -> Volume {
        let mut v = vol(vec![1.0; n]);
        v.set_intent(Intent::Label);
        v
    }

    fn three_blobs(per: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = Vec::new();
        for mean in [10.0, 50.0, 90.0] {
            let d = Normal::new(mean, 2.0).unwrap();
            data.extend((0..per).map(|_| d.sample(&mut rng)));
        }
        vol(data)
    }

    #[test]
    fn harmonic_bias_basics() {
        let b1 = BiasField::new(vol(vec![4.0, 2.0])).unwrap();
        let b2 = BiasField::new(vol(vec![1.0, 2.0])).unwrap();
        let h = harmonic_bias(&b1, &b2).unwrap();
        assert_eq!(h.volume().data(), &[2.0, 2.0]);
        assert_eq!(harmonic_bias(&b2, &b1).unwrap().volume().data(), h.volume().data());
        assert_eq!(harmonic_bias(&b1, &b1).unwrap().volume().data(), b1.volume().data());
        assert!(matches!(BiasField::new(vol(vec![1.0, 0.0])), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_bias_inverse() {
        let img = vol(vec![10.0, 3.5, -2.0]);
        let b = BiasField::new(vol(vec![2.0, 1.3, 0.7])).unwrap();
        assert_eq!(apply_bias(&vol(vec![10.0, 1.0, 1.0]), &b).unwrap().data()[0], 5.0);
        let prod = vol(img.data().iter().zip(b.volume().data()).map(|(x, g)| x * g).collect());
        let back = apply_bias(&prod, &b).unwrap();
        for (a, e) in back.data().iter().zip(img.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs());
        }
        let unit = BiasField::new(vol(vec![1.0; 3])).unwrap();
        assert_eq!(apply_bias(&img, &unit).unwrap().data(), img.data());
    }

    #[test]
    fn fcm_three_blobs() {
        let img = three_blobs(400);
        let f = fcm(&img, &ones(1200), &FcmOptions::default()).unwrap();
        for (c, e) in f.centroids.iter().zip([10.0, 50.0, 90.0]) {
            assert!((c - e).abs() < 1.0, "{:?}", f.centroids);
        }
        for w in f.objective_history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", f.objective_history);
        }
        for i in 0..1200 {
            let s: f64 = f.memberships.voxel_channels(i).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let wm = wm_mask(&f, 0.5).unwrap();
        for i in 0..1200 {
            assert_eq!(wm.data()[i] == 1.0, i >= 800, "voxel {i}");
        }
        let strict = wm_mask(&f, 1.0).unwrap();
        assert!(strict.data().iter().filter(|&&x| x != 0.0).count() < 10);
    }

    #[test]
    fn fcm_errors() {
        let two = FcmOptions { classes: 2, ..Default::default() };
        assert!(matches!(fcm(&vol(vec![5.0; 10]), &ones(10), &two), Err(Error::Degenerate(_))));
        let mut empty = vol(vec![0.0; 10]);
        empty.set_intent(Intent::Label);
        assert!(matches!(fcm(&vol(vec![5.0; 10]), &empty, &FcmOptions::default()), Err(Error::Input(_))));
        assert!(fcm(&three_blobs(5), &ones(15), &FcmOptions { fuzziness: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn exact_centroid_hit_is_crisp() {
        let mut u = [0.0; 3];
        memberships_into(50.0, &[10.0, 50.0, 90.0], 2.0, &mut u);
        assert_eq!(u, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn wm_mask_stays_inside_brain_mask() {
        let img = three_blobs(100);
        let mut mask = ones(300);
        mask.data_mut()[250..].iter_mut().for_each(|x| *x = 0.0);
        let f = fcm(&img, &mask, &FcmOptions::default()).unwrap();
        let wm = wm_mask(&f, 0.5).unwrap();
        assert!(wm.data()[250..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalization() {
        let m = vol(vec![500.0, 500.0, 100.0]);
        let g = vol(vec![20.0, -30.0, 40.0]);
        let mut wm = ones(3);
        wm.data_mut()[2] = 0.0;
        let (m2, g2, scale) = wm_mean_normalize(&m, &g, &wm, 1000.0).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(g2.data(), &[40.0, -60.0, 80.0]);
        assert!(((m2.data()[0] + m2.data()[1]) / 2.0 - 1000.0).abs() < 1e-9);
        for i in 0..3 {
            assert_eq!(g2.data()[i] / m2.data()[i], g.data()[i] / m.data()[i]);
        }
        // pre-scaling both inputs is absorbed by the scale
        let m3 = vol(m.data().iter().map(|x| x * 3.7).collect());
        let g3 = vol(g.data().iter().map(|x| x * 3.7).collect());
        let (m4, g4, _) = wm_mean_normalize(&m3, &g3, &wm, 1000.0).unwrap();
        for i in 0..3 {
            assert!((m4.data()[i] - m2.data()[i]).abs() < 1e-9);
            assert!((g4.data()[i] - g2.data()[i]).abs() < 1e-9);
        }
        assert!(wm_mean_normalize(&m, &g, &vol(vec![0.0; 3]), 1000.0).is_err());
        assert!(wm_mean_normalize(&vol(vec![-1.0; 3]), &g, &ones(3), 1000.0).is_err());
    }
}
