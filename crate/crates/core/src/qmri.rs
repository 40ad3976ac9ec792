//! Inversion-recovery signal model, PD/T1 estimation from two inversion
//! times, and synthesis of images at arbitrary inversion times.
//!
//! The model is `I = PD * (1 - 2 exp(-TI/T1) + exp(-TR/T1))`. It is kept
//! signed: synthesized images are negative below the null point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{ensure_compatible, Intent, Volume};

/// Repetition and inversion time of one inversion-recovery acquisition (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrAcquisition {
    pub tr: f64,
    pub ti: f64,
}

impl IrAcquisition {
    pub fn new(tr: f64, ti: f64) -> Result<Self> {
        let acq = Self { tr, ti };
        acq.validate()?;
        Ok(acq)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ti > 0.0 && self.ti < self.tr && self.tr.is_finite()) {
            return Err(Error::Parameter(format!("need 0 < TI < TR, got TI={} TR={}", self.ti, self.tr)));
        }
        Ok(())
    }
}

/// Signal of a voxel with proton density `pd` and relaxation time `t1`.
/// `t1 <= 0` is treated as the `t1 -> 0` limit, which is `pd`.
#[inline]
pub fn ir_signal(pd: f64, t1: f64, acq: IrAcquisition) -> f64 {
    pd * ir_factor(t1, acq.tr, acq.ti)
}

#[inline]
fn ir_factor(t1: f64, tr: f64, ti: f64) -> f64 {
    if t1 <= 0.0 {
        return 1.0;
    }
    1.0 - 2.0 * (-ti / t1).exp() + (-tr / t1).exp()
}

/// Inversion time at which the signal of `t1` crosses zero, by bisection
/// on `(0, tr)`.
pub fn null_ti(t1: f64, tr: f64) -> Result<f64> {
    if !(t1 > 0.0) || !(tr > 0.0) || !t1.is_finite() {
        return Err(Error::Parameter(format!("null_ti needs t1 > 0 and tr > 0, got {t1}, {tr}")));
    }
    let f = |ti: f64| ir_factor(t1, tr, ti);
    let (mut lo, mut hi) = (0.0, tr);
    if f(lo) * f(hi) > 0.0 {
        return Err(Error::Numerical(format!("no signal null in (0, {tr}) for T1={t1}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
}

/// Search bounds and tolerance for the T1 fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub t1_min: f64,
    pub t1_max: f64,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { t1_min: 1.0, t1_max: 10_000.0, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdT1Fit {
    pub pd: f64,
    pub t1: f64,
    pub valid: bool,
}

impl PdT1Fit {
    const INVALID: PdT1Fit = PdT1Fit { pd: 0.0, t1: 0.0, valid: false };
}

const GRID_POINTS: usize = 48;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Least-squares (PD, T1) from two images sharing TR.
///
/// For a fixed T1 the best PD is the projection `Σ I f / Σ f²`; the
/// remaining residual is minimized over T1 by a log-spaced scan followed
/// by golden-section refinement. Fits that land on a T1 bound, have no
/// positive PD, or see non-finite inputs come back zeroed and invalid.
pub fn fit_pd_t1(
    i_long: f64,
    i_short: f64,
    acq_long: IrAcquisition,
    acq_short: IrAcquisition,
    opts: &FitOptions,
) -> PdT1Fit {
    if !i_long.is_finite() || !i_short.is_finite() || (i_long == 0.0 && i_short == 0.0) {
        return PdT1Fit::INVALID;
    }
    let tr = acq_long.tr;
    let profile = |t1: f64| -> (f64, f64) {
        let fl = ir_factor(t1, tr, acq_long.ti);
        let fs = ir_factor(t1, tr, acq_short.ti);
        let pd = ((i_long * fl + i_short * fs) / (fl * fl + fs * fs)).max(0.0);
        let rl = i_long - pd * fl;
        let rs = i_short - pd * fs;
        (rl * rl + rs * rs, pd)
    };

    let log_lo = opts.t1_min.ln();
    let step = (opts.t1_max.ln() - log_lo) / (GRID_POINTS - 1) as f64;
    let grid = |k: usize| if k + 1 == GRID_POINTS { opts.t1_max } else { (log_lo + step * k as f64).exp() };
    let mut best = 0;
    let mut best_sse = f64::INFINITY;
    for k in 0..GRID_POINTS {
        let (sse, _) = profile(grid(k));
        if sse < best_sse {
            best_sse = sse;
            best = k;
        }
    }
    let mut a = grid(best.saturating_sub(1));
    let mut b = grid((best + 1).min(GRID_POINTS - 1));

    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = profile(c).0;
    let mut fd = profile(d).0;
    while b - a > opts.tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = profile(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = profile(d).0;
        }
    }
    let t1 = 0.5 * (a + b);
    let (_, pd) = profile(t1);
    let at_bound = t1 - opts.t1_min <= 2.0 * opts.tol || opts.t1_max - t1 <= 2.0 * opts.tol;
    if at_bound || !(pd > 0.0) || !pd.is_finite() {
        return PdT1Fit::INVALID;
    }
    PdT1Fit { pd, t1, valid: true }
}

/// Shared TR and the two inversion times of an MPRAGE/FGATIR pair (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionPair {
    pub tr: f64,
    pub ti_mprage: f64,
    pub ti_fgatir: f64,
}

impl Default for AcquisitionPair {
    fn default() -> Self {
        Self { tr: 4000.0, ti_mprage: 1400.0, ti_fgatir: 400.0 }
    }
}

impl AcquisitionPair {
    pub fn mprage(&self) -> Result<IrAcquisition> {
        IrAcquisition::new(self.tr, self.ti_mprage)
    }

    pub fn fgatir(&self) -> Result<IrAcquisition> {
        IrAcquisition::new(self.tr, self.ti_fgatir)
    }

    pub fn validate(&self) -> Result<()> {
        self.mprage()?;
        self.fgatir()?;
        if self.ti_mprage == self.ti_fgatir {
            return Err(Error::Parameter("the two inversion times must differ".into()));
        }
        Ok(())
    }
}

/// PD and T1 maps plus the TR they refer to.
#[derive(Debug, Clone)]
pub struct QMaps {
    pub pd: Volume,
    pub t1: Volume,
    pub valid_mask: Volume,
    pub tr: f64,
}

impl QMaps {
    /// Assemble maps from existing volumes; voxels with zero or negative
    /// T1 are treated as invalid.
    pub fn from_volumes(pd: Volume, t1: Volume, tr: f64) -> Result<Self> {
        ensure_compatible(&pd, &t1, "pd", "t1")?;
        if !(tr > 0.0) {
            return Err(Error::Parameter(format!("TR must be positive, got {tr}")));
        }
        let valid: Vec<f64> = pd
            .data()
            .iter()
            .zip(t1.data())
            .map(|(&p, &t)| if t > 0.0 && p.is_finite() && t.is_finite() { 1.0 } else { 0.0 })
            .collect();
        let valid_mask = pd.like(Intent::Label, valid)?;
        Ok(Self { pd, t1, valid_mask, tr })
    }
}

/// Voxelwise `fit_pd_t1` over a volume pair, restricted to `mask` if given.
pub fn fit_qmaps(
    mprage: &Volume,
    fgatir: &Volume,
    acq_mprage: IrAcquisition,
    acq_fgatir: IrAcquisition,
    mask: Option<&Volume>,
    opts: &FitOptions,
) -> Result<QMaps> {
    acq_mprage.validate()?;
    acq_fgatir.validate()?;
    if acq_mprage.tr != acq_fgatir.tr {
        return Err(Error::Parameter("both acquisitions must share TR".into()));
    }
    if acq_mprage.ti == acq_fgatir.ti {
        return Err(Error::Parameter("the two inversion times must differ".into()));
    }
    ensure_compatible(mprage, fgatir, "mprage", "fgatir")?;
    if let Some(m) = mask {
        ensure_compatible(mprage, m, "mprage", "mask")?;
    }
    let n = mprage.n_voxels();
    let (il, is) = (mprage.channel(0), fgatir.channel(0));
    let fits = par::map_indices(n, |i| {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            return PdT1Fit::INVALID;
        }
        fit_pd_t1(il[i], is[i], acq_mprage, acq_fgatir, opts)
    });
    let pd = mprage.like(Intent::Intensity, fits.iter().map(|f| f.pd).collect())?;
    let t1 = mprage.like(Intent::Intensity, fits.iter().map(|f| f.t1).collect())?;
    let valid_mask = mprage.like(Intent::Label, fits.iter().map(|f| f.valid as u8 as f64).collect())?;
    Ok(QMaps { pd, t1, valid_mask, tr: acq_mprage.tr })
}

/// Synthesize the image at inversion time `ti`; invalid voxels are 0.
pub fn synth_ti(q: &QMaps, ti: f64) -> Result<Volume> {
    let acq = IrAcquisition::new(q.tr, ti)?;
    let data = synth_channel(q, acq);
    q.pd.like(Intent::Intensity, data)
}

fn synth_channel(q: &QMaps, acq: IrAcquisition) -> Vec<f64> {
    let (pd, t1, valid) = (q.pd.data(), q.t1.data(), q.valid_mask.data());
    par::map_indices(q.pd.n_voxels(), |i| if valid[i] != 0.0 { ir_signal(pd[i], t1[i], acq) } else { 0.0 })
}

/// Inversion-time sweep `start, start+step, ..., end` (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiTiSpec {
    pub ti_start: f64,
    pub ti_end: f64,
    pub ti_step: f64,
}

impl Default for MultiTiSpec {
    fn default() -> Self {
        Self { ti_start: 400.0, ti_end: 1400.0, ti_step: 20.0 }
    }
}

impl MultiTiSpec {
    pub fn validate(&self) -> Result<()> {
        let span = self.ti_end - self.ti_start;
        let steps = span / self.ti_step;
        if !(self.ti_start < self.ti_end) || !(self.ti_step > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "invalid TI sweep {}..{} step {}",
                self.ti_start, self.ti_end, self.ti_step
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        ((self.ti_end - self.ti_start) / self.ti_step).round() as usize + 1
    }

    pub fn tis(&self) -> Vec<f64> {
        (0..self.count()).map(|k| self.ti_start + k as f64 * self.ti_step).collect()
    }
}

/// One channel per inversion time of the sweep.
pub fn synth_multi_ti(q: &QMaps, spec: &MultiTiSpec) -> Result<Volume> {
    spec.validate()?;
    let tis = spec.tis();
    let acqs = tis.iter().map(|&ti| IrAcquisition::new(q.tr, ti)).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(q.pd.n_voxels() * acqs.len());
    for acq in acqs {
        data.extend(synth_channel(q, acq));
    }
    q.pd.like_channels(tis.len(), Intent::VectorChannel, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;

    const TR: f64 = 4000.0;

    fn acqs() -> (IrAcquisition, IrAcquisition) {
        (IrAcquisition::new(TR, 1400.0).unwrap(), IrAcquisition::new(TR, 400.0).unwrap())
    }

    #[test]
    fn forward_model_values() {
        let (l, s) = acqs();
        assert_eq!(ir_signal(1000.0, 0.0, l), 1000.0);
        assert_eq!(ir_signal(0.0, 812.0, s), 0.0);
        // 100 * (1 - 2 e^-1.4 + e^-4), 100 * (1 - 2 e^-0.4 + e^-4)
        assert!((ir_signal(100.0, 1000.0, l) - 52.512_171_100_552).abs() < 1e-9);
        assert!((ir_signal(100.0, 1000.0, s) - -32.232_445_318_254).abs() < 1e-9);
    }

    #[test]
    fn acquisition_validation() {
        assert!(IrAcquisition::new(4000.0, 0.0).is_err());
        assert!(IrAcquisition::new(4000.0, 4000.0).is_err());
        assert!(IrAcquisition::new(4000.0, 400.0).is_ok());
    }

    #[test]
    fn null_point() {
        // closed form T1 ln(2 / (1 + e^{-TR/T1}))
        let expected = 1000.0 * (2.0 / (1.0 + (-4.0f64).exp())).ln();
        let ti = null_ti(1000.0, TR).unwrap();
        assert!((ti - expected).abs() < 1e-6);
        assert!((ti - 675.0).abs() < 0.1);
        assert!(ir_signal(100.0, 1000.0, IrAcquisition { tr: TR, ti }).abs() < 1e-9);
        let far = null_ti(1000.0, 1e9).unwrap();
        assert!((far - 1000.0 * std::f64::consts::LN_2).abs() < 1e-6);
        assert!(null_ti(0.0, TR).is_err());
    }

    #[test]
    fn fit_recovers_reference_voxel() {
        let (l, s) = acqs();
        let f = fit_pd_t1(ir_signal(100.0, 1000.0, l), ir_signal(100.0, 1000.0, s), l, s, &FitOptions::default());
        assert!(f.valid);
        assert!((f.pd - 100.0).abs() < 1e-4);
        assert!((f.t1 - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn fit_grid_round_trip() {
        let (l, s) = acqs();
        for pd in [50.0, 100.0, 150.0] {
            for t1 in [300.0, 800.0, 1500.0, 3000.0] {
                let f = fit_pd_t1(ir_signal(pd, t1, l), ir_signal(pd, t1, s), l, s, &FitOptions::default());
                assert!(f.valid, "pd {pd} t1 {t1}");
                assert!(((f.pd - pd) / pd).abs() < 1e-3, "pd {pd} t1 {t1}: {f:?}");
                assert!(((f.t1 - t1) / t1).abs() < 1e-3, "pd {pd} t1 {t1}: {f:?}");
            }
        }
    }

    #[test]
    fn degenerate_and_nonfinite_inputs() {
        let (l, s) = acqs();
        let opts = FitOptions::default();
        assert_eq!(fit_pd_t1(0.0, 0.0, l, s, &opts), PdT1Fit::INVALID);
        assert!(!fit_pd_t1(f64::NAN, 1.0, l, s, &opts).valid);
        assert!(!fit_pd_t1(1.0, f64::INFINITY, l, s, &opts).valid);
        // negative signal at both TIs has no non-negative PD solution
        assert_eq!(fit_pd_t1(-10.0, -10.0, l, s, &opts), PdT1Fit::INVALID);
    }

    #[test]
    fn bound_hits_are_invalid() {
        let (l, s) = acqs();
        let opts = FitOptions { t1_min: 1.0, t1_max: 2000.0, tol: 1e-4 };
        let f = fit_pd_t1(ir_signal(100.0, 5000.0, l), ir_signal(100.0, 5000.0, s), l, s, &opts);
        assert!(!f.valid);
        assert_eq!((f.pd, f.t1), (0.0, 0.0));
    }

    fn vol(data: Vec<f64>) -> Volume {
        let n = data.len();
        Volume::new([n, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Intensity, data).unwrap()
    }

    #[test]
    fn single_voxel_volume_matches_scalar_fit() {
        let (l, s) = acqs();
        let (a, b) = (ir_signal(80.0, 1200.0, l), ir_signal(80.0, 1200.0, s));
        let q = fit_qmaps(&vol(vec![a]), &vol(vec![b]), l, s, None, &FitOptions::default()).unwrap();
        let f = fit_pd_t1(a, b, l, s, &FitOptions::default());
        assert_eq!(q.pd.data()[0], f.pd);
        assert_eq!(q.t1.data()[0], f.t1);
        assert_eq!(q.valid_mask.data()[0], 1.0);
    }

    #[test]
    fn mask_and_zero_inputs() {
        let (l, s) = acqs();
        let a = vol(vec![ir_signal(80.0, 1200.0, l), 0.0]);
        let b = vol(vec![ir_signal(80.0, 1200.0, s), 0.0]);
        let q = fit_qmaps(&a, &b, l, s, None, &FitOptions::default()).unwrap();
        assert_eq!(q.valid_mask.data(), &[1.0, 0.0]);
        let mut m = vol(vec![0.0, 1.0]);
        m.set_intent(Intent::Label);
        let q = fit_qmaps(&a, &b, l, s, Some(&m), &FitOptions::default()).unwrap();
        assert_eq!(q.valid_mask.data(), &[0.0, 0.0]);
        assert_eq!(q.pd.data(), &[0.0, 0.0]);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let (l, s) = acqs();
        let r = fit_qmaps(&vol(vec![1.0]), &vol(vec![1.0, 2.0]), l, s, None, &FitOptions::default());
        assert!(matches!(r, Err(Error::GridMismatch { .. })));
        let bad = IrAcquisition { tr: 3000.0, ti: 400.0 };
        assert!(fit_qmaps(&vol(vec![1.0]), &vol(vec![1.0]), l, bad, None, &FitOptions::default()).is_err());
    }

    #[test]
    fn synthesis_monotone_and_spec() {
        let (l, s) = acqs();
        let q = fit_qmaps(
            &vol(vec![ir_signal(100.0, 900.0, l)]),
            &vol(vec![ir_signal(100.0, 900.0, s)]),
            l,
            s,
            None,
            &FitOptions::default(),
        )
        .unwrap();
        let v: Vec<f64> = [500.0, 600.0, 700.0].iter().map(|&ti| synth_ti(&q, ti).unwrap().data()[0]).collect();
        assert!(v[0] < v[1] && v[1] < v[2]);
        assert!(synth_ti(&q, 0.0).is_err());
        assert!(synth_ti(&q, TR).is_err());

        let spec = MultiTiSpec::default();
        assert_eq!(spec.count(), 51);
        let m = synth_multi_ti(&q, &spec).unwrap();
        assert_eq!(m.channels(), 51);
        assert_eq!(m.channel(0), synth_ti(&q, 400.0).unwrap().data());
        assert!(MultiTiSpec { ti_start: 400.0, ti_end: 1410.0, ti_step: 20.0 }.validate().is_err());
        assert!(MultiTiSpec { ti_start: 400.0, ti_end: 400.0, ti_step: 20.0 }.validate().is_err());
    }

    #[test]
    fn zero_pd_synthesizes_zero() {
        let q = QMaps::from_volumes(vol(vec![0.0; 3]), vol(vec![1000.0; 3]), TR).unwrap();
        assert!(synth_ti(&q, 700.0).unwrap().data().iter().all(|&x| x == 0.0));
    }
}
