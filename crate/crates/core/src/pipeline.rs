//! End-to-end feature pipeline driven by a single JSON config.
//!
//! Stages run in order: harmonize, fit-qmap, synth-ti, dti-fit, knutsson,
//! assemble, crop. Full-grid intermediates go to `<output>/intermediate/`,
//! cropped products and the stack to `<output>/`, and a `run_log.json`
//! records parameters, versions and SHA-256 checksums of every file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dti::{fit_tensor, read_bvals, read_bvecs, scalar_maps, DiffusionSet, DtiOptions};
use crate::error::{Error, Result};
use crate::harmonize::{harmonize, BiasField, HarmonizeOptions};
use crate::knutsson::{edge_map, gaussian_smooth, knutsson_field};
use crate::nifti::{read_nifti, write_nifti};
use crate::phantom;
use crate::qmri::{fit_qmaps, synth_multi_ti, AcquisitionPair, FitOptions, MultiTiSpec};
use crate::stack::{assemble_feature_stack, provenance_path, StackManifest};
use crate::volume::{center_crop, grid_midpoint, Volume};

pub const RUN_LOG: &str = "run_log.json";
pub const INTERMEDIATE_DIR: &str = "intermediate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub mprage: PathBuf,
    pub fgatir: PathBuf,
    pub dwi: PathBuf,
    pub bval: PathBuf,
    pub bvec: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias1: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias2: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brain_mask: Option<PathBuf>,
}

impl InputPaths {
    fn all(&self) -> Vec<(&'static str, &PathBuf)> {
        let mut v = vec![
            ("mprage", &self.mprage),
            ("fgatir", &self.fgatir),
            ("dwi", &self.dwi),
            ("bval", &self.bval),
            ("bvec", &self.bvec),
        ];
        for (role, p) in [("bias1", &self.bias1), ("bias2", &self.bias2), ("brain_mask", &self.brain_mask)] {
            if let Some(p) = p {
                v.push((role, p));
            }
        }
        v
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.mprage, &mut self.fgatir, &mut self.dwi, &mut self.bval, &mut self.bvec]
            .into_iter()
            .chain(self.bias1.iter_mut())
            .chain(self.bias2.iter_mut())
            .chain(self.brain_mask.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub size: [usize; 3],
    /// Voxel coordinates; the grid midpoint when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[usize; 3]>,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { size: [96; 3], center: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnutssonConfig {
    /// Gaussian sigma in voxels applied to the 5D field before the edge
    /// map; 0 disables smoothing.
    pub presmooth_sigma: f64,
}

fn default_crop() -> Option<CropConfig> {
    Some(CropConfig::default())
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub acquisition: AcquisitionPair,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub multi_ti: MultiTiSpec,
    #[serde(default)]
    pub harmonize: HarmonizeOptions,
    #[serde(default)]
    pub dti: DtiOptions,
    #[serde(default)]
    pub knutsson: KnutssonConfig,
    /// `null` disables cropping.
    #[serde(default = "default_crop")]
    pub crop: Option<CropConfig>,
    #[serde(default)]
    pub manifest: StackManifest,
    /// Gzip the written NIfTI files.
    #[serde(default = "yes")]
    pub compress: bool,
}

impl PipelineConfig {
    /// Parse a config file; relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json("pipeline config", e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.inputs.all_mut().chain(std::iter::once(&mut cfg.output_dir)) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for s in &mut cfg.manifest.sources {
            if s.source.ends_with(".nii") || s.source.ends_with(".nii.gz") {
                let p = Path::new(&s.source);
                if p.is_relative() {
                    s.source = base.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    /// Config for a directory written by [`phantom::Phantom::write`].
    pub fn for_phantom(dir: &Path, output_dir: &Path) -> Self {
        Self {
            inputs: InputPaths {
                mprage: dir.join(phantom::MPRAGE),
                fgatir: dir.join(phantom::FGATIR),
                dwi: dir.join(phantom::DWI),
                bval: dir.join(phantom::BVAL),
                bvec: dir.join(phantom::BVEC),
                bias1: Some(dir.join(phantom::BIAS1)),
                bias2: Some(dir.join(phantom::BIAS2)),
                brain_mask: Some(dir.join(phantom::BRAIN_MASK)),
            },
            output_dir: output_dir.to_path_buf(),
            acquisition: AcquisitionPair::default(),
            fit: FitOptions::default(),
            multi_ti: MultiTiSpec::default(),
            harmonize: HarmonizeOptions::default(),
            dti: DtiOptions::default(),
            knutsson: KnutssonConfig::default(),
            crop: default_crop(),
            manifest: StackManifest::default(),
            compress: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate()?;
        self.multi_ti.validate()?;
        let f = &self.fit;
        if !(f.t1_min > 0.0 && f.t1_min < f.t1_max && f.tol > 0.0) {
            return Err(Error::Parameter(format!("invalid T1 search {}..{} tol {}", f.t1_min, f.t1_max, f.tol)));
        }
        let h = &self.harmonize;
        if h.fcm.classes < 2 || !(h.fcm.fuzziness > 1.0) || !(h.fcm.tol > 0.0) || h.fcm.max_iter == 0 {
            return Err(Error::Parameter("FCM needs >= 2 classes, fuzziness > 1, tol > 0, max_iter > 0".into()));
        }
        if !(h.wm_threshold > 0.0 && h.wm_threshold < 1.0) || !(h.target > 0.0) {
            return Err(Error::Parameter("white-matter threshold must lie in (0, 1) and target be positive".into()));
        }
        if !(self.knutsson.presmooth_sigma >= 0.0) {
            return Err(Error::Parameter("presmooth sigma must be >= 0".into()));
        }
        if let Some(b) = self.dti.max_b {
            if !(b > 0.0) {
                return Err(Error::Parameter("max_b must be positive".into()));
            }
        }
        if let Some(c) = &self.crop {
            if c.size.contains(&0) {
                return Err(Error::Parameter("crop size must be positive".into()));
            }
        }
        if self.inputs.bias1.is_some() != self.inputs.bias2.is_some() {
            return Err(Error::Validation("give both bias fields or neither".into()));
        }
        if self.manifest.sources.is_empty() {
            return Err(Error::Manifest("manifest lists no sources".into()));
        }
        Ok(())
    }

    /// Error naming the first absent input.
    pub fn check_inputs(&self) -> Result<()> {
        for (role, p) in self.inputs.all() {
            if !p.is_file() {
                return Err(Error::MissingInput(format!("{role} ({})", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub harmonize_scale: f64,
    pub fcm_centroids: Vec<f64>,
    pub fcm_iterations: usize,
    pub qmap_valid_voxels: usize,
    pub tensor_valid_voxels: usize,
    pub stack_channels: usize,
    pub grid: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_center: Option<[usize; 3]>,
    pub output_grid: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub tool: String,
    pub version: String,
    pub parallel: bool,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub summary: RunSummary,
    /// Output path (relative to the output directory) → SHA-256.
    pub checksums: BTreeMap<String, String>,
}

struct Outputs<'a> {
    root: &'a Path,
    ext: &'static str,
    checksums: BTreeMap<String, String>,
    stages: Vec<StageRecord>,
}

impl Outputs<'_> {
    fn begin(&mut self, name: &str) {
        self.stages.push(StageRecord { name: name.to_string(), outputs: Vec::new() });
    }

    fn file(&mut self, rel: String) -> Result<()> {
        let path = self.root.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.checksums.insert(rel.clone(), hex::encode(Sha256::digest(&bytes)));
        self.stages.last_mut().expect("stage begun").outputs.push(rel);
        Ok(())
    }

    fn save(&mut self, dir: &str, name: &str, v: &Volume) -> Result<()> {
        let rel = if dir.is_empty() { format!("{name}{}", self.ext) } else { format!("{dir}/{name}{}", self.ext) };
        write_nifti(v, self.root.join(&rel))?;
        self.file(rel)
    }
}

/// Run every stage of `cfg` and write its outputs. Inputs are checked
/// before any computation; a failing stage is reported by name.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunLog> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let root = cfg.output_dir.as_path();
    std::fs::create_dir_all(root.join(INTERMEDIATE_DIR)).map_err(|e| Error::io(root, e))?;
    let mut out = Outputs {
        root,
        ext: if cfg.compress { ".nii.gz" } else { ".nii" },
        checksums: BTreeMap::new(),
        stages: Vec::new(),
    };
    let inter = INTERMEDIATE_DIR;
    let mut products: BTreeMap<String, Volume> = BTreeMap::new();

    out.begin("harmonize");
    let h = (|| {
        let m = read_nifti(&cfg.inputs.mprage)?;
        let f = read_nifti(&cfg.inputs.fgatir)?;
        let bias = match (&cfg.inputs.bias1, &cfg.inputs.bias2) {
            (Some(p1), Some(p2)) => Some((BiasField::new(read_nifti(p1)?)?, BiasField::new(read_nifti(p2)?)?)),
            _ => None,
        };
        let mask = cfg.inputs.brain_mask.as_ref().map(read_nifti).transpose()?;
        let h = harmonize(&m, &f, bias.as_ref().map(|(a, b)| (a, b)), mask.as_ref(), &cfg.harmonize)?;
        Ok::<_, Error>((h, mask))
    })()
    .map_err(|e| e.in_stage("harmonize"))?;
    let (h, brain_mask) = h;
    out.save(inter, "harmonized_mprage", &h.mprage)?;
    out.save(inter, "harmonized_fgatir", &h.fgatir)?;
    out.save(inter, "wm_mask", &h.wm_mask)?;

    out.begin("fit-qmap");
    let q = (|| {
        let acq_m = cfg.acquisition.mprage()?;
        let acq_f = cfg.acquisition.fgatir()?;
        fit_qmaps(&h.mprage, &h.fgatir, acq_m, acq_f, brain_mask.as_ref(), &cfg.fit)
    })()
    .map_err(|e| e.in_stage("fit-qmap"))?;
    out.save(inter, "pd", &q.pd)?;
    out.save(inter, "t1", &q.t1)?;
    out.save(inter, "qmap_valid", &q.valid_mask)?;

    out.begin("synth-ti");
    let multi = synth_multi_ti(&q, &cfg.multi_ti).map_err(|e| e.in_stage("synth-ti"))?;
    out.save(inter, "multi_ti", &multi)?;

    out.begin("dti-fit");
    let (tf, maps) = (|| {
        let dwi = read_nifti(&cfg.inputs.dwi)?;
        let ds = DiffusionSet::new(dwi, read_bvals(&cfg.inputs.bval)?, read_bvecs(&cfg.inputs.bvec)?)?;
        let tf = fit_tensor(&ds, brain_mask.as_ref(), &cfg.dti)?;
        let maps = scalar_maps(&tf)?;
        Ok::<_, Error>((tf, maps))
    })()
    .map_err(|e| e.in_stage("dti-fit"))?;
    out.save(inter, "tensor", &tf.components)?;
    out.save(inter, "tensor_valid", &tf.valid_mask)?;
    for (name, v) in [
        ("fa", &maps.fa),
        ("trace", &maps.trace),
        ("ad", &maps.ad),
        ("rd", &maps.rd),
        ("evals", &maps.evals),
        ("evec1", &maps.evec1),
        ("westin", &maps.westin),
    ] {
        out.save(inter, name, v)?;
    }

    out.begin("knutsson");
    let (k5, edge) = (|| {
        let k5 = knutsson_field(&maps.evec1, Some(&tf.valid_mask))?;
        let smoothed = gaussian_smooth(&k5, cfg.knutsson.presmooth_sigma)?;
        let edge = edge_map(&smoothed)?;
        Ok::<_, Error>((k5, edge))
    })()
    .map_err(|e| e.in_stage("knutsson"))?;
    out.save(inter, "k5", &k5)?;
    out.save(inter, "edge", &edge)?;

    out.begin("assemble");
    for (name, v) in [("pd", q.pd), ("t1", q.t1), ("multi_ti", multi), ("k5", k5), ("edge", edge)] {
        products.insert(name.to_string(), v);
    }
    for (name, v) in [
        ("fa", maps.fa),
        ("trace", maps.trace),
        ("ad", maps.ad),
        ("rd", maps.rd),
        ("evals", maps.evals),
        ("evec1", maps.evec1),
        ("westin", maps.westin),
    ] {
        products.insert(name.to_string(), v);
    }
    products.insert("mprage".into(), h.mprage);
    products.insert("fgatir".into(), h.fgatir);
    let stack = assemble_feature_stack(&cfg.manifest, &products, Path::new("")).map_err(|e| e.in_stage("assemble"))?;
    let grid = stack.volume.dims();

    out.begin("crop");
    let center = cfg.crop.map(|c| c.center.unwrap_or_else(|| grid_midpoint(&stack.volume)));
    let crop = |v: &Volume| -> Result<Volume> {
        match (cfg.crop, center) {
            (Some(c), Some(ctr)) => center_crop(v, c.size, ctr).map_err(|e| e.in_stage("crop")),
            _ => Ok(v.clone()),
        }
    };
    let final_stack = crop(&stack.volume)?;
    for name in ["pd", "t1", "multi_ti", "fa", "trace", "ad", "rd", "evals", "westin", "evec1", "k5", "edge"] {
        out.save("", name, &crop(&products[name])?)?;
    }
    out.save("", "stack", &final_stack)?;
    let sidecar = provenance_path(&root.join(format!("stack{}", out.ext)));
    stack.write_provenance(&sidecar)?;
    out.file(sidecar.file_name().expect("file name").to_string_lossy().into_owned())?;

    let log = RunLog {
        tool: "thalseg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        parallel: cfg!(feature = "parallel"),
        config: cfg.clone(),
        stages: out.stages,
        summary: RunSummary {
            harmonize_scale: h.scale,
            fcm_centroids: h.fcm.centroids.clone(),
            fcm_iterations: h.fcm.iterations,
            qmap_valid_voxels: q.valid_mask.data().iter().filter(|&&v| v != 0.0).count(),
            tensor_valid_voxels: tf.valid_mask.data().iter().filter(|&&v| v != 0.0).count(),
            stack_channels: final_stack.channels(),
            grid,
            crop_center: center,
            output_grid: final_stack.dims(),
        },
        checksums: out.checksums,
    };
    let path = root.join(RUN_LOG);
    let text = serde_json::to_string_pretty(&log).map_err(|e| Error::json("run log", e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(log)
}
