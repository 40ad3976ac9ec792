use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thalseg_core::dti::{fit_tensor, read_bvals, read_bvecs, scalar_maps, DiffusionSet, DtiOptions};
use thalseg_core::harmonize::{harmonize, BiasField, FcmOptions, HarmonizeOptions};
use thalseg_core::knutsson::{edge_map, gaussian_smooth, knutsson_field};
use thalseg_core::labels::{load_mapping_file, remap, validate_mapping, LabelScheme, LabelVolume, UnificationMap};
use thalseg_core::metrics::{evaluate, masked_soft_tpr_loss, onehot, DEFAULT_EPS};
use thalseg_core::nifti::{read_nifti, write_nifti};
use thalseg_core::phantom::{generate_phantom, PhantomSpec};
use thalseg_core::pipeline::{run_pipeline, PipelineConfig};
use thalseg_core::qmri::{fit_qmaps, synth_multi_ti, synth_ti, AcquisitionPair, FitOptions, MultiTiSpec, QMaps};
use thalseg_core::stack::{assemble_feature_stack, provenance_path, StackManifest};
use thalseg_core::volume::{center_crop, grid_midpoint, Volume};
use thalseg_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "thalseg", version, about = "Multimodal MRI feature pipeline for thalamic nuclei segmentation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct AcqArgs {
    #[arg(long, default_value_t = 4000.0)]
    tr: f64,
    #[arg(long, default_value_t = 1400.0)]
    ti_mprage: f64,
    #[arg(long, default_value_t = 400.0)]
    ti_fgatir: f64,
}

impl AcqArgs {
    fn pair(self) -> AcquisitionPair {
        AcquisitionPair { tr: self.tr, ti_mprage: self.ti_mprage, ti_fgatir: self.ti_fgatir }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Shared bias correction and white-matter normalization of an MPRAGE/FGATIR pair.
    Harmonize {
        #[arg(long)]
        mprage: PathBuf,
        #[arg(long)]
        fgatir: PathBuf,
        #[arg(long, requires = "bias2")]
        bias1: Option<PathBuf>,
        #[arg(long, requires = "bias1")]
        bias2: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2.0)]
        fuzziness: f64,
        #[arg(long, default_value_t = 0.5)]
        wm_threshold: f64,
        #[arg(long, default_value_t = 1000.0)]
        target: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Voxelwise PD and T1 maps from a harmonized pair.
    FitQmap {
        #[arg(long)]
        mprage: PathBuf,
        #[arg(long)]
        fgatir: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        acq: AcqArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Synthesize inversion-recovery images from PD/T1 maps.
    SynthTi {
        #[arg(long)]
        pd: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long, default_value_t = 4000.0)]
        tr: f64,
        /// Single inversion time; otherwise the sweep below.
        #[arg(long)]
        ti: Option<f64>,
        #[arg(long, default_value_t = 400.0)]
        ti_start: f64,
        #[arg(long, default_value_t = 1400.0)]
        ti_end: f64,
        #[arg(long, default_value_t = 20.0)]
        ti_step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tensor fit and scalar maps.
    DtiFit {
        #[arg(long)]
        dwi: PathBuf,
        #[arg(long)]
        bval: PathBuf,
        #[arg(long)]
        bvec: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        max_b: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// 5D orientation field and its edge map from a principal-eigenvector volume.
    Knutsson {
        #[arg(long)]
        evec1: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        presmooth_sigma: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Assemble a feature stack from a manifest of NIfTI files.
    Stack {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory that relative sources are read from (default: the manifest's).
        #[arg(long)]
        base_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-size crop around a voxel (default: grid midpoint).
    Crop {
        #[arg(long)]
        input: PathBuf,
        /// Box size as `x,y,z`.
        #[arg(long, value_parser = parse_triple, default_value = "96,96,96")]
        size: [usize; 3],
        /// Box center as `x,y,z` voxel indices.
        #[arg(long, value_parser = parse_triple)]
        center: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate a label volume into another scheme.
    RemapLabels {
        #[arg(long)]
        input: PathBuf,
        /// Built-in `ratnus13_to_unified7` or a mapping JSON file.
        #[arg(long, default_value = "ratnus13_to_unified7")]
        mapping: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class TPR and Dice against sparse ground truth, as JSON.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Built-in scheme name or scheme JSON file.
        #[arg(long, default_value = "ratnus13")]
        scheme: String,
        /// Class-probability volume (one channel per scheme entry) for the masked soft-TPR loss.
        #[arg(long)]
        probs: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value = "subject")]
        subject: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic subject.
    Phantom {
        #[arg(long, conflicts_with = "demo")]
        spec: Option<PathBuf>,
        /// Built-in layout on an N³ grid.
        #[arg(long)]
        demo: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_opt(p: &Option<PathBuf>) -> Result<Option<Volume>> {
    p.as_ref().map(read_nifti).transpose()
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("output", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn save_all(dir: &Path, items: &[(&str, &Volume)]) -> Result<()> {
    mkdir(dir)?;
    for (name, v) in items {
        write_nifti(v, dir.join(format!("{name}.nii.gz")))?;
    }
    Ok(())
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| format!("expected three comma-separated integers, got `{s}`"))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Harmonize { mprage, fgatir, bias1, bias2, mask, classes, fuzziness, wm_threshold, target, out_dir } => {
            let m = read_nifti(&mprage)?;
            let f = read_nifti(&fgatir)?;
            let bias = match (bias1, bias2) {
                (Some(a), Some(b)) => Some((BiasField::new(read_nifti(a)?)?, BiasField::new(read_nifti(b)?)?)),
                _ => None,
            };
            let opts = HarmonizeOptions {
                fcm: FcmOptions { classes, fuzziness, ..FcmOptions::default() },
                wm_threshold,
                target,
            };
            let mask = read_opt(&mask)?;
            let h = harmonize(&m, &f, bias.as_ref().map(|(a, b)| (a, b)), mask.as_ref(), &opts)?;
            save_all(&out_dir, &[("harmonized_mprage", &h.mprage), ("harmonized_fgatir", &h.fgatir), ("wm_mask", &h.wm_mask)])?;
            write_json(
                &out_dir.join("harmonize.json"),
                &json!({
                    "scale": h.scale,
                    "centroids": h.fcm.centroids,
                    "iterations": h.fcm.iterations,
                    "objective_history": h.fcm.objective_history,
                }),
            )
        }
        Command::FitQmap { mprage, fgatir, mask, acq, out_dir } => {
            let pair = acq.pair();
            pair.validate()?;
            let q = fit_qmaps(
                &read_nifti(&mprage)?,
                &read_nifti(&fgatir)?,
                pair.mprage()?,
                pair.fgatir()?,
                read_opt(&mask)?.as_ref(),
                &FitOptions::default(),
            )?;
            save_all(&out_dir, &[("pd", &q.pd), ("t1", &q.t1), ("qmap_valid", &q.valid_mask)])
        }
        Command::SynthTi { pd, t1, tr, ti, ti_start, ti_end, ti_step, out } => {
            let q = QMaps::from_volumes(read_nifti(&pd)?, read_nifti(&t1)?, tr)?;
            let v = match ti {
                Some(ti) => synth_ti(&q, ti)?,
                None => synth_multi_ti(&q, &MultiTiSpec { ti_start, ti_end, ti_step })?,
            };
            write_nifti(&v, &out)
        }
        Command::DtiFit { dwi, bval, bvec, mask, max_b, out_dir } => {
            let ds = DiffusionSet::new(read_nifti(&dwi)?, read_bvals(&bval)?, read_bvecs(&bvec)?)?;
            let tf = fit_tensor(&ds, read_opt(&mask)?.as_ref(), &DtiOptions { max_b })?;
            let m = scalar_maps(&tf)?;
            save_all(
                &out_dir,
                &[
                    ("tensor", &tf.components),
                    ("tensor_valid", &tf.valid_mask),
                    ("fa", &m.fa),
                    ("trace", &m.trace),
                    ("ad", &m.ad),
                    ("rd", &m.rd),
                    ("evals", &m.evals),
                    ("evec1", &m.evec1),
                    ("westin", &m.westin),
                ],
            )
        }
        Command::Knutsson { evec1, mask, presmooth_sigma, out_dir } => {
            if !(presmooth_sigma >= 0.0) {
                return Err(Error::Parameter("presmooth sigma must be >= 0".into()));
            }
            let k5 = knutsson_field(&read_nifti(&evec1)?, read_opt(&mask)?.as_ref())?;
            let edge = edge_map(&gaussian_smooth(&k5, presmooth_sigma)?)?;
            save_all(&out_dir, &[("k5", &k5), ("edge", &edge)])
        }
        Command::Stack { manifest, base_dir, out } => {
            let m = StackManifest::load(&manifest)?;
            let base = base_dir.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new("")).to_path_buf());
            let s = assemble_feature_stack(&m, &Default::default(), &base)?;
            write_nifti(&s.volume, &out)?;
            s.write_provenance(provenance_path(&out))
        }
        Command::Crop { input, size, center, out } => {
            let v = read_nifti(&input)?;
            let center = center.unwrap_or_else(|| grid_midpoint(&v));
            write_nifti(&center_crop(&v, size, center)?, &out)
        }
        Command::RemapLabels { input, mapping, out } => {
            let um = match mapping.as_str() {
                "ratnus13_to_unified7" => UnificationMap::ratnus13_to_unified7(),
                path => load_mapping_file(path)?,
            };
            if let (Some(src), Some(tgt)) = (LabelScheme::builtin(&um.source), LabelScheme::builtin(&um.target)) {
                let report = validate_mapping(&um, &src, &tgt);
                if !report.is_complete() {
                    log::warn!("mapping {} -> {} is incomplete: {report:?}", um.source, um.target);
                }
            }
            let lv = LabelVolume::new(read_nifti(&input)?, um.source.clone())?;
            write_nifti(&remap(&lv, &um)?.volume, &out)
        }
        Command::Evaluate { pred, gt, scheme, probs, eps, subject, out } => {
            let scheme = LabelScheme::resolve(&scheme)?;
            let gt = LabelVolume::new(read_nifti(&gt)?, scheme.name.clone())?;
            let pred = LabelVolume::new(read_nifti(&pred)?, scheme.name.clone())?;
            let mut report = evaluate(&pred, &gt, &scheme, &subject)?;
            if let Some(p) = probs {
                report.soft_tpr_loss = Some(masked_soft_tpr_loss(&read_nifti(&p)?, &onehot(&gt, &scheme)?, eps)?);
            }
            let value = serde_json::to_value(&report).map_err(|e| Error::json("report", e))?;
            match out {
                Some(path) => write_json(&path, &value),
                None => {
                    println!("{}", serde_json::to_string_pretty(&value).map_err(|e| Error::json("report", e))?);
                    Ok(())
                }
            }
        }
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let log = run_pipeline(&cfg)?;
            log::info!("wrote {} files to {}", log.checksums.len(), cfg.output_dir.display());
            Ok(())
        }
        Command::Phantom { spec, demo, seed, out } => {
            let spec = match (spec, demo) {
                (Some(p), _) => PhantomSpec::load(p)?,
                (None, Some(n)) => PhantomSpec::demo([n; 3], seed),
                (None, None) => return Err(Error::Parameter("give --spec or --demo".into())),
            };
            generate_phantom(&spec)?.write(&out)?;
            let mut cfg = PipelineConfig::for_phantom(Path::new(""), Path::new("run"));
            if spec.dims.iter().any(|&d| d < 96) {
                cfg.crop = None;
            }
            let value = serde_json::to_value(&cfg).map_err(|e| Error::json("pipeline config", e))?;
            write_json(&out.join("pipeline.json"), &value)?;
            let value = serde_json::to_value(&spec).map_err(|e| Error::json("phantom spec", e))?;
            write_json(&out.join("phantom.json"), &value)
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
        #[cfg(not(feature = "parallel"))]
        log::warn!("built without the parallel feature; ignoring --threads {n}");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
