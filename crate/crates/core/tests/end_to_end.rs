use thalseg_core::nifti::{read_nifti, write_nifti};
use thalseg_core::phantom::{generate_phantom, PhantomSpec};
use thalseg_core::pipeline::{run_pipeline, CropConfig, PipelineConfig};

#[test]
fn default_crop_on_a_full_size_subject() {
    let dir = tempfile::tempdir().unwrap();
    let subj = dir.path().join("subj");
    let mut spec = PhantomSpec::demo([100, 100, 100], 11);
    spec.noise = 0.01;
    generate_phantom(&spec).unwrap().write(&subj).unwrap();

    let out = dir.path().join("out");
    let mut cfg = PipelineConfig::for_phantom(&subj, &out);
    cfg.crop = Some(CropConfig { size: [96, 96, 96], center: Some([50, 50, 50]) });
    cfg.compress = false;
    let log = run_pipeline(&cfg).unwrap();
    assert_eq!(log.summary.output_grid, [96, 96, 96]);

    for (name, channels) in [
        ("pd", 1),
        ("t1", 1),
        ("multi_ti", 51),
        ("fa", 1),
        ("trace", 1),
        ("ad", 1),
        ("rd", 1),
        ("evals", 3),
        ("westin", 3),
        ("k5", 5),
        ("edge", 1),
        ("stack", 68),
    ] {
        let v = read_nifti(out.join(format!("{name}.nii"))).unwrap();
        assert_eq!((v.dims(), v.channels()), ([96, 96, 96], channels), "{name}");
    }
}

#[test]
fn stack_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let subj = dir.path().join("subj");
    generate_phantom(&PhantomSpec::demo([14, 14, 14], 3)).unwrap().write(&subj).unwrap();
    let mut cfg = PipelineConfig::for_phantom(&subj, &dir.path().join("out"));
    cfg.crop = None;
    run_pipeline(&cfg).unwrap();

    let stack = read_nifti(dir.path().join("out/stack.nii.gz")).unwrap();
    assert_eq!((stack.dims(), stack.channels()), ([14, 14, 14], 68));
    let copy = dir.path().join("copy.nii");
    write_nifti(&stack, &copy).unwrap();
    let back = read_nifti(&copy).unwrap();
    assert_eq!(back.dims(), stack.dims());
    assert_eq!(back.channels(), 68);
    assert_eq!(back.data(), stack.data());
    assert_eq!(back.affine(), stack.affine());
}
