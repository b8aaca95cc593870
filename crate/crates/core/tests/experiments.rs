use std::fs;
use std::path::Path;

use poisson_sgs::experiments::image::write_raw_f32;
use poisson_sgs::experiments::phantom::checksum;
use poisson_sgs::experiments::run::{build_operator, build_prior, load_truth, run_channel, simulate};
use poisson_sgs::experiments::{run_experiment, shepp_logan_phantom, ExperimentConfig, ImageBuffer, RunSummary};

fn quick(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
task = "denoise"
alpha = 40.0
init = "backprojection"

[image]
phantom = 32

[prior]
kind = "tv"
beta = 3.0
epsilon = 0.01

[sampler]
rho = 0.01
gamma_step = 1e-4
n_mc = 400
n_bi = 100
thin = 5
seed = 11
trace_pixels = [528]

[output]
checkpoint = true
"#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn phantom_matches_golden_checksum() {
    let golden = include_str!("golden/phantom_128.fnv1a").trim();
    let p = shepp_logan_phantom(128).unwrap();
    assert_eq!(format!("{:016x}", checksum(&p.data)), golden);
}

#[test]
fn reruns_are_bytewise_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_experiment(&quick(a.path())).unwrap();
    run_experiment(&quick(b.path())).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert!(fa.len() >= 10);
    // The resolved config carries the output directory, which differs.
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<_> { v.into_iter().filter(|(n, _)| n != "config.resolved.toml").collect() };
    assert_eq!(strip(fa), strip(fb));
    assert!(first.summary.coverage_available);
}

#[test]
fn summary_json_and_resolved_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path());
    run_experiment(&cfg).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    let summary: RunSummary = serde_json::from_value(json).unwrap();
    for name in &summary.artifacts {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let again = ExperimentConfig::load(dir.path().join("config.resolved.toml")).unwrap();
    assert_eq!(again, cfg);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("task,alpha,seed,channels,psnr_db,ssim,peak,lpips,"));
}

#[test]
fn delta_kernel_deblur_equals_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let denoise = quick(dir.path());
    let mut deblur = denoise.clone();
    deblur.set("task", "deblur").unwrap();
    deblur.operator.kernel_size = 1;
    deblur.operator.kernel_sigma = 1.0;
    let a = simulate(&denoise).unwrap();
    let b = simulate(&deblur).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.std, b.std);
}

#[test]
fn channels_are_independent_chains() {
    let dir = tempfile::tempdir().unwrap();
    let p = shepp_logan_phantom(32).unwrap();
    let planes = vec![p.data.clone(), p.data.iter().map(|v| 0.5 * v).collect(), vec![0.2; 1024]];
    let img = ImageBuffer::from_channels(32, 32, &planes).unwrap();
    let path = dir.path().join("rgb.ppm");
    poisson_sgs::experiments::image::write_pnm(&path, &img, 16, 0.0, 1.0).unwrap();

    let mut cfg = quick(&dir.path().join("out"));
    cfg.image.phantom = None;
    cfg.image.path = Some(path);
    cfg.sampler.n_mc = 150;
    cfg.sampler.n_bi = 50;
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.summary.channels, 3);
    assert!(dir.path().join("out/posterior_mean.ppm").exists());
    assert!(dir.path().join("out/posterior_mean_ch2.raw").exists());

    let truth = load_truth(&cfg).unwrap();
    let op = build_operator(&cfg, 32, 32).unwrap();
    let prior = build_prior(&cfg.prior, 32, 32).unwrap();
    for c in 0..3 {
        let single = run_channel(&cfg, op.clone(), prior.as_ref(), truth.channel(c), c).unwrap();
        assert_eq!(single.summary.mean, out.channels[c].summary.mean);
        assert_eq!(out.mean.channel(c), &single.summary.mean[..]);
    }
}

#[test]
fn constant_image_flat_prior_recovers_intensity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.raw");
    write_raw_f32(&path, 32, 32, &vec![1.0; 1024]).unwrap();
    let mut cfg = ExperimentConfig::from_toml_str(
        r#"
task = "denoise"
alpha = 40.0
[image]
path = "unused"
[prior]
kind = "flat"
[sampler]
rho = 0.5
gamma_step = 1e-3
n_mc = 2000
n_bi = 500
thin = 10
seed = 5
"#,
    )
    .unwrap();
    cfg.image.path = Some(path);
    cfg.out_dir = dir.path().join("out");
    let out = run_experiment(&cfg).unwrap();
    let mean = out.mean.data.iter().sum::<f64>() / 1024.0;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    let worst = out.mean.data.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    // Per-pixel posterior sd is about 1/sqrt(40).
    assert!(worst < 6.0 / 40f64.sqrt(), "{worst}");
}

#[test]
fn presets_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(dir.path());
    cfg.sampler.n_bi = cfg.sampler.n_mc;
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
