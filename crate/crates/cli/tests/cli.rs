//! End-to-end tests of the `remapsr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use remapsr::datasets::{read_png, synth_corpus, write_png};
use remapsr::models::{Model, ModelConfig};
use remapsr::rng::mix_seed;
use remapsr::tensor::Shape;
use remapsr::trainer::{load_model, Checkpoint, TrainConfig, Trainer};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_remapsr"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("remapsr-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_corpus(dir: &Path, n: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    for rec in synth_corpus(n, 64, seed).unwrap() {
        write_png(&dir.join(format!("{}.png", rec.id)), &rec.pixels).unwrap();
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const BASE_CONFIG: &str = r#"
[corpus]
synth = { n = 2, size = 64, seed = 5 }

[degradations.lowres2]
steps = [{ type = "bicubic_down", scale = 2 }]

[degradations.lowres4]
steps = [{ type = "bicubic_down", scale = 4 }]

[degradations.blurry]
steps = [
    { type = "blur", size = 9 },
    { type = "noise", psnr_db = 40.0, seed = 3 },
]

[models.sr2]
n_groups = 1
n_blocks_per_group = 1
channels = 8
reduction = 2
scale = 2

[models.same]
n_groups = 1
n_blocks_per_group = 1
channels = 8
reduction = 2
scale = 1

[training]
total_iters = 4
batch_size = 1
patch_size = 12
seed = 9
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, BASE_CONFIG).unwrap();
    path
}

#[test]
fn degrade_identity_matches_input_up_to_quantization() {
    let dir = workdir("degrade-id");
    let src = dir.join("src");
    write_corpus(&src, 2, 1);
    let cfg = write_config(&dir);
    let out = dir.join("out");
    assert_ok(&bin()
        .args(["degrade", "--spec", "identity"])
        .arg("--config").arg(&cfg)
        .arg("--in").arg(&src)
        .arg("--out").arg(&out)
        .output()
        .unwrap());
    for name in ["synth-0000.png", "synth-0001.png"] {
        let a = read_png(&src.join(name)).unwrap();
        let b = read_png(&out.join(name)).unwrap();
        let max = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0f32, f32::max);
        assert!(max <= 1.0 / 510.0 + 1e-7, "{name}: {max}");
    }
    assert!(out.join("manifest.tsv").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn degrade_down4_produces_16px_outputs_and_is_deterministic() {
    let dir = workdir("degrade-d4");
    let src = dir.join("src");
    write_corpus(&src, 1, 2);
    let cfg = write_config(&dir);
    let (out_a, out_b) = (dir.join("a"), dir.join("b"));
    for out in [&out_a, &out_b] {
        assert_ok(&bin()
            .args(["degrade", "--spec", "lowres4"])
            .arg("--config").arg(&cfg)
            .arg("--in").arg(&src)
            .arg("--out").arg(out)
            .output()
            .unwrap());
    }
    let img = read_png(&out_a.join("synth-0000.png")).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 16, 16));
    // byte-identical across reruns (blur+noise path included below)
    for out in [&out_a, &out_b] {
        assert_ok(&bin()
            .args(["degrade", "--spec", "blurry"])
            .arg("--config").arg(&cfg)
            .arg("--in").arg(&src)
            .arg("--out").arg(out)
            .output()
            .unwrap());
    }
    let bytes_a = fs::read(out_a.join("synth-0000.png")).unwrap();
    let bytes_b = fs::read(out_b.join("synth-0000.png")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn missing_spec_name_lists_available_names() {
    let dir = workdir("badspec");
    let cfg = write_config(&dir);
    let out = bin()
        .args(["degrade", "--spec", "nope"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lowres2") && err.contains("blurry"), "{err}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_config_key_exits_with_config_error_before_side_effects() {
    let dir = workdir("strict");
    let path = dir.join("bad.toml");
    fs::write(&path, format!("{BASE_CONFIG}\nsurprise = 1\n")).unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["degrade", "--spec", "identity"])
        .arg("--config").arg(&path)
        .arg("--out").arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists(), "no side effects on config error");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn train_zero_iters_writes_fresh_checkpoint() {
    let dir = workdir("train0");
    let cfg = write_config(&dir);
    let (ck_a, ck_b) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    for ck in [&ck_a, &ck_b] {
        assert_ok(&bin()
            .args(["train", "--model", "same", "--input-spec", "blurry", "--iters", "0"])
            .arg("--config").arg(&cfg)
            .arg("--out").arg(ck)
            .output()
            .unwrap());
    }
    assert_eq!(fs::read(&ck_a).unwrap(), fs::read(&ck_b).unwrap());
    let loaded = Checkpoint::load(&ck_a).unwrap();
    assert_eq!(loaded.iteration, 0);
    // parameters equal a fresh deterministic build
    let model = load_model(&loaded).unwrap();
    let mut mcfg = ModelConfig::desk(1);
    mcfg.n_groups = 1;
    mcfg.n_blocks_per_group = 1;
    mcfg.channels = 8;
    mcfg.reduction = 2;
    let fresh = Model::<f32>::build(&mcfg, mix_seed(9, 1)).unwrap();
    assert!(model.params_bit_eq(&fresh));
    // and the digest matches what the trainer would produce
    let trainer = Trainer::new(fresh, {
        let mut t = TrainConfig::desk(0).with_seed(9).with_batch(1).with_patch(12);
        t.halve_every = 1;
        t
    })
    .unwrap();
    assert_eq!(trainer.checkpoint().digest(), loaded.digest());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sr_upscales_16px_input_to_32px_png() {
    let dir = workdir("sr");
    let cfg = write_config(&dir);
    let ck = dir.join("sr2.ckpt");
    assert_ok(&bin()
        .args(["train", "--model", "sr2", "--input-spec", "lowres2", "--iters", "2"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&ck)
        .output()
        .unwrap());

    // a 16x16 input
    let lr_dir = dir.join("lr");
    fs::create_dir_all(&lr_dir).unwrap();
    let tiny = remapsr::degradation::resample_bicubic(
        &synth_corpus(1, 64, 7).unwrap()[0].pixels,
        0.25,
        true,
    )
    .unwrap();
    write_png(&lr_dir.join("img.png"), &tiny).unwrap();

    let out = dir.join("up");
    assert_ok(&bin()
        .arg("sr")
        .arg("--checkpoint").arg(&ck)
        .arg("--in").arg(&lr_dir)
        .arg("--out").arg(&out)
        .output()
        .unwrap());
    let up = read_png(&out.join("img.png")).unwrap();
    assert_eq!(up.shape(), Shape::new(1, 3, 32, 32));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn restore_rejects_non_unit_scale_chain() {
    let dir = workdir("restore-bad");
    let cfg = write_config(&dir);
    let ck = dir.join("sr2.ckpt");
    assert_ok(&bin()
        .args(["train", "--model", "sr2", "--input-spec", "lowres2", "--iters", "0"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&ck)
        .output()
        .unwrap());
    let out = bin()
        .arg("restore")
        .arg("--checkpoint").arg(&ck)
        .arg("--in").arg(&dir)
        .arg("--out").arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn eval_identical_dirs_reports_inf_and_unit_ssim() {
    let dir = workdir("eval");
    let imgs = dir.join("imgs");
    write_corpus(&imgs, 2, 8);
    let csv = dir.join("report.csv");
    let out = bin()
        .arg("eval")
        .arg("--reference").arg(&imgs)
        .arg("--test").arg(&imgs)
        .arg("--out").arg(&csv)
        .output()
        .unwrap();
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PSNR inf"), "{stdout}");
    assert!(stdout.contains("SSIM 1.000000"), "{stdout}");
    let body = fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("image_id,psnr_db,ssim\n"));
    assert!(body.contains(",inf,"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn map_trains_a_scale2_mapping_between_specs() {
    let dir = workdir("map");
    let cfg = write_config(&dir);
    let ck = dir.join("map.ckpt");
    assert_ok(&bin()
        .args(["map", "--from-spec", "lowres4", "--to-spec", "lowres2", "--iters", "2"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(&ck)
        .output()
        .unwrap());
    let model = load_model(&Checkpoint::load(&ck).unwrap()).unwrap();
    assert_eq!(model.scale(), 2);
    fs::remove_dir_all(&dir).unwrap();
}

const EXPERIMENT_CONFIG: &str = r#"
[corpus]
synth = { n = 6, size = 64, seed = 14 }
train_fraction = 0.67

[models.stage]
n_groups = 1
n_blocks_per_group = 1
channels = 8
reduction = 2
scale = 1

[training]
total_iters = 30
batch_size = 2
patch_size = 16

[experiment]
seed = 15
model = "stage"
branches = [
    "restore_mapped:7:9",
    "restore_direct:7",
    "restore_mapped_specialized:7:9",
    "restore_direct:9",
]
"#;

#[test]
fn experiment_emits_table_columns_and_identical_csv_on_rerun() {
    let dir = workdir("exp");
    let cfg_path = dir.join("exp.toml");
    fs::write(&cfg_path, EXPERIMENT_CONFIG).unwrap();
    let (run_a, run_b) = (dir.join("run-a"), dir.join("run-b"));
    for out in [&run_a, &run_b] {
        assert_ok(&bin()
            .arg("experiment")
            .arg("--config").arg(&cfg_path)
            .arg("--out").arg(out)
            .output()
            .unwrap());
    }
    let summary = fs::read_to_string(run_a.join("summary.md")).unwrap();
    for column in ["7Mapped9", "7x7", "7Mapped9*", "9x9"] {
        assert!(summary.contains(column), "missing column {column}:\n{summary}");
    }
    // one CSV per condition, byte-identical across reruns
    for name in [
        "7Mapped9__corpus-a.csv",
        "7x7__corpus-a.csv",
        "7Mapped9s__corpus-a.csv",
        "9x9__corpus-a.csv",
    ] {
        let a = fs::read(run_a.join(name)).unwrap();
        let b = fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    // model registry directory with manifest
    assert!(run_a.join("models/manifest.tsv").exists());
    assert!(run_a.join("models/restorer_9.ckpt").exists());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn experiment_help_enumerates_every_branch() {
    let out = bin().args(["experiment", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for (name, _) in remapsr::pipeline::BRANCH_HELP {
        assert!(text.contains(name), "help missing {name}:\n{text}");
    }
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = bin()
        .args(["experiment", "--preset", "nope", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fig3-desk") && err.contains("table3-desk"), "{err}");
}
