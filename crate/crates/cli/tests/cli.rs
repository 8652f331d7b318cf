use std::fs;
use std::path::Path;

use assert_cmd::Command;
use odemri::data::{load_dataset, read_tensor_file};
use odemri::mri::{forward_e, zero_filled};
use odemri::{Model, ModelSpec};

fn odemri() -> Command {
    let mut cmd = Command::cargo_bin("odemri").unwrap();
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn gen(dir: &Path, count: usize, size: usize, noise: f64, seed: u64) {
    odemri()
        .args(["gen-data", "--out"])
        .arg(dir)
        .args(["--count", &count.to_string(), "--size", &size.to_string(), "--af", "4"])
        .args(["--noise", &noise.to_string(), "--seed", &seed.to_string()])
        .assert()
        .success();
}

fn stdout(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_data_writes_manifest_and_tensors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10, 32, 0.0, 1);
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let tensors = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".nodt")).count();
    assert_eq!(tensors, 30);
    for s in load_dataset(dir.path()).unwrap() {
        assert_eq!(s.kspace, forward_e(&s.truth, &s.mask).unwrap());
    }
}

#[test]
fn gen_data_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), 4, 32, 0.02, 9);
    gen(b.path(), 4, 32, 0.02, 9);
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn gen_data_reports_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = odemri().args(["gen-data", "--count", "1", "--size", "32", "--out"]).arg(file.join("sub")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plain"));
}

#[test]
fn usage_errors_exit_with_configuration_code() {
    let out = odemri().args(["gen-data", "--out", "x", "--bogus", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = odemri().args(["gen-data", "--out", "x", "--af", "6"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_archives_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 6, 32, 0.0, 2);
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "family = ft_euler\nepochs = 1\nbatch_size = 2\n").unwrap();
    let out_dir = dir.path().join("run");
    odemri().args(["train", "--data"]).arg(&data).arg("--config").arg(&cfg).arg("--out").arg(&out_dir).assert().success();
    assert!(out_dir.join("best.params").exists());
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,val_psnr,val_ssim,seconds,peak_bytes");
    assert_eq!(csv.lines().count(), 2);
    let model = Model::load(&out_dir.join("best.params")).unwrap();
    assert_eq!(model.spec, ModelSpec::parse("ft_euler").unwrap());
}

#[test]
fn checkpointed_training_logs_lower_peak_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 5, 32, 0.0, 3);
    let mut peaks = Vec::new();
    for ckpt in [false, true] {
        let cfg = dir.path().join(format!("c{ckpt}.cfg"));
        fs::write(&cfg, format!("family = lt_rk4\nepochs = 1\nbatch_size = 2\ncheckpoint = {ckpt}\n")).unwrap();
        let out_dir = dir.path().join(format!("run{ckpt}"));
        odemri().args(["train", "--data"]).arg(&data).arg("--config").arg(&cfg).arg("--out").arg(&out_dir).assert().success();
        let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        let row: Vec<String> = csv.lines().nth(1).unwrap().split(',').map(String::from).collect();
        peaks.push((row[1].clone(), row[5].parse::<u64>().unwrap()));
    }
    assert_eq!(peaks[0].0, peaks[1].0, "checkpointing changed the logged loss");
    assert!(peaks[1].1 < peaks[0].1, "{peaks:?}");
}

#[test]
fn train_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 5, 32, 0.0, 4);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nfamily = ft_rk3\n").unwrap();
    let out = odemri().args(["train", "--data"]).arg(&data).arg("--config").arg(&cfg).args(["--out", "unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("line 2"), "{err}");
    for name in ["ft_euler", "fa_rk4", "lt_rk2"] {
        assert!(err.contains(name), "{err}");
    }
    fs::write(&cfg, "epochs = many\n").unwrap();
    let out = odemri().args(["train", "--data"]).arg(&data).arg("--config").arg(&cfg).args(["--out", "unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn train_on_missing_data_is_an_io_error() {
    let out = odemri().args(["train", "--data", "/nonexistent/data", "--out", "unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reconstruct_with_zero_parameters_gives_zero_filled() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 2, 32, 0.01, 5);
    let mut model = Model::init(ModelSpec::parse("lt_rk2").unwrap(), 0).unwrap();
    model.params.values_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let archive = dir.path().join("zero.params");
    model.save(&archive).unwrap();

    let run = |out: &Path| {
        odemri()
            .arg("reconstruct")
            .arg("--input")
            .arg(data.join("ksp_0001.nodt"))
            .arg("--mask")
            .arg(data.join("mask_0001.nodt"))
            .arg("--model")
            .arg(&archive)
            .arg("--out")
            .arg(out)
            .arg("--truth")
            .arg(data.join("img_0001.nodt"))
            .output()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a.nodt"), dir.path().join("b.nodt"));
    let out = run(&a);
    assert!(out.status.success());
    assert!(stdout(&out).contains("PSNR"));
    assert!(run(&b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let sample = &load_dataset(&data).unwrap()[1];
    let zf = zero_filled(&sample.kspace, &sample.mask).unwrap();
    let got = read_tensor_file(&a).unwrap();
    for (x, y) in got.data().iter().zip(zf.to_tensor().data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn reconstruct_rejects_mismatched_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (d32, d64) = (dir.path().join("d32"), dir.path().join("d64"));
    gen(&d32, 1, 32, 0.0, 6);
    gen(&d64, 1, 64, 0.0, 6);
    let archive = dir.path().join("m.params");
    Model::init(ModelSpec::parse("ft_euler").unwrap(), 0).unwrap().save(&archive).unwrap();
    let out = odemri()
        .arg("reconstruct")
        .arg("--input")
        .arg(d32.join("ksp_0000.nodt"))
        .arg("--mask")
        .arg(d64.join("mask_0000.nodt"))
        .arg("--model")
        .arg(&archive)
        .arg("--out")
        .arg(dir.path().join("o.nodt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_is_read_only_and_checks_the_family() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 3, 32, 0.0, 7);
    let archive = dir.path().join("m.params");
    Model::init(ModelSpec::parse("ft_rk4").unwrap(), 2).unwrap().save(&archive).unwrap();
    let eval = |out: &Path, family: &str| {
        odemri().args(["eval", "--data"]).arg(&data).arg("--model").arg(&archive).args(["--family", family]).arg("--out").arg(out).output().unwrap()
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(eval(&a, "ft_rk4").status.success());
    assert!(eval(&b, "ft_rk4").status.success());
    let report = fs::read_to_string(&a).unwrap();
    assert_eq!(report, fs::read_to_string(&b).unwrap());
    assert!(report.starts_with("id,psnr,ssim\n"));
    assert!(report.lines().last().unwrap().starts_with("MEAN,"));
    assert_eq!(eval(&a, "lt_rk4").status.code(), Some(1));

    let zf = dir.path().join("zf.csv");
    odemri().args(["eval", "--zero-filled", "--data"]).arg(&data).arg("--out").arg(&zf).assert().success();
}

#[test]
fn solver_bench_prints_orders_and_zero_rows() {
    let out = odemri().args(["solver-bench", "--ode", "exp_decay", "--steps", "4,8,16,32"]).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    let rk4_32: f64 = text
        .lines()
        .find(|l| l.starts_with("rk4") && l.split_whitespace().nth(1) == Some("32"))
        .and_then(|l| l.split_whitespace().nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(rk4_32 < 1e-8);
    let zero = text.split("zero dynamics:").nth(1).unwrap();
    let errors: Vec<f64> = zero.lines().skip(2).filter_map(|l| l.split_whitespace().nth(2)?.parse().ok()).collect();
    assert_eq!(errors.len(), 12);
    assert!(errors.iter().all(|&e| e == 0.0));

    assert_eq!(odemri().args(["solver-bench", "--ode", "logistic"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_rejects_large_sizes() {
    for family in ["ft_rk2", "lt_euler", "fa_rk4"] {
        let out = odemri().args(["gradcheck", "--family", family, "--size", "8", "--seed", "1"]).output().unwrap();
        assert!(out.status.success(), "{family}: {}", stdout(&out));
        assert!(stdout(&out).contains("PASS"));
        if family == "fa_rk4" {
            assert_eq!(stdout(&out).matches("adjoint gap").count(), 3);
        }
    }
    let out = odemri().args(["gradcheck", "--family", "ft_euler", "--size", "32"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
