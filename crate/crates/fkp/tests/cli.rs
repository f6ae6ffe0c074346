use std::fs;
use std::path::Path;
use std::process::Command;

use fkp::formats::{read_kernel, read_pnm, write_kernel, write_pnm};
use fkp_core::{Image, Kernel};

fn fkp(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fkp")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = fkp(args);
    assert_eq!(code, 0, "fkp {args:?} failed: {stderr}");
    stdout
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// A short training run shared by the tests that need a model.
fn small_model(dir: &Path) -> String {
    let model = p(dir, "m.fkp");
    ok(&["train", "--scale", "2", "--iters", "30", "--batch", "8", "--lr", "1e-3", "--seed", "5", "--out", &model]);
    model
}

#[test]
fn train_is_reproducible_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_model(dir.path());
    let b = p(dir.path(), "again.fkp");
    ok(&["train", "--config", &p(dir.path(), "m.conf"), "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let conf = fs::read_to_string(dir.path().join("m.conf")).unwrap();
    assert!(conf.contains("iters=30\n") && conf.contains("lr=0.001\n"), "{conf}");
    let log = fs::read_to_string(dir.path().join("m.log")).unwrap();
    assert!(log.is_empty(), "cadence is 100 iterations");
    let centred = p(dir.path(), "centred.fkp");
    ok(&["train", "--config", &p(dir.path(), "m.conf"), "--shifted", "false", "--out", &centred]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&centred).unwrap());
    assert!(fs::read_to_string(dir.path().join("centred.conf")).unwrap().contains("shifted=false\n"));

    let c = p(dir.path(), "long.fkp");
    ok(&["train", "--iters", "200", "--batch", "4", "--lr", "1e-3", "--out", &c]);
    let log = fs::read_to_string(dir.path().join("long.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("iter=100 nll=") && lines[1].starts_with("iter=200 nll="));
}

#[test]
fn train_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fkp(&["train", "--out", &p(dir.path(), "m"), "--scale", "7"]).0, 2);
    assert_eq!(fkp(&["train", "--iters", "x"]).0, 2);
    assert_eq!(fkp(&["train"]).0, 2);
    let conf = p(dir.path(), "bad.conf");
    fs::write(&conf, "iters=10\nwarp=9\n").unwrap();
    assert_eq!(fkp(&["train", "--config", &conf, "--out", &p(dir.path(), "m")]).0, 2);
}

#[test]
fn sample_writes_kernels_and_sheet() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let a = p(dir.path(), "a");
    ok(&["sample", "--model", &model, "--count", "7", "--seed", "3", "--outdir", &a]);
    for n in 0..7 {
        let k = read_kernel(&fs::read_to_string(dir.path().join(format!("a/kernel_{n:03}.fkpk"))).unwrap()).unwrap();
        assert_eq!(k.side(), 11);
        assert!((k.sum() - 1.0).abs() < 1e-9);
    }
    let sheet = read_pnm(&fs::read(dir.path().join("a/samples.pgm")).unwrap()).unwrap();
    assert_eq!((sheet.height(), sheet.width()), (66, 7 * 66 + 6 * 2));
    let b = p(dir.path(), "b");
    ok(&["sample", "--model", &model, "--count", "7", "--seed", "3", "--outdir", &b]);
    for n in 0..7 {
        let name = format!("kernel_{n:03}.fkpk");
        assert_eq!(fs::read(dir.path().join("a").join(&name)).unwrap(), fs::read(dir.path().join("b").join(&name)).unwrap());
    }
    let empty = p(dir.path(), "none");
    ok(&["sample", "--model", &model, "--count", "0", "--outdir", &empty]);
    let files: Vec<_> = fs::read_dir(&empty).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec!["sample.conf"]);
}

#[test]
fn sample_rejects_bad_model() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.fkp");
    fs::write(&bad, b"FKP0garbage").unwrap();
    assert_eq!(fkp(&["sample", "--model", &bad, "--outdir", &p(dir.path(), "o")]).0, 4);
    assert_eq!(fkp(&["sample", "--model", &p(dir.path(), "missing.fkp"), "--outdir", &p(dir.path(), "o")]).0, 2);
}

#[test]
fn degrade_shapes_kernels_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let hr = p(dir.path(), "hr.pgm");
    ok(&["synth", "--height", "256", "--width", "256", "--seed", "1", "--out", &hr]);
    let lr = p(dir.path(), "lr.pgm");
    ok(&["degrade", "--image", &hr, "--scale", "2", "--sigma1", "1.5", "--sigma2", "0.8", "--angle", "0.3", "--out", &lr]);
    let y = read_pnm(&fs::read(&lr).unwrap()).unwrap();
    assert_eq!((y.height(), y.width()), (128, 128));
    let k = read_kernel(&fs::read_to_string(dir.path().join("lr.fkpk")).unwrap()).unwrap();
    assert_eq!(k.side(), 11);

    let kfile = p(dir.path(), "lr.fkpk");
    let (code, _, err) = fkp(&["degrade", "--image", &hr, "--sigma1", "1", "--kernel", &kfile, "--out", &lr]);
    assert_eq!(code, 2, "{err}");
    assert_eq!(fkp(&["degrade", "--image", &hr, "--out", &lr]).0, 2);

    let noisy = p(dir.path(), "noisy.pgm");
    ok(&["degrade", "--image", &hr, "--kernel", &kfile, "--noise", "0.0392", "--seed", "2", "--out", &noisy]);
    let again = p(dir.path(), "noisy2.pgm");
    ok(&["degrade", "--config", &p(dir.path(), "noisy.conf"), "--out", &again]);
    assert_eq!(fs::read(&noisy).unwrap(), fs::read(&again).unwrap());
    assert_ne!(fs::read(&noisy).unwrap(), fs::read(&lr).unwrap());
}

#[test]
fn delta_kernel_at_scale_one_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let x = Image::from_fn(20, 17, |i, j| ((i * 31 + j * 7) % 256) as f64 / 255.0).unwrap();
    let src = p(dir.path(), "x.pgm");
    fs::write(&src, write_pnm(&x)).unwrap();
    let delta = p(dir.path(), "delta.fkpk");
    fs::write(&delta, write_kernel(&Kernel::delta(7).unwrap())).unwrap();
    let out = p(dir.path(), "y.pgm");
    ok(&["degrade", "--image", &src, "--kernel", &delta, "--scale", "1", "--out", &out]);
    assert_eq!(fs::read(&src).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn estimate_and_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let mut lrs = Vec::new();
    let mut hrs = Vec::new();
    for n in 0..3 {
        let hr = p(dir.path(), &format!("hr{n}.pgm"));
        ok(&["synth", "--height", "40", "--width", "40", "--seed", &n.to_string(), "--out", &hr]);
        let lr = p(dir.path(), &format!("lr{n}.pgm"));
        ok(&["degrade", "--image", &hr, "--sigma1", "1.2", "--sigma2", "2.0", "--angle", "1", "--out", &lr]);
        lrs.push(lr);
        hrs.push(hr);
    }
    let (lr_all, hr_all) = (lrs.join(","), hrs.join(","));
    let serial = p(dir.path(), "serial");
    ok(&["estimate", "--model", &model, "--lr-image", &lr_all, "--hr-image", &hr_all, "--iters", "15", "--outdir", &serial]);
    let parallel = p(dir.path(), "parallel");
    ok(&["estimate", "--model", &model, "--lr-image", &lr_all, "--hr-image", &hr_all, "--iters", "15", "--jobs", "3", "--outdir", &parallel]);
    for n in 0..3 {
        for f in ["kernel.fkpk", "latent.txt", "trace.csv"] {
            let rel = format!("lr{n}/{f}");
            assert_eq!(fs::read(dir.path().join("serial").join(&rel)).unwrap(), fs::read(dir.path().join("parallel").join(&rel)).unwrap());
        }
    }
    let trace = fs::read_to_string(dir.path().join("serial/lr0/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 15);
    assert!(trace.starts_with("0,"));

    assert_eq!(fkp(&["estimate", "--model", &model, "--lr-image", &lrs[0], "--outdir", &serial]).0, 2);

    let joint = p(dir.path(), "joint");
    ok(&["estimate", "--model", &model, "--mode", "joint", "--lr-image", &lrs[0], "--iters", "5", "--outdir", &joint]);
    let img = read_pnm(&fs::read(dir.path().join("joint/lr0/image.pgm")).unwrap()).unwrap();
    assert_eq!((img.height(), img.width()), (40, 40));

    let est = p(dir.path(), "serial/lr0/kernel.fkpk");
    let gt = p(dir.path(), "lr0.fkpk");
    let report = p(dir.path(), "report.csv");
    let stdout = ok(&["eval", "--est-kernel", &gt, "--gt-kernel", &gt, "--id", "same", "--report", &report]);
    assert_eq!(stdout, "id,kernel_psnr,image_psnr,image_ssim\nsame,inf,na,na\n");
    ok(&["eval", "--est-kernel", &est, "--gt-kernel", &gt, "--est-image", &hrs[0], "--gt-image", &hrs[1], "--report", &report]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,kernel_psnr,image_psnr,image_ssim");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("kernel,") && !lines[2].contains("na"));

    let other = p(dir.path(), "k3.fkpk");
    fs::write(&other, write_kernel(&Kernel::delta(3).unwrap())).unwrap();
    assert_eq!(fkp(&["eval", "--est-kernel", &other, "--gt-kernel", &gt]).0, 2);
    assert_eq!(fkp(&["eval", "--est-kernel", &gt, "--gt-kernel", &gt, "--est-image", &hrs[0]]).0, 2);
}
