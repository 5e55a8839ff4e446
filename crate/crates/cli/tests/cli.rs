use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fccgan() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fccgan"));
    for (k, _) in std::env::vars() {
        if k.starts_with("FCCGAN_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn assert_success(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
}

#[track_caller]
fn assert_exit(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn write_idx(path: &Path, code: u8, dims: &[u32], payload: &[u8]) {
    let mut bytes = vec![0, 0, 0x08, code];
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    std::fs::write(path, bytes).unwrap();
}

/// A data root holding a small random MNIST-format dataset.
fn tiny_mnist(train: u32, test: u32) -> TempDir {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("mnist");
    std::fs::create_dir(&dir).unwrap();
    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut byte = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 24) as u8
    };
    for (stem, n) in [("train", train), ("t10k", test)] {
        let images: Vec<u8> = (0..n * 784).map(|_| byte()).collect();
        let labels: Vec<u8> = (0..n).map(|_| byte() % 10).collect();
        write_idx(
            &dir.join(format!("{stem}-images-idx3-ubyte")),
            3,
            &[n, 28, 28],
            &images,
        );
        write_idx(
            &dir.join(format!("{stem}-labels-idx1-ubyte")),
            1,
            &[n],
            &labels,
        );
    }
    root
}

fn train_cmd(data: &Path, out: &Path) -> Command {
    let mut cmd = fccgan();
    cmd.args(["train", "--dataset", "mnist", "--variant", "cnn", "--quiet"])
        .arg("--data-dir")
        .arg(data)
        .arg("--out")
        .arg(out);
    cmd
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .to_string()
}

#[test]
fn describe_matches_golden_tables() {
    let cases: &[(&str, &str, &[&str])] = &[
        ("mnist_cnn.txt", "mnist", &["--variant", "cnn"]),
        ("mnist_fccgan-s.txt", "mnist", &["--variant", "fccgan-s"]),
        ("mnist_fccgan-p.txt", "mnist", &["--variant", "fccgan-p"]),
        ("cifar10_cnn.txt", "cifar10", &["--variant", "cnn"]),
        (
            "cifar10_fccgan-s.txt",
            "cifar10",
            &["--variant", "fccgan-s"],
        ),
        (
            "cifar10_fccgan-p.txt",
            "cifar10",
            &["--variant", "fccgan-p"],
        ),
        ("cifar10_cnn.txt", "svhn", &["--variant", "cnn"]),
        ("cifar10_fccgan-p.txt", "svhn", &["--variant", "fccgan-p"]),
        ("celeba_cnn.txt", "celeba", &["--variant", "cnn"]),
        ("celeba_fccgan-s.txt", "celeba", &["--variant", "fccgan-s"]),
        ("celeba_fccgan-p.txt", "celeba", &["--variant", "fccgan-p"]),
        (
            "cifar10_cnn_conv7.txt",
            "cifar10",
            &["--variant", "cnn", "--conv-depth", "7"],
        ),
        (
            "cifar10_fccgan-s_conv7.txt",
            "cifar10",
            &["--variant", "fccgan-s", "--conv-depth", "7"],
        ),
    ];
    for (file, dataset, extra) in cases {
        let o = run(fccgan()
            .args(["describe", "--dataset", dataset])
            .args(*extra));
        assert_success(&o);
        assert_eq!(
            stdout(&o).trim_end(),
            golden(file).trim_end(),
            "{dataset} {extra:?}"
        );
    }
}

#[test]
fn invalid_architecture_flags_name_the_reason() {
    let o = run(fccgan().args(["describe", "--dataset", "mnist", "--fc-layers-g", "9"]));
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("1..5"), "{}", stderr(&o));

    let o = run(fccgan().args(["describe", "--dataset", "celeba", "--conv-depth", "7"]));
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("celeba"), "{}", stderr(&o));

    let o = run(fccgan().args(["describe", "--dataset", "imagenet"]));
    assert_exit(&o, 2);

    let o = run(fccgan().args(["describe", "--dataset", "mnist", "--grid", "8by8"]));
    assert_exit(&o, 2);
}

#[test]
fn flags_override_environment_which_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.txt");
    std::fs::write(
        &file,
        "# experiment\ndataset=mnist\nvariant=fccgan-p\nfc_layers_g=2\n",
    )
    .unwrap();
    let with = |env: Option<&str>, flag: Option<&str>| {
        let mut cmd = fccgan();
        cmd.arg("describe").arg("--config").arg(&file);
        if let Some(v) = env {
            cmd.env("FCCGAN_FC_LAYERS_G", v);
        }
        if let Some(v) = flag {
            cmd.args(["--fc-layers-g", v]);
        }
        let o = run(&mut cmd);
        assert_success(&o);
        stdout(&o)
    };
    let by_flag = |k: &str| {
        let o = run(fccgan().args([
            "describe",
            "--dataset",
            "mnist",
            "--variant",
            "fccgan-p",
            "--fc-layers-g",
            k,
        ]));
        assert_success(&o);
        stdout(&o)
    };
    assert_eq!(with(None, None), by_flag("2"));
    assert_eq!(with(Some("4"), None), by_flag("4"));
    assert_eq!(with(Some("4"), Some("1")), by_flag("1"));
    assert_ne!(by_flag("1"), by_flag("2"));

    std::fs::write(&file, "dataset=mnist\ndataset=cifar10\n").unwrap();
    let o = run(fccgan().arg("describe").arg("--config").arg(&file));
    assert_exit(&o, 2);
    std::fs::write(&file, "dataset=mnist\ncolour=blue\n").unwrap();
    let o = run(fccgan().arg("describe").arg("--config").arg(&file));
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn wgan_cifar_defaults_are_recorded_before_data_is_read() {
    let empty = tempfile::tempdir().unwrap();
    let out = empty.path().join("run");
    let o = run(fccgan()
        .args([
            "train",
            "--objective",
            "wgan",
            "--dataset",
            "cifar10",
            "--quiet",
        ])
        .arg("--data-dir")
        .arg(empty.path())
        .arg("--out")
        .arg(&out));
    assert_exit(&o, 4);
    assert!(stderr(&o).contains("data_batch_1.bin"), "{}", stderr(&o));
    assert_eq!(config_value(&out, "batch_size"), "64");
    assert_eq!(config_value(&out, "optimizer"), "rmsprop");
    assert_eq!(config_value(&out, "lr").parse::<f64>().unwrap(), 5e-5);
    assert_eq!(config_value(&out, "n_critic"), "5");
    assert_eq!(config_value(&out, "clip_c").parse::<f64>().unwrap(), 0.01);

    let o = run(fccgan().args([
        "describe",
        "--dataset",
        "cifar10",
        "--variant",
        "cnn",
        "--no-bn-d",
    ]));
    assert_success(&o);
    let text = stdout(&o);
    let d = text.split("[discriminator]").nth(1).unwrap();
    assert!(!d.contains("BN"), "{d}");
    assert!(text.split("[discriminator]").next().unwrap().contains("BN"));
}

#[test]
fn training_writes_a_self_describing_run_directory() {
    let data = tiny_mnist(64, 32);
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("run");
    let o = run(train_cmd(data.path(), &out).args(["--epochs", "2", "--seed", "7"]));
    assert_success(&o);
    for rel in [
        "config.txt",
        "loss.csv",
        "checkpoints/epoch-000.fckp",
        "checkpoints/epoch-001.fckp",
        "checkpoints/epoch-002.fckp",
        "checkpoints/last.fckp",
        "samples/epoch-000.pgm",
        "samples/epoch-002.pgm",
    ] {
        assert!(out.join(rel).is_file(), "missing {rel}");
    }
    assert!(!out.join("scores.csv").exists());
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("iter,epoch,d_loss,g_loss,wall_ms"));
    assert_eq!(lines.count(), 4);

    let from_run = run(fccgan().arg("describe").arg("--run").arg(&out));
    let direct = run(fccgan().args(["describe", "--dataset", "mnist", "--variant", "cnn"]));
    assert_success(&from_run);
    assert_eq!(stdout(&from_run), stdout(&direct));

    let again = run(&mut train_cmd(data.path(), &out));
    assert_exit(&again, 2);
    assert!(stderr(&again).contains("--resume"), "{}", stderr(&again));

    let replay = work.path().join("replay");
    let o = run(fccgan()
        .args(["train", "--quiet", "--config"])
        .arg(out.join("config.txt"))
        .arg("--data-dir")
        .arg(data.path())
        .arg("--out")
        .arg(&replay));
    assert_success(&o);
    assert_eq!(
        std::fs::read(replay.join("loss.csv")).unwrap(),
        loss.as_bytes()
    );
    assert_eq!(
        std::fs::read(replay.join("checkpoints/last.fckp")).unwrap(),
        std::fs::read(out.join("checkpoints/last.fckp")).unwrap()
    );
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let data = tiny_mnist(64, 32);
    let work = tempfile::tempdir().unwrap();
    let whole = work.path().join("whole");
    let split = work.path().join("split");
    assert_success(&run(train_cmd(data.path(), &whole).args(["--epochs", "3"])));
    assert_success(&run(train_cmd(data.path(), &split).args(["--epochs", "1"])));
    let o = run(fccgan()
        .args(["train", "--resume", "--quiet", "--epochs", "3"])
        .arg("--data-dir")
        .arg(data.path())
        .arg("--out")
        .arg(&split));
    assert_success(&o);
    for rel in [
        "loss.csv",
        "checkpoints/last.fckp",
        "checkpoints/epoch-003.fckp",
        "config.txt",
    ] {
        assert_eq!(
            std::fs::read(whole.join(rel)).unwrap(),
            std::fs::read(split.join(rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn sampling_and_artifact_errors_map_to_exit_codes() {
    let data = tiny_mnist(64, 32);
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("run");
    assert_success(&run(train_cmd(data.path(), &out).args(["--epochs", "1"])));
    let ckpt = out.join("checkpoints/last.fckp");

    let grid = work.path().join("grid.pgm");
    let o = run(fccgan()
        .arg("sample")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&grid)
        .args(["--grid", "3x4"]));
    assert_success(&o);
    let bytes = std::fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n"), "{:?}", &bytes[..8]);

    let o = run(fccgan()
        .arg("score")
        .arg(&ckpt)
        .arg("--eval-dir")
        .arg(work.path())
        .args(["--samples", "50"]));
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("50"), "{}", stderr(&o));

    let o = run(fccgan()
        .arg("score")
        .arg(&ckpt)
        .arg("--eval-dir")
        .arg(work.path()));
    assert_exit(&o, 4);
    assert!(stderr(&o).contains("classifier.fckp"), "{}", stderr(&o));

    let corrupt = work.path().join("corrupt.fckp");
    let mut raw = std::fs::read(&ckpt).unwrap();
    raw.truncate(raw.len() / 2);
    std::fs::write(&corrupt, raw).unwrap();
    let o = run(fccgan()
        .arg("sample")
        .arg("--checkpoint")
        .arg(&corrupt)
        .arg("--out")
        .arg(&grid));
    assert_exit(&o, 4);

    let o = run(fccgan()
        .arg("train")
        .arg("--out")
        .arg(work.path().join("x"))
        .args(["--epochs", "lots"]));
    assert_exit(&o, 2);
}

#[test]
fn divergent_training_aborts_with_a_diagnostic_checkpoint() {
    let data = tiny_mnist(64, 32);
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("run");
    let o = run(train_cmd(data.path(), &out).args([
        "--epochs",
        "3",
        "--optimizer",
        "sgd",
        "--lr",
        "1e38",
    ]));
    assert_exit(&o, 3);
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(out.join("diagnostic.fckp").is_file());
}

#[test]
fn classifier_below_floor_is_a_numerical_failure() {
    let data = tiny_mnist(128, 64);
    let work = tempfile::tempdir().unwrap();
    let o = run(fccgan()
        .args([
            "prepare-eval",
            "--dataset",
            "mnist",
            "--stats-samples",
            "64",
        ])
        .arg("--data-dir")
        .arg(data.path())
        .arg("--out")
        .arg(work.path().join("eval")));
    assert_exit(&o, 3);
    assert!(stderr(&o).contains("below"), "{}", stderr(&o));
    assert!(!work.path().join("eval").exists());
}

#[test]
fn bn_grid_sweep_runs_four_points() {
    let data = tiny_mnist(64, 32);
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("sweep");
    let o = run(fccgan()
        .args([
            "sweep",
            "--axis",
            "bn-grid",
            "--dataset",
            "mnist",
            "--epochs",
            "1",
            "--jobs",
            "2",
        ])
        .arg("--data-dir")
        .arg(data.path())
        .arg("--out")
        .arg(&out));
    assert_success(&o);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(
        rows[0],
        "axis,point,epoch,d_loss,g_loss,is_mean,is_std,fid_mean,fid_std,n_samples"
    );
    let points: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(points, ["BN-BN", "NBN-BN", "BN-NBN", "NBN-NBN"]);
    let expect = [
        ("BN-BN", "true", "true"),
        ("NBN-BN", "false", "true"),
        ("BN-NBN", "true", "false"),
        ("NBN-NBN", "false", "false"),
    ];
    for (label, g, d) in expect {
        let dir = out.join(format!("point-{label}"));
        assert_eq!(config_value(&dir, "bn_g"), g, "{label}");
        assert_eq!(config_value(&dir, "bn_d"), d, "{label}");
        assert!(dir.join("checkpoints/last.fckp").is_file());
    }

    let o = run(fccgan()
        .args([
            "sweep",
            "--axis",
            "fc-depth-both",
            "--values",
            "1,9",
            "--dataset",
            "mnist",
        ])
        .arg("--data-dir")
        .arg(data.path())
        .arg("--out")
        .arg(work.path().join("bad")));
    assert_exit(&o, 2);
    assert!(stderr(&o).contains("point 9"), "{}", stderr(&o));
}

fn real_mnist() -> Option<PathBuf> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    root.join("mnist/train-images-idx3-ubyte")
        .is_file()
        .then_some(root)
}

/// Uses the MNIST files under data/ when present (see scripts/fetch_mnist.sh).
#[test]
fn trained_checkpoint_scores_better_than_its_initialization() {
    let Some(data) = real_mnist() else {
        eprintln!("skipped: data/mnist not found");
        return;
    };
    let work = tempfile::tempdir().unwrap();
    let eval = work.path().join("eval");
    let o = run(fccgan()
        .args([
            "prepare-eval",
            "--dataset",
            "mnist",
            "--limit",
            "20000",
            "--floor",
            "0.9",
            "--stats-samples",
            "2000",
        ])
        .arg("--data-dir")
        .arg(&data)
        .arg("--out")
        .arg(&eval));
    assert_success(&o);

    let out = work.path().join("run");
    let o = run(train_cmd(&data, &out).args(["--epochs", "1", "--limit", "3000"]));
    assert_success(&o);
    let score = |ckpt: &str| {
        let o = run(fccgan()
            .arg("score")
            .arg(out.join("checkpoints").join(ckpt))
            .arg("--eval-dir")
            .arg(&eval)
            .args(["--samples", "500", "--fid-repeats", "2"]));
        assert_success(&o);
        let text = stdout(&o);
        let row: Vec<f64> = text
            .lines()
            .last()
            .unwrap()
            .split(',')
            .map(|c| c.parse().unwrap())
            .collect();
        (text, row[1], row[3])
    };
    let (first, is0, fid0) = score("epoch-000.fckp");
    let (again, _, _) = score("epoch-000.fckp");
    assert_eq!(first, again);
    let (_, is1, fid1) = score("epoch-001.fckp");
    assert!(is1 > is0, "IS {is0} -> {is1}");
    assert!(fid1 < fid0, "FID {fid0} -> {fid1}");
}
