use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pcn::train::RunConfig;

fn pcn(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcn"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    stdout(&o)
}

/// Value after `key: ` on the first line starting with `key`.
fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no '{key}' in {text}"))
        .to_string()
}

/// Tiny MNIST look-alike: class `c` brightens rows `2c..2c+3`.
fn write_mnist(root: &Path) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let write = |stem: &str, n: usize, salt: usize| {
        let mut images = vec![0, 0, 8, 3];
        for d in [n as u32, 28, 28] {
            images.extend(d.to_be_bytes());
        }
        let mut labels = vec![0, 0, 8, 1];
        labels.extend((n as u32).to_be_bytes());
        for i in 0..n {
            let c = (i + salt) % 10;
            labels.push(c as u8);
            for p in 0..784 {
                let lit = (2 * c..2 * c + 3).contains(&(p / 28));
                let noise = ((i * 131 + p * 17 + salt * 7) % 61) as u8;
                images.push(if lit { 170 } else { 20 } + noise);
            }
        }
        fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), images).unwrap();
        fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), labels).unwrap();
    };
    write("train", 400, 0);
    write("t10k", 100, 3);
}

const SMALL: &str = r#"
architecture = "mlp-mnist-16"
epochs = 2
batch_size = 32
eval_batch_size = 100
pca_samples = 200
optimizer = { kind = "adam", learning_rate = 0.003 }
"#;

fn workspace(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    write_mnist(&data);
    let config = tmp.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    (data, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_params_reports_reference_architectures() {
    let out = ok(pcn(Path::new("data"), &["count-params", "--arch", "conv4"]));
    assert_eq!(field(&out, "trainable"), "2425930");
    let out = ok(pcn(Path::new("data"), &["count-params", "--arch", "wideresnet20"]));
    assert_eq!(field(&out, "trainable"), "4331978");
    assert_eq!(field(&out, "total"), "4338378");
    let layers = ok(pcn(Path::new("data"), &["count-params", "--arch", "conv4", "--layers"]));
    assert!(layers.lines().any(|l| l.starts_with("fc1")), "{layers}");
}

#[test]
fn missing_plan_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/plan.toml");
    let o = pcn(tmp.path(), &["train-pcn", "--plan", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let o = pcn(tmp.path(), &["train-pcn", "--arch", "mlp-mnist-16"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("needs a plan"));
    let o = pcn(tmp.path(), &["train", "--arch", "no-such-net"]);
    assert!(!o.status.success());
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pcn(tmp.path(), &["train", "--arch", "mlp-mnist-16", "--epochs", "1", "--out", s(&tmp.path().join("runs"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn print_config_layers_flags_over_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = workspace(tmp.path());
    let out = ok(pcn(&data, &["train", "--config", s(&config), "--seed", "9", "--epochs", "3", "--print-config"]));
    let c = RunConfig::from_toml(&out).unwrap();
    assert_eq!((c.seed, c.epochs, c.batch_size), (9, 3, 32));
    assert_eq!(c.architecture.to_string(), "mlp-mnist-16");
    assert!(c.plan.is_none());
}

#[test]
fn seeded_training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = workspace(tmp.path());
    let runs = |name: &str| tmp.path().join(name);
    for dir in ["a", "b"] {
        let out = ok(pcn(&data, &["train", "--config", s(&config), "--seed", "4", "--out", s(&runs(dir))]));
        assert!(out.contains("test accuracy"), "{out}");
    }
    for file in ["record.csv", "record.toml"] {
        let a = fs::read(runs("a").join("mlp-mnist-16-base-s4").join(file)).unwrap();
        let b = fs::read(runs("b").join("mlp-mnist-16-base-s4").join(file)).unwrap();
        if file == "record.csv" {
            assert_eq!(a, b);
        } else {
            // Only wall time may differ.
            let strip = |t: Vec<u8>| String::from_utf8(t).unwrap().lines().filter(|l| !l.starts_with("wall_time")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(a), strip(b));
        }
    }
}

#[test]
fn transform_then_count_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = workspace(tmp.path());
    let runs = tmp.path().join("runs");
    ok(pcn(&data, &["train", "--config", s(&config), "--out", s(&runs)]));
    let ckpt = runs.join("mlp-mnist-16-base-s0/final.pcnc");
    let plan = tmp.path().join("plan.toml");
    fs::write(&plan, "transform_epoch = 1\npost_epochs = 1\n[layers]\nfc1 = { input = 30, output = 10 }\noutput = { input = 8 }\n").unwrap();
    let out_ckpt = tmp.path().join("t.pcnc");
    let bases = tmp.path().join("bases");
    let out = ok(pcn(
        &data,
        &["transform", "--checkpoint", s(&ckpt), "--plan", s(&plan), "--out", s(&out_ckpt), "--samples", "200", "--dump-bases", s(&bases)],
    ));
    assert_eq!(field(&out, "fc1"), "30 input dimensions");
    let after = field(&out, "trainable");
    let (before, after) = after.split_once(" -> ").unwrap();
    assert_eq!(before, (784 * 16 + 16 + 170).to_string());
    assert_eq!(after, (30 * 10 + 10 + 8 * 10 + 10).to_string());
    let counted = ok(pcn(&data, &["count-params", "--checkpoint", s(&out_ckpt)]));
    assert_eq!(field(&counted, "trainable"), after);
    assert!(bases.join("fc1.components.pcnt").exists());
}

#[test]
fn seed_matrix_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, config) = workspace(tmp.path());
    let runs = tmp.path().join("runs");
    let out = ok(pcn(&data, &["train", "--config", s(&config), "--seeds", "1,2", "--out", s(&runs)]));
    assert!(out.contains("mlp-mnist-16-base"), "{out}");
    assert!(runs.join("summary.csv").exists());

    let csv = tmp.path().join("summary.csv");
    let report = ok(pcn(&data, &["report", "--runs", s(&runs), "--out", s(&csv)]));
    let row = report.lines().find(|l| l.starts_with("mlp-mnist-16-base")).unwrap();
    assert_eq!(row.split_whitespace().nth(1), Some("2"));
    assert_eq!(fs::read(&csv).unwrap(), fs::read(runs.join("summary.csv")).unwrap());

    let meta = runs.join("mlp-mnist-16-base-s2/record.toml");
    let text = fs::read_to_string(&meta).unwrap().replace("schema_version = 1", "schema_version = 99");
    fs::write(&meta, text).unwrap();
    let o = pcn(&data, &["report", "--runs", s(&runs)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema version 99"), "{}", stderr(&o));
}

#[test]
fn fetch_verify_only_checks_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, _) = workspace(tmp.path());
    let o = pcn(&data, &["fetch", "--dataset", "mnist", "--verify-only"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("train-images-idx3-ubyte: sha256"), "{err}");

    let empty = tmp.path().join("empty");
    let o = pcn(&empty, &["fetch", "--dataset", "cifar10", "--verify-only"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("test_batch.bin missing"));

    // The real files, when present, verify; one flipped byte does not.
    let real = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    if !real.join("mnist/t10k-labels-idx1-ubyte").exists() {
        return;
    }
    ok(pcn(&real, &["fetch", "--dataset", "mnist", "--verify-only"]));
    let copy = tmp.path().join("copy");
    fs::create_dir_all(copy.join("mnist")).unwrap();
    for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        fs::copy(real.join("mnist").join(f), copy.join("mnist").join(f)).unwrap();
    }
    ok(pcn(&copy, &["fetch", "--dataset", "mnist", "--verify-only"]));
    let labels = copy.join("mnist/t10k-labels-idx1-ubyte");
    let mut bytes = fs::read(&labels).unwrap();
    bytes[100] ^= 1;
    fs::write(&labels, bytes).unwrap();
    let o = pcn(&copy, &["fetch", "--dataset", "mnist", "--verify-only"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("t10k-labels-idx1-ubyte: sha256"));
}

#[test]
fn shipped_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let c = |f: &str| root.join(f).to_str().unwrap().to_string();
    let out = ok(pcn(Path::new("data"), &["train", "--config", &c("conv4-small-trace.toml"), "--print-config"]));
    assert_eq!(RunConfig::from_toml(&out).unwrap().train_subset, Some(10_000));
    let out = ok(pcn(Path::new("data"), &["train-pcn", "--config", &c("mlp-mnist-pcn.toml"), "--print-config"]));
    assert_eq!(RunConfig::from_toml(&out).unwrap().plan.unwrap().transform_epoch, 1);
    let out = ok(pcn(Path::new("data"), &["train-pcn", "--arch", "conv4", "--plan", &c("conv4-pcn-plan.toml"), "--print-config"]));
    assert_eq!(RunConfig::from_toml(&out).unwrap().epochs, 20);
}
