use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cmas_core::checkpoint;
use cmas_core::eval::{read_metrics_file, summarize};
use cmas_core::OpKind;
use tempfile::TempDir;

fn cmas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmas")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cmas(args);
    assert!(out.status.success(), "cmas {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn have_data() -> bool {
    std::env::var_os("CMAS_DATA_DIR").is_some_and(|d| Path::new(&d).join("train-images-idx3-ubyte").exists())
}

fn manifest(dir: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

const SMALL: [&str; 8] = ["--limit", "400", "--test-limit", "150", "--epochs", "1", "--seed", "1"];

/// A tiny trained model set shared by the pipeline tests.
struct Models {
    root: TempDir,
}

impl Models {
    fn dir(&self, name: &str) -> String {
        self.root.path().join(name).to_string_lossy().into_owned()
    }

    fn flags(&self, names: &[&str]) -> Vec<String> {
        names.iter().flat_map(|n| ["--models".to_string(), self.dir(n)]).collect()
    }
}

fn models() -> Option<&'static Models> {
    static MODELS: OnceLock<Option<Models>> = OnceLock::new();
    MODELS
        .get_or_init(|| {
            if !have_data() {
                return None;
            }
            let m = Models {
                root: tempfile::tempdir().unwrap(),
            };
            for id in ["mnist", "mnist-perm", "mnist-rotinv"] {
                let out = m.dir(&format!("ae-{id}"));
                ok(&[&["train-intra", "--modality", id, "--latent-dim", "4", "--hidden", "32", "--out", &out][..], &SMALL]
                    .concat());
            }
            for id in ["mnist", "mnist-perm"] {
                let out = m.dir(&format!("recog-{id}"));
                ok(&[&["train-recognizer", "--modality", id, "--out", &out][..], &SMALL].concat());
            }
            let aes = m.flags(&["ae-mnist", "ae-mnist-perm", "ae-mnist-rotinv"]);
            let aes: Vec<&str> = aes.iter().map(String::as_str).collect();
            for (s, t) in [("mnist", "mnist-perm"), ("mnist", "mnist-rotinv"), ("mnist-rotinv", "mnist-perm")] {
                let out = m.dir(&format!("cross-{s}-{t}"));
                let head = ["train-cross", "--src", s, "--tgt", t, "--paired-fraction", "0.25", "--out", &out];
                ok(&[&head[..], &aes, &SMALL].concat());
            }
            Some(m)
        })
        .as_ref()
}

fn all_models(m: &Models) -> Vec<String> {
    m.flags(&[
        "ae-mnist",
        "ae-mnist-perm",
        "ae-mnist-rotinv",
        "recog-mnist",
        "recog-mnist-perm",
        "cross-mnist-mnist-perm",
        "cross-mnist-mnist-rotinv",
        "cross-mnist-rotinv-mnist-perm",
    ])
}

fn run_with(head: &[&str], tail: &[String]) -> Output {
    let tail: Vec<&str> = tail.iter().map(String::as_str).collect();
    ok(&[head, &tail].concat())
}

#[test]
fn gradcheck_lists_every_op_and_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in OpKind::DIFFERENTIABLE {
        let n = text.lines().filter(|l| l.split_whitespace().next() == Some(kind.name())).count();
        assert_eq!(n, 1, "{kind}");
    }
    assert!(text.contains("intra-loss") && text.contains("cross-loss"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_exits_one_on_injected_fault() {
    let out = cmas(&["gradcheck", "--inject-fault", "exp"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("exp ") && l.ends_with("FAIL")));
}

#[test]
fn cross_phase_before_intra_is_refused() {
    let empty = tempfile::tempdir().unwrap();
    let out_dir = empty.path().join("out");
    let args = [
        "train-cross",
        "--src",
        "mnist",
        "--tgt",
        "mnist-perm",
        "--models",
        empty.path().to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = cmas(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run intra phase first"));
    assert!(!out_dir.exists());
}

#[test]
fn generate_requires_a_direction() {
    let d = tempfile::tempdir().unwrap();
    let out = cmas(&["generate", "--models", d.path().to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_empty_output_directory_is_refused() {
    if !have_data() {
        return;
    }
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("keep"), b"x").unwrap();
    let out = cmas(&[&["train-intra", "--modality", "mnist", "--out", d.path().to_str().unwrap()][..], &SMALL].concat());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1);
}

#[test]
fn unknown_modality_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out_dir = d.path().join("o");
    let out = cmas(&["train-intra", "--modality", "mnist-sepia", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown modality"));
}

#[test]
fn cross_run_records_paired_fraction() {
    let Some(m) = models() else { return };
    let dir = PathBuf::from(m.dir("cross-mnist-mnist-perm"));
    let man = manifest(&dir);
    assert_eq!(man["paired_fraction"], "0.25");
    assert_eq!(man["config.paired_fraction"], "0.25");
    assert_eq!(man["command"], "train-cross");
    let csv = fs::read_to_string(dir.join("curves-cross-mnist-to-mnist-perm.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,paired_fraction,total,recon,kl"));
    assert!(lines.all(|l| l.split(',').nth(1) == Some("0.25")));
    for name in ["assoc-mnist-to-mnist-perm.cmas", "curves-cross-mnist-to-mnist-perm.csv"] {
        assert!(man.contains_key(&format!("output.{name}")), "{name}");
    }
    assert!(man.contains_key("input.train-images-idx3-ubyte"));
    assert!(!man.values().any(|v| v.contains(m.root.path().to_str().unwrap())));
}

#[test]
fn intra_run_writes_checkpoint_and_curves() {
    let Some(m) = models() else { return };
    let dir = PathBuf::from(m.dir("ae-mnist"));
    let man = manifest(&dir);
    assert_eq!(man["latent_dim"], "4");
    let records = checkpoint::read_file(&dir.join("ae-mnist.cmas")).unwrap();
    assert!(records.iter().all(|(n, _)| n.starts_with("ae/mnist/")));
    let csv = fs::read_to_string(dir.join("curves-intra-mnist.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn one_hop_path_matches_from_to() {
    let Some(m) = models() else { return };
    let scratch = tempfile::tempdir().unwrap();
    let (a, b) = (scratch.path().join("a"), scratch.path().join("b"));
    let tail = [all_models(m), vec!["--test-limit".into(), "150".into()]].concat();
    run_with(&["generate", "--from", "mnist", "--to", "mnist-perm", "--out", a.to_str().unwrap()], &tail);
    run_with(&["generate", "--path", "mnist,mnist-perm", "--out", b.to_str().unwrap()], &tail);
    for f in ["generated.cmas", "preview.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn preview_has_one_row_per_class() {
    let Some(m) = models() else { return };
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("g");
    let tail = [all_models(m), vec!["--test-limit".into(), "150".into()]].concat();
    run_with(&["generate", "--path", "mnist,mnist-rotinv,mnist-perm", "--out", out.to_str().unwrap()], &tail);
    let pgm = fs::read(out.join("preview.pgm")).unwrap();
    let header = b"P5\n224 280\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 224 * 280);
    let gen = checkpoint::read_file(&out.join("generated.cmas")).unwrap();
    assert_eq!(gen[0].0, "generated");
    assert_eq!(gen[0].1.shape(), &[150, 784]);
    assert_eq!(gen[1].1.shape(), &[150]);
}

#[test]
fn eval_rows_and_summary_agree() {
    let Some(m) = models() else { return };
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("e");
    let tail = [all_models(m), vec!["--test-limit".into(), "150".into()]].concat();
    let o = run_with(&["eval", "--scenario", "cascade", "--seeds", "0,1,2", "--out", out.to_str().unwrap()], &tail);
    let rows = read_metrics_file(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.paired_fraction == 0.25 && r.n == 150));
    let text = String::from_utf8(o.stdout).unwrap();
    for (dir, mean) in summarize(&rows) {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(dir.as_str())).unwrap();
        let printed: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
        assert!((printed - mean).abs() < 1e-4, "{dir}");
    }
    let dirs: Vec<String> = summarize(&rows).into_iter().map(|(d, _)| d).collect();
    assert!(dirs.contains(&"intra:mnist".to_string()));
    assert!(dirs.contains(&"mnist->mnist-rotinv->mnist-perm".to_string()));
}

#[test]
fn sweep_covers_every_fraction_and_seed() {
    let Some(m) = models() else { return };
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("s");
    let tail = [
        m.flags(&["ae-mnist", "ae-mnist-perm", "recog-mnist-perm"]),
        SMALL.iter().map(|s| s.to_string()).collect(),
    ]
    .concat();
    let head = ["sweep", "--src", "mnist", "--tgt", "mnist-perm", "--fractions", "0.05,1.0", "--seeds", "4,5"];
    run_with(&[&head[..], &["--out", out.to_str().unwrap()]].concat(), &tail);
    let rows = read_metrics_file(&out.join("sweep.csv")).unwrap();
    let cells: Vec<(f64, u64)> = rows.iter().map(|r| (r.paired_fraction, r.seed)).collect();
    assert_eq!(cells, [(0.05, 4), (0.05, 5), (1.0, 4), (1.0, 5)]);
    assert!(rows.iter().all(|r| r.direction == "mnist->mnist-perm"));
}

#[test]
fn config_file_and_flags_combine() {
    let Some(m) = models() else { return };
    let scratch = tempfile::tempdir().unwrap();
    let cfg = scratch.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 3\nlambda_crs = 0.001\n").unwrap();
    let out = scratch.path().join("c");
    let tail = [m.flags(&["ae-mnist", "ae-mnist-perm"]), vec!["--limit".into(), "300".into()]].concat();
    run_with(
        &[
            "train-cross",
            "--src",
            "mnist-perm",
            "--tgt",
            "mnist",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
        &tail,
    );
    let man = manifest(&out);
    assert_eq!(man["config.epochs"], "2");
    assert_eq!(man["config.lambda_crs"], "0.001");
    assert_eq!(man["paired_fraction"], "1.0");
}
