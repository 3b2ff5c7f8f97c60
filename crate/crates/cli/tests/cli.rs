use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = "
[train]
epochs = 1
batch_size = 2

[spectral]
griffin_lim_iterations = 8

[eval.timbre]
min_tracks = 2
epochs = 20
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timbrevq"))
        .args(args)
        .env_remove("TIMBREVQ_CONFIG")
        .env("TIMBREVQ_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("project.toml");
        fs::write(&config, CONFIG).unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn prepare(&self, name: &str, pairs: &str, benchmark: Option<&str>) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["prepare", "--config", s(&self.config), "--out", s(&out), "--pairs", pairs, "--seed", "7"];
        if let Some(b) = benchmark {
            args.extend(["--benchmark", b]);
        }
        ok(&args);
        out
    }

    fn train(&self, data: &Path, out: &str) -> PathBuf {
        let ckpt = self.path(out);
        ok(&["train", "--config", s(&self.config), "--data", s(data), "--out", s(&ckpt)]);
        ckpt
    }
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        ("prepare", &["--out", "--pairs", "--seed", "--benchmark", "--config"]),
        ("train", &["--data", "--out", "--resume", "--seed"]),
        ("transfer", &["--ckpt", "--content", "--style", "--out", "--gl-iters", "--seed"]),
        ("eval", &["--ckpt", "--outputs", "--manifest", "--mode", "--report", "--timbre-model", "--timbre-data"]),
        ("diagnose", &["--ckpt", "--data"]),
    ];
    for (cmd, flags) in cases {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    ok(&["--help"]);
}

#[test]
fn prepare_is_deterministic_and_accepts_zero_pairs() {
    let f = Fixture::new();
    let a = f.prepare("a", "3", None);
    let b = f.prepare("b", "3", None);
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("pair00002_y.wav")).unwrap(), fs::read(b.join("pair00002_y.wav")).unwrap());
    // re-running over existing output gives the same bytes
    f.prepare("a", "3", None);
    assert_eq!(ma, fs::read(a.join("manifest.jsonl")).unwrap());

    let empty = f.prepare("empty", "0", None);
    assert_eq!(fs::read_to_string(empty.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn config_errors_exit_with_one_and_name_the_key() {
    let f = Fixture::new();
    let bad = f.path("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let out = run(&["prepare", "--config", s(&bad), "--out", s(&f.path("x")), "--pairs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let out = run(&["prepare", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));

    // the config path can also come from the environment
    let out = Command::new(env!("CARGO_BIN_EXE_timbrevq"))
        .args(["prepare", "--out", s(&f.path("y")), "--pairs", "1"])
        .env("TIMBREVQ_CONFIG", &bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_logs_epochs_resumes_exactly_and_rejects_missing_data() {
    let f = Fixture::new();
    let out = run(&["train", "--data", s(&f.path("nowhere")), "--out", s(&f.path("c"))]);
    assert_eq!(out.status.code(), Some(1));

    let data = f.prepare("data", "2", None);
    let one = f.train(&data, "one");
    let log = fs::read_to_string(one.join("train_log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"kind\":\"epoch\"")));

    let two_cfg = f.path("two.toml");
    fs::write(&two_cfg, CONFIG.replace("epochs = 1", "epochs = 2")).unwrap();
    let straight = f.path("straight");
    ok(&["train", "--config", s(&two_cfg), "--data", s(&data), "--out", s(&straight)]);
    let resumed = f.path("resumed");
    let start = one.join("last.ckpt");
    ok(&[
        "train", "--config", s(&two_cfg), "--data", s(&data), "--out", s(&resumed), "--resume", s(&start),
    ]);
    assert_eq!(
        fs::read(straight.join("last.ckpt")).unwrap(),
        fs::read(resumed.join("last.ckpt")).unwrap()
    );
}

#[test]
fn transfer_eval_and_diagnose() {
    let f = Fixture::new();
    let data = f.prepare("data", "3", Some("2"));
    let bench = data.join("benchmark");
    let ckpt = f.train(&data, "ckpt").join("last.ckpt");

    // transfer: duration follows the content input; same inputs, same bytes
    let content = bench.join("bench00000_content.wav");
    let style = bench.join("bench00001_style.wav");
    let mut outputs = Vec::new();
    for name in ["t1.wav", "t2.wav"] {
        let out = f.path(name);
        ok(&[
            "transfer", "--config", s(&f.config), "--ckpt", s(&ckpt), "--content", s(&content), "--style",
            s(&style), "--out", s(&out), "--seed", "3",
        ]);
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(fs::metadata(&content).unwrap().len(), outputs[0].len() as u64);

    let corrupt = f.path("corrupt.ckpt");
    fs::write(&corrupt, b"TIMBREVQ-ARCHIVE\nversion 1\nheader 3\nabc").unwrap();
    let out = run(&[
        "transfer", "--ckpt", s(&corrupt), "--content", s(&content), "--style", s(&style), "--out",
        s(&f.path("t3.wav")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // eval with generated outputs
    let outs = f.path("outs");
    let report = f.path("report/artificial.txt");
    let timbre = f.path("timbre.tvq");
    ok(&[
        "eval", "--config", s(&f.config), "--ckpt", s(&ckpt), "--outputs", s(&outs), "--manifest", s(&bench),
        "--mode", "artificial", "--report", s(&report), "--timbre-model", s(&timbre), "--timbre-data", s(&data),
    ]);
    assert!(timbre.exists());
    let table = fs::read_to_string(&report).unwrap();
    for needle in ["cp-content", "cp-style", "lsd_T", "timbre_T", "pitch_T"] {
        assert!(table.contains(needle), "{table}");
    }
    let rows = fs::read_to_string(report.with_extension("jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 2);

    // real mode, with one output removed
    fs::remove_file(outs.join("output_00001.wav")).unwrap();
    let real = f.path("real.txt");
    ok(&[
        "eval", "--config", s(&f.config), "--outputs", s(&outs), "--manifest", s(&bench), "--mode", "real",
        "--report", s(&real), "--timbre-model", s(&timbre),
    ]);
    let table = fs::read_to_string(&real).unwrap();
    assert!(table.contains("timbre_S") && table.contains("pitch_C"));
    assert!(!table.contains("lsd"));
    assert!(table.contains("1 output(s) missing"));
    let rows = fs::read_to_string(real.with_extension("jsonl")).unwrap();
    assert!(rows.lines().nth(1).unwrap().contains("\"missing\""));

    // eval without any timbre model is a user error
    let out = run(&["eval", "--outputs", s(&outs), "--manifest", s(&bench), "--report", s(&real)]);
    assert_eq!(out.status.code(), Some(1));

    // diagnose
    let out = ok(&["diagnose", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let field = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        line[name.len()..].trim().split_whitespace().next().unwrap().parse().unwrap()
    };
    let k = field("codebook size");
    let used = field("codes in use");
    let ppl = field("perplexity");
    let rate = field("code rate");
    assert!(used >= 1.0 && used <= k);
    assert!(ppl >= 1.0 - 1e-9 && ppl <= k);
    for tempo in [60.0f64, 120.0, 240.0] {
        let line = text
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{tempo}")))
            .unwrap();
        let bits: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        let expected = used.log2() * rate * 60.0 / tempo;
        assert!((bits - expected).abs() < 0.01, "{line} vs {expected}");
    }
}
