use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scoremix::dataset::Dataset;
use scoremix::schedule;
use scoremix::score_net::{ScoreArch, ScoreNetwork};

fn scoremix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scoremix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = scoremix(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = scoremix(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    String::from_utf8(out.stderr).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ring(&self) -> PathBuf {
        let p = self.path("ring.smxd");
        if !p.exists() {
            ok(&["make-data", "--preset", "ring8", "--count", "32", "--seed", "1", "--out", s(&p)]);
        }
        p
    }

    fn score(&self) -> PathBuf {
        let out = self.path("score");
        if !out.exists() {
            ok(&[
                "train-score", "--data", s(&self.ring()), "--set", "score.hidden=16,16",
                "--steps", "50", "--out", s(&out),
            ]);
        }
        out.join("score.smxn")
    }
}

const SMALL_GAN: [&str; 8] = [
    "--set", "gan.hidden=8,8", "--set", "gan.eval_every=5", "--set", "gan.eval_samples=256",
    "--set", "gan.batch_size=16",
];

#[test]
fn make_data_writes_header_and_is_deterministic() {
    let f = Fixture::new();
    let a = f.path("a.smxd");
    let b = f.path("b.smxd");
    let args = |p: &Path| vec!["make-data", "--preset", "ring8", "--count", "8000", "--seed", "1", "--out", s(p)]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    let run = |p: &Path| ok(&args(p).iter().map(String::as_str).collect::<Vec<_>>());
    run(&a);
    run(&b);
    let text = String::from_utf8(read(&a)).unwrap();
    assert_eq!(text.lines().next(), Some("SMXD 1 2 8000 1"));
    assert_eq!(read(&a), read(&b));
    let mut echo = a.clone().into_os_string();
    echo.push(".cfg");
    let c = f.path("c.smxd");
    ok(&["make-data", "--config", echo.to_str().unwrap(), "--out", s(&c)]);
    assert_eq!(read(&a), read(&c));
}

#[test]
fn make_data_rejects_unknown_preset() {
    let f = Fixture::new();
    let err = fails(&["make-data", "--preset", "spiral9", "--out", s(&f.path("x.smxd"))], 2);
    assert!(err.contains("spiral9"), "{err}");
    fails(&["make-data", "--set", "data.nonsense=1", "--out", s(&f.path("x.smxd"))], 2);
    fails(&["make-data"], 2);
}

#[test]
fn train_score_smoke_rerun_and_zero_steps() {
    let f = Fixture::new();
    let ckpt = f.score();
    let out = ckpt.parent().unwrap();
    assert!(out.join("score_loss.csv").exists());
    let again = f.path("score2");
    ok(&["train-score", "--config", s(&out.join("config.cfg")), "--out", s(&again)]);
    assert_eq!(read(out.join("score.smxn")), read(again.join("score.smxn")));
    assert_eq!(read(out.join("score_loss.csv")), read(again.join("score_loss.csv")));

    let zero = f.path("zero");
    ok(&[
        "train-score", "--data", s(&f.ring()), "--set", "score.hidden=16,16", "--steps", "0",
        "--seed", "4", "--out", s(&zero),
    ]);
    let net = ScoreNetwork::load(&zero.join("score.smxn")).unwrap();
    let data = Dataset::load(&f.ring()).unwrap();
    let sched = schedule::make_schedule(&data).unwrap();
    let init = ScoreNetwork::with_arch(2, ScoreArch::with_widths(&[16, 16]), sched, scoremix::rng::derive_seed(4, 0));
    assert_eq!(net, init);
}

#[test]
fn train_score_rejects_missing_data() {
    let f = Fixture::new();
    let err = fails(&["train-score", "--data", s(&f.path("missing.smxd")), "--out", s(&f.path("o"))], 2);
    assert!(err.contains("missing.smxd"), "{err}");
    fails(&["train-score", "--steps", "many", "--out", s(&f.path("o"))], 2);
}

#[test]
fn augment_smoke_rerun_and_errors() {
    let f = Fixture::new();
    let out = f.path("aug");
    let stdout = ok(&[
        "augment", "--data", s(&f.ring()), "--checkpoint", s(&f.score()), "--mu", "1", "--seed", "3",
        "--out", s(&out),
    ]);
    assert!(stdout.contains("oracle density gain"), "{stdout}");
    let aug = Dataset::load(&out.join("augmented.smxd")).unwrap();
    assert_eq!(aug.len(), 32);
    assert_eq!(scoremix::augment::load_smxa(&out.join("audit.smxa")).unwrap().len(), 32);
    let again = f.path("aug2");
    ok(&["augment", "--config", s(&out.join("config.cfg")), "--out", s(&again)]);
    assert_eq!(read(out.join("augmented.smxd")), read(again.join("augmented.smxd")));
    assert_eq!(read(out.join("audit.smxa")), read(again.join("audit.smxa")));

    let analytic = f.path("aug_analytic");
    ok(&["augment", "--data", s(&f.ring()), "--field", "analytic", "--mu", "0.5", "--out", s(&analytic)]);
    assert_eq!(Dataset::load(&analytic.join("augmented.smxd")).unwrap().len(), 16);

    let err = fails(&["augment", "--data", s(&f.ring()), "--out", s(&f.path("x"))], 2);
    assert!(err.contains("checkpoint"), "{err}");
    fails(&["augment", "--data", s(&f.ring()), "--field", "analytic", "--mu", "-1", "--out", s(&f.path("x"))], 2);
}

#[test]
fn train_gan_smoke_rerun_and_errors() {
    let f = Fixture::new();
    let out = f.path("gan");
    let (ring, score) = (f.ring(), f.score());
    let mut args = vec![
        "train-gan", "--data", s(&ring), "--checkpoint", s(&score), "--pipeline",
        "unconditional_aug_real", "--mu", "1", "--epochs", "10", "--seed", "2", "--out", s(&out),
    ];
    args.extend(SMALL_GAN);
    ok(&args);
    for name in ["trace.csv", "best.smxg", "final.smxg", "trace.svg", "config.cfg"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let trace = String::from_utf8(read(out.join("trace.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2);
    let again = f.path("gan2");
    ok(&["train-gan", "--config", s(&out.join("config.cfg")), "--out", s(&again)]);
    for name in ["trace.csv", "best.smxg", "final.smxg"] {
        assert_eq!(read(out.join(name)), read(again.join(name)), "{name}");
    }
    scoremix::gan::GanModel::load(&out.join("best.smxg")).unwrap();

    fails(&["train-gan", "--data", s(&f.ring()), "--pipeline", "cyclegan", "--out", s(&f.path("x"))], 2);
    fails(&["train-gan", "--data", s(&f.ring()), "--mu", "SOMETIMES", "--out", s(&f.path("x"))], 2);
}

#[test]
fn ablate_mu_smoke_rerun_and_errors() {
    let f = Fixture::new();
    let out = f.path("ablate");
    let ring = f.ring();
    let mut args = vec![
        "ablate-mu", "--data", s(&ring), "--field", "analytic", "--mus", "0,1,GROWING",
        "--seeds", "0,1", "--epochs", "10", "--out", s(&out),
    ];
    args.extend(SMALL_GAN);
    let stdout = ok(&args);
    assert!(stdout.contains("non-increasing in mu:"), "{stdout}");
    assert!(stdout.contains("GROWING worse:"), "{stdout}");
    let csv = String::from_utf8(read(out.join("ablation.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(out.join("ablation.svg").exists());
    let again = f.path("ablate2");
    ok(&["ablate-mu", "--config", s(&out.join("config.cfg")), "--out", s(&again)]);
    assert_eq!(read(out.join("ablation.csv")), read(again.join("ablation.csv")));

    fails(&["ablate-mu", "--data", s(&f.ring()), "--mus", "0,x", "--out", s(&f.path("x"))], 2);
    fails(&["ablate-mu", "--data", s(&f.ring()), "--seeds", "", "--out", s(&f.path("x"))], 2);
}

#[test]
fn eval_smoke_rerun_and_errors() {
    let f = Fixture::new();
    let out = f.path("eval");
    let stdout = ok(&["eval", "--samples", s(&f.ring()), "--reference", "ring8", "--out", s(&out)]);
    assert!(stdout.to_lowercase().contains("frechet"), "{stdout}");
    let again = f.path("eval2");
    ok(&["eval", "--config", s(&out.join("config.cfg")), "--samples", s(&f.ring()), "--out", s(&again)]);
    assert_eq!(read(out.join("report.csv")), read(again.join("report.csv")));

    let bad = f.path("bad.smxd");
    std::fs::write(&bad, "SMXD 9 2 1 0\n0 0\n").unwrap();
    fails(&["eval", "--samples", s(&bad), "--out", s(&f.path("x"))], 2);
    fails(&["eval", "--samples", s(&f.ring()), "--reference", "gauss1:0.5:3", "--out", s(&f.path("x"))], 2);
}

#[test]
fn inputs_are_not_modified() {
    let f = Fixture::new();
    let data = f.ring();
    let before = read(&data);
    ok(&["eval", "--samples", s(&data), "--reference", "ring8", "--out", s(&f.path("e"))]);
    ok(&["augment", "--data", s(&data), "--field", "analytic", "--mu", "1", "--out", s(&f.path("a"))]);
    assert_eq!(read(&data), before);
}
