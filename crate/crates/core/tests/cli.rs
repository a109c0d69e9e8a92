use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fusion-counting"));
    c.env("FC_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, count: &str, seed: &str) {
    let o = run(&["synth", "--out", s(dir), "--count", count, "--size", "32x32", "--seed", seed, "--people", "2..6"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const CONFIG: &str = "# short run\nepochs = 2\nlr = 0.001\nlr_min = 0.00001\nbatch_size = 4\nseed = 3\n";

#[test]
fn synth_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "8", "1");
    synth(&b, "8", "1");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 32);
    assert_eq!(ta, tb);
}

#[test]
fn train_eval_plot_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8", "2");
    let cfg = t.path().join("toy.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let ckpt = t.path().join("model.fcck");

    let o = run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let log = t.path().join("train_log.csv");
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 3);
    assert!(log_text.starts_with("epoch,l_fusion,l_count,l_total,lambda1,lambda2,lr,wall_ms\n"));

    let report = t.path().join("metrics.csv");
    let fused = t.path().join("fused");
    let o = run(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report), "--dump-fused", s(&fused),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(
        lines[0],
        "image,psnr,ssim,qabf,cc,scd,sd,ag,sf,game0,game1,game2,game3,rmse"
    );
    assert!(lines[9].starts_with("summary,"));
    for line in &lines[1..] {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{line}");
    }
    assert_eq!(fs::read_dir(&fused).unwrap().count(), 8);

    let svg = t.path().join("curves.svg");
    let o = run(&["plot", "--log", s(&log), "--out", s(&svg)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 5);
}

#[test]
fn train_is_reproducible_and_mode_override_applies() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "4", "5");
    let cfg = t.path().join("toy.cfg");
    fs::write(&cfg, CONFIG).unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let ckpt = t.path().join(format!("m{k}.fcck"));
        let log = t.path().join(format!("log{k}.csv"));
        let o = run(&[
            "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--mode", "series", "--log", s(&log),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(&ckpt).unwrap(), fs::read(&log).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let params = fusion_counting::load_checkpoint(&t.path().join("m0.fcck")).unwrap();
    assert_eq!(params.mode(), fusion_counting::Mode::Series);
}

#[test]
fn plot_thirty_rows() {
    let t = tempfile::tempdir().unwrap();
    let mut log = String::from("epoch,l_fusion,l_count,l_total,lambda1,lambda2,lr,wall_ms\n");
    for e in 1..=30 {
        let f = 100.0 / e as f64;
        log.push_str(&format!("{e},{f},{},{},1.1,0.9,0.001,0\n", 5.0 - e as f64 * 0.1, f + 5.0));
    }
    let (lp, out) = (t.path().join("log.csv"), t.path().join("c.svg"));
    fs::write(&lp, log).unwrap();
    assert!(run(&["plot", "--log", s(&lp), "--out", s(&out)]).status.success());
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 30);
    }
}

#[test]
fn attack_and_advtrain() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "4", "6");
    let cfg = t.path().join("toy.cfg");
    fs::write(&cfg, "epochs = 1\nlr = 0.001\nlr_min = 0.00001\n").unwrap();
    let ckpt = t.path().join("adv.fcck");
    let o = run(&[
        "advtrain", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--eps", "8", "--alpha", "2",
        "--iters", "2", "--target", "infrared",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let attacked = t.path().join("attacked");
    let o = run(&["attack", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&attacked), "--iters", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(attacked.join("attack_report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "sample,clean_loss,attacked_loss,linf");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let f: Vec<&str> = row.split(',').collect();
        let linf: f64 = f[3].parse().unwrap();
        assert!(linf <= 20.0 / 255.0 + 1e-12, "{row}");
    }
    let samples = fusion_counting::data::read_dataset(&attacked).unwrap();
    let clean = fusion_counting::data::read_dataset(&data).unwrap();
    for (a, c) in samples.iter().zip(&clean) {
        assert_eq!(a.points, c.points);
        assert_eq!(a.gt_density, c.gt_density);
    }

    let report = t.path().join("m.csv");
    let o = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--attack", "--iters", "2", "--report", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--out", "x", "--count", "1", "--size", "64"]).status.code(), Some(2));

    let v = run(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));

    let missing = t.path().join("nope");
    let o = run(&["eval", "--ckpt", s(&missing), "--data", s(&missing), "--report", s(&t.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing file"));

    let bad = t.path().join("bad.cfg");
    fs::write(&bad, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = run(&["train", "--data", s(t.path()), "--config", s(&bad), "--out", s(&t.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = run(&["synth", "--out", s(&t.path().join("d")), "--count", "1", "--size", "40x40"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bin().env("FC_THREADS", "zero").args(["plot", "--log", "a", "--out", "b"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
