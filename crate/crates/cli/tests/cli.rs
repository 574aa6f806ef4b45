use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volstream::capture::synth::DEFAULT_GROUP_SHARES;
use volstream::geometry::ply::read_ply_file;
use volstream::report::{read_log, SessionReport};
use volstream::segmentation::{BodyGroup, DecimationProfile};

const SCRIPT: &str = r#"
seed = 11
fps = 24
duration_s = 1.0

[[background]]
kind = "box"
min = [-2.0, -2.0, 0.0]
max = [2.0, 2.0, 2.4]
points = 5000
color = [120, 120, 110]
color_jitter = 8

[[cameras]]
id = 0
position = [2.0, 0.0, 1.5]
look_at = [0.0, 0.0, 1.0]
fov_deg = 100.0

[[cameras]]
id = 1
position = [-1.0, 1.7, 1.5]
look_at = [0.0, 0.0, 1.0]
fov_deg = 100.0

[[cameras]]
id = 2
position = [-1.0, -1.7, 1.5]
look_at = [0.0, 0.0, 1.0]
fov_deg = 100.0

[body]
points = 3000
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volstream"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn script(dir: &Path) -> PathBuf {
    let p = dir.join("scene.toml");
    std::fs::write(&p, SCRIPT).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_counts_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["generate", "--script", s(&sc), "--out", s(out), "--seed", "5"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let plys = files_under(&a).into_iter().filter(|p| p.extension().is_some_and(|e| e == "ply")).count();
    assert_eq!(plys, 3 * 24);
    assert!(a.join("manifest.toml").is_file());
    assert!(a.join("run_config.toml").is_file());
    let fa = files_under(&a);
    let fb = files_under(&b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        if x.file_name().unwrap() != "run_config.toml" {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
    }
}

#[test]
fn malformed_script_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.toml");
    std::fs::write(&sc, SCRIPT.replace("fps = 24", "fps = \"fast\"")).unwrap();
    let o = run(&["generate", "--script", s(&sc), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fps"), "{}", stderr(&o));
}

#[test]
fn lossless_stream_from_manifest_snapshots_match() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let gen = dir.path().join("gen");
    assert!(run(&["generate", "--script", s(&sc), "--out", s(&gen)]).status.success());
    let out = dir.path().join("st");
    let o = run(&[
        "stream",
        "--manifest",
        s(&gen.join("manifest.toml")),
        "--out",
        s(&out),
        "--chunk-frames",
        "8",
        "--snapshot-every",
        "1",
        "--change-threshold",
        "0",
        "--socket",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snaps = files_under(&out.join("snapshots"));
    let clients: Vec<_> = snaps.iter().filter(|p| s(p).ends_with("_client.ply")).collect();
    assert_eq!(clients.len(), 3);
    for c in clients {
        let server = PathBuf::from(s(c).replace("_client.ply", "_server.ply"));
        let a = read_ply_file(c).unwrap();
        let b = read_ply_file(&server).unwrap();
        assert!(!a.is_empty());
        assert!(a.same_points(&b), "{}", c.display());
    }
    let records = read_log(&out.join("session.jsonl")).unwrap();
    let r = SessionReport::from_records(&records);
    assert_eq!(r.frames, 24);
}

#[test]
fn repeated_stream_gives_identical_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let mut logs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let o = run(&[
            "stream", "--script", s(&sc), "--out", s(&out), "--bandwidth-mbps", "30", "--seed", "9",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        logs.push((
            std::fs::read(out.join("decisions.jsonl")).unwrap(),
            std::fs::read(out.join("session.jsonl")).unwrap(),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn preset_five_bitrate_follows_weighted_kept_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let mut bytes = Vec::new();
    for preset in ["base", "5"] {
        let out = dir.path().join(preset);
        let o = run(&["stream", "--script", s(&sc), "--out", s(&out), "--preset", preset]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r = SessionReport::from_records(&read_log(&out.join("session.jsonl")).unwrap());
        bytes.push(r.body_points);
    }
    let p5 = DecimationProfile::preset("5").unwrap();
    let expected: f64 = BodyGroup::ALL
        .iter()
        .zip(DEFAULT_GROUP_SHARES)
        .map(|(g, share)| share * p5.ratio(g.parts().next().unwrap()))
        .sum::<f64>()
        / DEFAULT_GROUP_SHARES.iter().sum::<f64>();
    let measured = bytes[1] as f64 / bytes[0] as f64;
    assert!((measured / expected - 1.0).abs() < 0.02, "{measured} vs {expected}");
}

#[test]
fn report_lists_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("bad.jsonl");
    std::fs::write(&log, "{\"event\":\"stage\",\"timestamp_us\":0,\"stage\":\"capture\"}\n").unwrap();
    let o = run(&["report", s(&log)]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("frame") && e.contains("latency_us"), "{e}");
}

#[test]
fn report_writes_csv_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let out = dir.path().join("st");
    assert!(run(&["stream", "--script", s(&sc), "--out", s(&out), "--baseline"]).status.success());
    let rep = dir.path().join("rep");
    let o = run(&[
        "report",
        s(&out.join("session.jsonl")),
        "--baseline",
        s(&out.join("baseline/session.jsonl")),
        "--out",
        s(&rep),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("saving against baseline"));
    for f in ["bandwidth.csv", "latency.csv", "summary.csv", "run_config.toml"] {
        assert!(rep.join(f).is_file(), "{f}");
    }
    let lat = std::fs::read_to_string(rep.join("latency.csv")).unwrap();
    assert!(lat.contains(",end_to_end,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["stream", "--out", s(dir.path())]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let o = run(&["stream", "--script", s(&sc), "--out", s(&dir.path().join("p")), "--preset", "nine"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0,10\n1,abc\n").unwrap();
    assert_eq!(run(&["trace-check", s(&bad)]).status.code(), Some(2));
    let o = run(&["stream", "--script", s(&sc), "--out", s(&dir.path().join("q")), "--trace", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));

    let zero = dir.path().join("zero.csv");
    std::fs::write(&zero, "0,0\n").unwrap();
    let o = run(&["stream", "--script", s(&sc), "--out", s(&dir.path().join("z")), "--trace", s(&zero)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage delivery"), "{}", stderr(&o));
}

#[test]
fn resolved_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let sc = script(dir.path());
    let a = dir.path().join("a");
    let o = run(&["stream", "--script", s(&sc), "--out", s(&a), "--preset", "2", "--bandwidth-mbps", "25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = std::fs::read_to_string(a.join("run_config.toml")).unwrap();
    let b = dir.path().join("b");
    let cfg_b = dir.path().join("cfg.toml");
    std::fs::write(&cfg_b, cfg.replace(s(&a), s(&b))).unwrap();
    let o = run(&["stream", "--config", s(&cfg_b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("session.jsonl")).unwrap(),
        std::fs::read(b.join("session.jsonl")).unwrap()
    );
}
