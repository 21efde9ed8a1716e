use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n=300
clf.d_model=16
clf.n_layers=1
clf.n_heads=2
clf_train.epochs=1
lm.d_model=16
lm.n_layers=1
lm.n_heads=2
lm_train.epochs=0
eval.n_unique=4
eval.attempts_per_unique=25
decode.max_len=60
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitsynth"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn divider_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "simulate",
            "--inline",
            "C0 n1 n2 ; L0 n3 n4 ; Sa0 n5 n6 ; Sb0 n7 n8 ; C1 n9 n10 ; OUT IN",
            "--pool",
            "C,L,Sa,Sb,C",
            "--duty",
            "0.5",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let eta: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("efficiency="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((eta - 0.998004).abs() < 1e-3);
    assert!(text.contains("valid=true"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&run(p, &["no-such-command"])), 1);
    assert_eq!(
        code(&run(p, &["gen-data", "--n", "x", "--out", "d.csd"])),
        1
    );
    assert_eq!(code(&run(p, &["--set", "sim.nope=1", "show-config"])), 1);
    assert_eq!(code(&run(p, &["--help"])), 0);

    std::fs::write(p.join("broken.csd"), "#csd\t99\n").unwrap();
    let out = run(p, &["train-clf", "--data", "broken.csd", "--out", "c.ckpt"]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert_eq!(msg.trim_end().lines().count(), 1, "{msg}");
    assert!(msg.contains("99"));

    let out = run(
        p,
        &[
            "simulate",
            "--inline",
            "C0 IN",
            "--pool",
            "C,C,L,Sa,Sb",
            "--duty",
            "0.5",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&run(p, &["gen-data", "--n", "20", "--out", "d.csd"])),
        0
    );
    let before = std::fs::read(p.join("d.csd")).unwrap();
    let out = run(
        p,
        &["gen-data", "--n", "30", "--seed", "5", "--out", "d.csd"],
    );
    assert_eq!(code(&out), 1);
    assert_eq!(std::fs::read(p.join("d.csd")).unwrap(), before);
    assert_eq!(
        code(&run(
            p,
            &["--force", "gen-data", "--n", "30", "--seed", "5", "--out", "d.csd"]
        )),
        0
    );
    assert_ne!(std::fs::read(p.join("d.csd")).unwrap(), before);
}

#[test]
fn default_config_file_is_picked_up_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("circuitsynth.conf"), "data.n=12\ndata.seed=3\n").unwrap();
    assert_eq!(code(&run(p, &["gen-data", "--out", "a.csd"])), 0);
    assert_eq!(
        code(&run(p, &["gen-data", "--n", "5", "--out", "b.csd"])),
        0
    );
    let lines = |f: &str| std::fs::read_to_string(p.join(f)).unwrap().lines().count();
    assert_eq!(lines("a.csd"), 13);
    assert_eq!(lines("b.csd"), 6);
}

#[test]
fn untrained_generator_still_gets_a_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.conf"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.conf"];
        all.extend_from_slice(args);
        let out = run(p, &all);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        out
    };
    ok(&["gen-data", "--out", "d.csd"]);
    let out = ok(&["train-clf", "--data", "d.csd", "--out", "clf.ckpt"]);
    assert!(stderr(&out).contains("parameters: "));
    ok(&["train-lm", "--data", "d.csd", "--out", "lm.ckpt"]);
    ok(&["eval", "--lm", "lm.ckpt", "--clf", "clf.ckpt", "--out", "r"]);
    let report = std::fs::read_to_string(p.join("r.report.tsv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 8);
    assert!(row.iter().all(|f| !f.is_empty()));
    assert!(p.join("r.hist.tsv").exists());
    let log = std::fs::read_to_string(p.join("metrics.log")).unwrap();
    assert!(log.contains("# train-clf") && log.contains("# train-lm"));
}
