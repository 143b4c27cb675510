//! Whole runs through the library entry point.

mod support;

use jungle::coupler::ChannelKind;
use jungle::msglayer::EventKind;
use support::*;

fn final_snap(out: &std::path::Path) -> Vec<u8> {
    std::fs::read(out.join("final.snap")).unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "s.toml", &spread("ibis", 6));
    let a = run_quietly(&s, &dir.path().join("a"), Some(11));
    let b = run_quietly(&s, &dir.path().join("b"), Some(11));
    let c = run_quietly(&s, &dir.path().join("c"), Some(12));
    for o in [&a, &b, &c] {
        assert!(o.error.is_none(), "{:?}", o.error);
    }
    assert_eq!(final_snap(&dir.path().join("a")), final_snap(&dir.path().join("b")));
    assert_ne!(final_snap(&dir.path().join("a")), final_snap(&dir.path().join("c")));
}

#[test]
fn channel_does_not_change_the_answer() {
    let dir = tempfile::tempdir().unwrap();
    let local = scenario(dir.path(), "inproc.toml", &spread("inproc", 8));
    let remote = scenario(dir.path(), "ibis.toml", &spread("ibis", 8));
    let a = run_quietly(&local, &dir.path().join("inproc"), Some(5));
    let b = run_quietly(&remote, &dir.path().join("ibis"), Some(5));
    assert!(a.error.is_none() && b.error.is_none(), "{:?} {:?}", a.error, b.error);
    assert_eq!(a.drift.unwrap().to_bits(), b.drift.unwrap().to_bits());
    assert_eq!(final_snap(&dir.path().join("inproc")), final_snap(&dir.path().join("ibis")));

    let st = read_status(&dir.path().join("ibis"));
    assert!(st.workers.iter().all(|w| w.channel == ChannelKind::Ibis && w.calls > 0));
    let st = read_status(&dir.path().join("inproc"));
    assert!(st.workers.iter().all(|w| w.channel == ChannelKind::Inproc));
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_quietly(&bundled("local-all.toml"), &out, None);
    assert!(o.error.is_none(), "{:?}", o.error);
    assert_eq!(o.steps, 20);
    for f in ["snapshot-000010.snap", "snapshot-000020.snap", "final.snap", "energy.tsv", "status.json", "daemon.endpoint"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let energy = std::fs::read_to_string(out.join("energy.tsv")).unwrap();
    // header, the initial state, then one row per step
    assert_eq!(energy.lines().count(), 22);
    assert!(energy.lines().nth(1).unwrap().starts_with("0\t"));
    let st = read_status(&out);
    assert_eq!(st.schema, "jungle-status/1");
    assert_eq!(st.energy.unwrap().steps, 20);
    assert!(!st.jobs.is_empty());
    for j in &st.jobs {
        for ext in ["out", "err"] {
            assert!(out.join("logs").join(format!("{}.{ext}", j.id)).is_file(), "{} {ext}", j.id);
        }
    }
}

#[test]
fn expired_reservation_ends_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_quietly(&bundled("reservation-expiry.toml"), &out, None);
    assert_eq!(o.exit_code(), 3, "{:?}", o.error);
    assert!(o.steps < 1000);
    let st = read_status(&out);
    assert!(st.membership.iter().any(|e| e.kind == EventKind::Died));
    assert!(st.jobs.iter().any(|j| j.reason.as_deref() == Some("reservation expired")));
}

#[test]
fn bad_scenarios_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "bad.toml", &spread("ibis", 4).replace("\"0.05 pc\"", "\"0.05 kg\""));
    let err = jungle_cli::run::run(&jungle_cli::run::RunOptions::new(&s, dir.path().join("o")), std::io::sink()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}
