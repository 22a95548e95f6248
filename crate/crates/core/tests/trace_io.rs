use std::io::BufReader;

use trendskip::*;

fn sample_trace(snapshot: SnapshotPolicy) -> RunTrace {
    let sched = ScheduleSpec::vp(40).build().unwrap();
    let model = OracleModel::GmmEps(MixtureFamily::standard_2d());
    let x = Latent::standard_normal(2, 17);
    let cfg = RunConfig { sigma: 0.03, snapshot, seed: 17, ..Default::default() };
    run_etc(&model, &sched, &x, &cfg).unwrap()
}

#[test]
fn jsonl_round_trip_is_exact() {
    for snap in [SnapshotPolicy::Hashes, SnapshotPolicy::Full] {
        let trace = sample_trace(snap);
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let back = RunTrace::read_jsonl(BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, trace);
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}

#[test]
fn file_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let trace = sample_trace(SnapshotPolicy::Hashes);
    trace.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["config"]["policy"], "etc");
    assert_eq!(RunTrace::load(&path).unwrap(), trace);
}

#[test]
fn trace_contract() {
    let trace = sample_trace(SnapshotPolicy::Hashes);
    trace.validate().unwrap();
    let real = trace.records.iter().filter(|r| r.action == Action::Real).count();
    assert_eq!(real, trace.nfe);
    let ts: Vec<usize> = trace.records.iter().map(|r| r.t).collect();
    assert_eq!(ts, (1..=40).rev().collect::<Vec<_>>());
    assert!(trace.records[..7].iter().all(|r| r.action == Action::Real));
    assert_eq!(trace.records.last().unwrap().action, Action::Real);
}

#[test]
fn playback_reproduces_full_run() {
    let sched = ScheduleSpec::vp(40).build().unwrap();
    let model = OracleModel::GmmEps(MixtureFamily::standard_2d());
    let x = Latent::standard_normal(2, 3);
    let cfg = RunConfig { snapshot: SnapshotPolicy::Full, ..Default::default() };
    let full = run_policy(PolicyKind::Full, &model, &sched, &x, &cfg).unwrap();
    let replay = OracleModel::Playback(PlaybackTable::from_trace(&full).unwrap());
    let again = run_policy(PolicyKind::Full, &replay, &sched, &x, &cfg).unwrap();
    assert_eq!(again.final_latent, full.final_latent);
    assert_eq!(again.records, full.records);
}
