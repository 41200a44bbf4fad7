mod common;

use std::fs::{self, File};
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stream_qif::io::{read_records, write_long_csv, StateFile, StateLock};
use stream_qif::{Batch, BasisSet, Family, ModelSpec, QMode, SolverConfig, StreamEngine};

const BIN: &str = env!("CARGO_BIN_EXE_stream-qif");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn")
}

fn write_batch(path: &Path, group: &[Batch]) {
    write_long_csv(File::create(path).unwrap(), &[group.to_vec()]).unwrap();
}

fn fit_stream(dir: &Path, state: &Path, group: &[Batch], init: bool, extra: &[&str]) -> Output {
    let csv = dir.join(format!("batch{}.csv", group[0].batch_index));
    write_batch(&csv, group);
    let t = group[0].t.to_string();
    let mut args = vec![
        "fit-stream",
        "--state",
        state.to_str().unwrap(),
        "--batch",
        csv.to_str().unwrap(),
        "--t",
        &t,
        "--q",
        "0.5",
    ];
    if init {
        args.push("--init");
    }
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn two_invocations_match_one_process() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let by_time = common::random_stream(&mut rng, Family::GaussianIdentity, 12, 2, 4, 3);

    let out = fit_stream(dir.path(), &state, &by_time[0], true, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = fit_stream(dir.path(), &state, &by_time[1], false, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let persisted = StateFile::load(&state).unwrap().engine;

    let model = ModelSpec {
        family: Family::GaussianIdentity,
        p: 3,
        basis: BasisSet::Ar1,
    };
    let mut eng = StreamEngine::init(&by_time[0], 1.0, model, QMode::Fixed(0.5), SolverConfig::default()).unwrap();
    eng.update(&by_time[1], 2.0).unwrap();
    for (a, b) in persisted.beta().iter().zip(eng.beta()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    // report rows: header + 3 coefficients
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("2,2,x1,") || text.lines().nth(1).unwrap().starts_with("2,2.0,x1,"));
}

#[test]
fn rejects_non_increasing_time_and_config_change() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut by_time = common::random_stream(&mut rng, Family::GaussianIdentity, 10, 2, 3, 2);
    assert!(fit_stream(dir.path(), &state, &by_time[0], true, &[]).status.success());

    // --init refuses to clobber
    let again = fit_stream(dir.path(), &state, &by_time[0], true, &[]);
    assert_eq!(again.status.code(), Some(2));

    for b in &mut by_time[1] {
        b.t = 1.0;
    }
    let out = fit_stream(dir.path(), &state, &by_time[1], false, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("must exceed"));

    for b in &mut by_time[1] {
        b.t = 2.0;
    }
    let out = fit_stream(dir.path(), &state, &by_time[1], false, &["--basis", "independence"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differ"));
}

#[test]
fn state_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state.json");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let by_time = common::random_stream(&mut rng, Family::BernoulliLogit, 20, 2, 3, 2);
    let model = ModelSpec {
        family: Family::BernoulliLogit,
        p: 2,
        basis: BasisSet::Ar1,
    };
    let mut eng =
        StreamEngine::init(&by_time[0], 1.0, model, QMode::Adaptive(vec![0.3, 0.6]), SolverConfig::default()).unwrap();
    eng.update(&by_time[1], 2.0).unwrap();
    let file = StateFile::new(eng).unwrap();
    file.save(&state).unwrap();
    let bytes = fs::read(&state).unwrap();
    let back = StateFile::load(&state).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let tampered = String::from_utf8(bytes).unwrap().replacen("\"format_version\": 1", "\"format_version\": 9", 1);
    let err = StateFile::from_bytes(tampered.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("s.json");
    let held = StateLock::acquire(&state).unwrap();
    assert!(StateLock::acquire(&state).is_err());
    drop(held);
    assert!(StateLock::acquire(&state).is_ok());
}

#[test]
fn ingest_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "subject_id,batch_index,t,obs_index,y,x1\na,1,1,1,2,1\n").unwrap();
    let state = dir.path().join("st.json");
    let out = run(&[
        "fit-stream",
        "--state",
        state.to_str().unwrap(),
        "--batch",
        csv.to_str().unwrap(),
        "--t",
        "1",
        "--init",
        "--family",
        "logit",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    fs::write(&csv, "subject_id,batch_index,t,obs_index,y,x1\n").unwrap();
    let out = run(&["fit-offline", "--data", csv.to_str().unwrap(), "--q", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));

    let out = run(&["fit-stream", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn offline_subcommand_reports_last_batch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("all.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let by_time = common::random_stream(&mut rng, Family::PoissonLog, 15, 3, 3, 2);
    write_long_csv(File::create(&csv).unwrap(), &by_time).unwrap();
    let (recs, p) = read_records(File::open(&csv).unwrap()).unwrap();
    assert_eq!((recs.len(), p), (15 * 3 * 3, 2));
    let out = run(&["fit-offline", "--data", csv.to_str().unwrap(), "--q", "0.5", "--family", "poisson"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("3,3"));
}

#[test]
fn simulate_writes_data_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("d.json");
    fs::write(
        &design,
        r#"{"family":"gaussian_identity","m":20,"b":4,"n_j":3,"beta_path":"linear_sine",
            "sigma2":4.0,"rho":0.8,"seed":9,"replicates":4,"q":{"fixed":0.5}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["simulate", "--design", design.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "coefficient,rmse,ese,bias,cp,len");
    assert_eq!(metrics.lines().count(), 4);
    let (recs, _) = read_records(File::open(out_dir.join("data.csv")).unwrap()).unwrap();
    assert_eq!(recs.len(), 20 * 4 * 3);
}
