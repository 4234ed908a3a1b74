mod common;

use std::path::Path;
use std::process::Output;

use tokio::net::TcpListener;
use trialworks::agents::{HEURISTIC_V1, RANDOM_V1};
use trialworks::cli::{self, CampaignSpec, CliError, Controller, WatchTarget};
use trialworks::metrics::{parse_rows, serve_metrics, MetricsSink};
use trialworks::orchestrator::server::serve_tcp;
use trialworks::orchestrator::Orchestrator;
use trialworks::protocol::{to_payload, TrialPhase};

async fn tw(args: &[&str]) -> Output {
    tokio::process::Command::new(env!("CARGO_BIN_EXE_tw")).args(args).output().await.unwrap()
}

async fn listen(orch: &Orchestrator) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(serve_tcp(orch.clone(), listener));
    addr
}

fn write_config(dir: &Path, name: &str, doc: &serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[tokio::test]
async fn start_prints_the_trial_id() {
    let dir = tempfile::tempdir().unwrap();
    let (orch, _b) = common::orchestrator(None);
    let addr = listen(&orch).await;
    let cfg = write_config(dir.path(), "duel.json", &to_payload(&common::duel(HEURISTIC_V1, RANDOM_V1, 20, 1)).unwrap());
    let out = tw(&["--orchestrator", &addr, "start", &cfg]).await;
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(orch.trial_ids().contains(&lines[0].to_string()));
}

#[tokio::test]
async fn zero_max_tick_is_an_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = to_payload(&common::duel(HEURISTIC_V1, RANDOM_V1, 20, 1)).unwrap();
    doc["max_tick"] = 0.into();
    let cfg = write_config(dir.path(), "bad.json", &doc);
    let out = tw(&["--orchestrator", "127.0.0.1:1", "start", &cfg]).await;
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_tick"));
}

#[tokio::test]
async fn unreachable_orchestrator_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duel.json", &to_payload(&common::duel(HEURISTIC_V1, RANDOM_V1, 20, 1)).unwrap());
    let out = tw(&["--orchestrator", "127.0.0.1:1", "start", &cfg]).await;
    assert_eq!(out.status.code(), Some(2));
    let out = tw(&["--orchestrator", "127.0.0.1:1", "watch", "--all"]).await;
    assert_eq!(out.status.code(), Some(2));
}

#[tokio::test]
async fn unreadable_logs_exit_6() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.twlog");
    std::fs::write(&empty, b"").unwrap();
    let out = tw(&["replay", empty.to_str().unwrap(), "--summary"]).await;
    assert_eq!(out.status.code(), Some(6));

    let junk = dir.path().join("junk.twlog");
    std::fs::write(&junk, b"\x00\x00\x00\x05hello").unwrap();
    let out = tw(&["replay", junk.to_str().unwrap(), "--rewards", "p0"]).await;
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset 0"));
}

#[tokio::test]
async fn replay_summary_matches_recorded_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (orch, _b) = common::orchestrator(Some(dir.path()));
    let (id, summary) = orch.run_trial(common::duel(HEURISTIC_V1, RANDOM_V1, 600, 9)).await.unwrap();
    let log = summary.log_path.clone().unwrap();
    let out = tw(&["replay", log.to_str().unwrap(), "--summary"]).await;
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains(&format!("ticks {}", summary.total_ticks)));
    assert!(text.contains(&format!("end_reason {}", summary.reason)));
    let recorded = orch.metrics().trial_totals(&id).unwrap();
    for line in text.lines().filter(|l| l.starts_with("total ")) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let total: f64 = parts[2].parse().unwrap();
        assert!(total > -2.0 && total <= 1.0);
        assert_eq!(total, summary.totals[parts[1]]);
        assert_eq!(total, recorded[&summary.implementations[parts[1]]]);
    }

    let out = tw(&["replay", log.to_str().unwrap(), "--rewards", "p0"]).await;
    let ticks: Vec<u64> =
        stdout(&out).lines().map(|l| l.split_whitespace().next().unwrap().parse().unwrap()).collect();
    assert!(ticks.windows(2).all(|w| w[0] < w[1]));
    assert!(!ticks.is_empty());
}

#[tokio::test]
async fn terminate_waits_for_the_end() {
    let (orch, _b) = common::orchestrator(None);
    let addr = listen(&orch).await;
    let id = orch.start_trial(common::duel_with_client(RANDOM_V1, 100)).unwrap();
    common::wait_for(&orch, &id, TrialPhase::WaitingForClients).await;
    let out = tw(&["--orchestrator", &addr, "terminate", &id]).await;
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert_eq!(stdout(&out).trim(), format!("{id} ended client_requested"));
    assert!(orch.trial_state(&id).unwrap().is_ended());

    let again = tw(&["--orchestrator", &addr, "terminate", &id]).await;
    assert_eq!(again.status.code(), Some(5));
    let unknown = tw(&["--orchestrator", &addr, "terminate", "trial-777777"]).await;
    assert_eq!(unknown.status.code(), Some(5));
    let watch = tw(&["--orchestrator", &addr, "watch", "trial-777777"]).await;
    assert_eq!(watch.status.code(), Some(5));
}

#[tokio::test]
async fn watch_prints_one_line_per_transition() {
    let (orch, _b) = common::orchestrator(None);
    let addr = listen(&orch).await;
    let id = orch.start_trial(common::duel_with_client(RANDOM_V1, 100)).unwrap();
    common::wait_for(&orch, &id, TrialPhase::WaitingForClients).await;
    let watcher = tokio::spawn({
        let addr = addr.clone();
        let id = id.clone();
        async move { tw(&["--orchestrator", &addr, "watch", &id]).await }
    });
    // The first line is the state at subscription time.
    tokio::time::sleep(std::time::Duration::from_millis(300)).await;
    orch.terminate_trial(&id, "client_requested").unwrap();
    let out = watcher.await.unwrap();
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(
        lines,
        vec![
            format!("{id} waiting_for_clients -"),
            format!("{id} terminating client_requested"),
            format!("{id} ended client_requested"),
        ]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn sequential_campaign_writes_one_log_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let (orch, _b) = common::orchestrator(Some(dir.path()));
    let mut watcher = Controller::in_process(&orch);
    let watch = tokio::spawn(async move {
        let mut out = Vec::new();
        cli::cmd_watch(&mut watcher, &WatchTarget::All { expect: 3 }, &mut out).await.unwrap();
        String::from_utf8(out).unwrap()
    });
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;

    let mut ctl = Controller::in_process(&orch);
    let spec =
        CampaignSpec { params: common::duel(HEURISTIC_V1, RANDOM_V1, 200, 0), parallel: 1, trials: 3, base_seed: 40 };
    let sink = MetricsSink::default();
    let mut out = Vec::new();
    let report = cli::run_campaign(&mut ctl, &spec, &sink, &mut out).await.unwrap();
    assert_eq!(report.outcomes.len(), 3);
    assert_eq!(report.max_in_flight, 1);
    assert_eq!(report.outcomes.iter().map(|o| o.seed).collect::<Vec<_>>(), vec![40, 41, 42]);
    let logs = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(logs, 3);
    let table = String::from_utf8(out).unwrap();
    assert_eq!(parse_rows(&table), sink.rows());
    assert!(sink.rows().iter().all(|r| r.trials == 3));

    let watched = watch.await.unwrap();
    assert_eq!(watched.lines().filter(|l| l.split_whitespace().nth(1) == Some("ended")).count(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn campaign_rerun_reproduces_the_table() {
    let mut tables = Vec::new();
    for _ in 0..2 {
        let (orch, _b) = common::orchestrator(None);
        let mut ctl = Controller::in_process(&orch);
        let spec = CampaignSpec {
            params: common::duel(HEURISTIC_V1, RANDOM_V1, 300, 0),
            parallel: 4,
            trials: 12,
            base_seed: 1000,
        };
        let mut out = Vec::new();
        let report = cli::run_campaign(&mut ctl, &spec, &MetricsSink::default(), &mut out).await.unwrap();
        assert!(report.max_in_flight <= 4);
        tables.push(trialworks::metrics::render_rows(&report.rows));
    }
    assert_eq!(tables[0], tables[1]);
}

#[tokio::test]
async fn campaign_aborts_on_setup_failure() {
    let (orch, _b) = common::orchestrator(None);
    let mut ctl = Controller::in_process(&orch);
    let spec =
        CampaignSpec { params: common::duel(HEURISTIC_V1, "maddpg_v1", 50, 0), parallel: 2, trials: 5, base_seed: 0 };
    let err = cli::run_campaign(&mut ctl, &spec, &MetricsSink::default(), &mut Vec::new()).await.unwrap_err();
    assert!(matches!(err, CliError::SetupFailed(_)));
    assert_eq!(err.exit_code(), 4);
}

#[tokio::test]
async fn metrics_command_prints_the_table() {
    let (orch, _b) = common::orchestrator(None);
    orch.run_trial(common::duel(HEURISTIC_V1, RANDOM_V1, 100, 3)).await.unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    tokio::spawn(serve_metrics(orch.metrics().clone(), listener));
    let out = tw(&["metrics", "--metrics", &addr]).await;
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let rows = parse_rows(&stdout(&out));
    assert_eq!(rows, orch.metrics().rows());
    assert_eq!(rows.len(), 2);
}
