use zta::harness::scenario::{builtin, run_isolated};

async fn run(name: &str) -> zta::harness::ScenarioReport {
    let s = builtin(name).expect("builtin scenario");
    let report = run_isolated(&s).await.expect("environment launches");
    println!("{report}");
    report
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn happy_path_passes() {
    assert!(run("happy_path").await.passed());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn kill_switch_propagates_within_two_polls() {
    let r = run("kill_switch_propagation").await;
    assert!(r.passed());
    let deny_ms = r.elapsed_ms(4).unwrap();
    let teardown_ms = r.elapsed_ms(6).unwrap();
    assert!(deny_ms <= 2000, "deny after {deny_ms} ms");
    assert!(teardown_ms <= 2000, "tunnel closed after {teardown_ms} ms");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn impossible_travel_scenario_is_deterministic() {
    let first = run("impossible_travel_london_nyc").await;
    let second = run("impossible_travel_london_nyc").await;
    assert!(first.passed() && second.passed());
    assert_eq!(first.reasons(), second.reasons());
}
