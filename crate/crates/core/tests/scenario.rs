use std::path::PathBuf;

use twinlod::stack::{Stack, StackConfig, ODP};
use twinlod::twin::{report_without_timing, run_scenario, ScenarioConfig, TwinError};

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

fn stack_config() -> StackConfig {
    StackConfig::load(&config_dir().join("stack.json"))
        .unwrap()
        .with_ephemeral_ports()
}

fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&config_dir().join("scenarios").join(name)).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn use_case_scenario_end_to_end() {
    let stack = Stack::start(stack_config()).await.unwrap();
    let report = run_scenario(&stack, &scenario("use_case.json")).await.unwrap();
    stack.shutdown().await;

    assert!(report.passed, "{:#?}", report.failed_checks());
    assert_eq!(report.datasets.len(), 1);
    assert_eq!(report.datasets[0].name, "urn:ngsi-ld:OffStreetParking:1");
    assert_eq!(report.datasets[0].title, "Parking 1");
    assert_eq!(report.actuation.opened, vec!["urn:ngsi-ld:ParkingSpot:123"]);
    assert_eq!(report.actuation.payloads, vec!["spot-123@open"]);
    assert_eq!(report.responses.len(), 1);
    assert_eq!(report.responses[0].response, "urn:ngsi-ld:ResponseParking:12345");
    assert_eq!(
        report.responses[0].target.as_deref(),
        Some("urn:ngsi-ld:OffStreetParking:1")
    );
    assert!(report.responses[0].distance_m.unwrap() < 1.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn portal_down_is_reported_by_name() {
    let mut cfg = stack_config();
    cfg.disabled = vec![ODP.to_string()];
    let stack = Stack::start(cfg).await.unwrap();
    let err = run_scenario(&stack, &scenario("use_case.json")).await.unwrap_err();
    stack.shutdown().await;
    assert_eq!(err, TwinError::ServiceUnavailable("odp".into()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn medium_scenario_is_reproducible() {
    let cfg = scenario("medium.json");
    let mut reports = Vec::new();
    for _ in 0..2 {
        let stack = Stack::start(stack_config()).await.unwrap();
        let r = run_scenario(&stack, &cfg).await.unwrap();
        stack.shutdown().await;
        assert!(r.passed, "{:#?}", r.failed_checks());
        reports.push(report_without_timing(&r));
    }
    assert_eq!(
        serde_json::to_string_pretty(&reports[0]).unwrap(),
        serde_json::to_string_pretty(&reports[1]).unwrap()
    );
}
