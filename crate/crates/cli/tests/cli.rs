use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use serde_json::{json, Value};
use twinlod::broker::{ContextBroker, HttpBrokerClient};
use twinlod::entity::{Entity, Patch};
use twinlod::stack::SERVICES;

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config/stack.json")
}

fn env_key(service: &str) -> String {
    format!("TWINLOD_PORT_{}", service.to_uppercase().replace('-', "_"))
}

fn twinlod(data: &tempfile::TempDir) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_twinlod"));
    cmd.arg("--config").arg(config());
    cmd.env("TWINLOD_DATA_DIR", data.path());
    for s in SERVICES {
        cmd.env(env_key(s), "0");
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped()).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Served {
    child: Child,
    urls: BTreeMap<String, String>,
    lines: Vec<String>,
}

impl Served {
    fn start(data: &tempfile::TempDir) -> Served {
        let mut child = twinlod(data)
            .arg("serve")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut out = BufReader::new(child.stdout.take().unwrap());
        let mut lines = Vec::new();
        let mut urls = BTreeMap::new();
        loop {
            let mut line = String::new();
            assert!(out.read_line(&mut line).unwrap() > 0, "serve exited early: {lines:?}");
            let line = line.trim().to_string();
            let parts: Vec<&str> = line.split_whitespace().collect();
            if let [_, name, url] = parts[..] {
                urls.insert(name.to_string(), url.to_string());
            }
            let done = line.ends_with("services ready");
            lines.push(line);
            if done {
                break;
            }
        }
        Served { child, urls, lines }
    }

    fn port(&self, service: &str) -> String {
        self.urls[service].rsplit(':').next().unwrap().to_string()
    }

    /// An `inspect` invocation pointed at this server's ports.
    fn inspect(&self, data: &tempfile::TempDir, args: &[&str]) -> Output {
        let mut cmd = twinlod(data);
        for s in SERVICES {
            cmd.env(env_key(s), self.port(s));
        }
        cmd.arg("inspect").args(args);
        run(&mut cmd)
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn serve_reports_every_service_ready() {
    let data = tempfile::tempdir().unwrap();
    let served = Served::start(&data);
    assert_eq!(served.lines.last().unwrap(), "6 services ready");
    for s in SERVICES {
        assert!(
            served
                .lines
                .iter()
                .any(|l| l.starts_with(&format!("ready {s} http://"))),
            "{s}: {:?}",
            served.lines
        );
    }
}

#[test]
fn duplicate_port_in_config_fails_before_serving() {
    let data = tempfile::tempdir().unwrap();
    let o = run(twinlod(&data)
        .env("TWINLOD_PORT_ODP", "47011")
        .env("TWINLOD_PORT_IOT_AGENT", "47011")
        .arg("serve"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("47011"), "{}", stderr(&o));
}

#[test]
fn occupied_port_is_a_service_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let data = tempfile::tempdir().unwrap();
    let o = run(twinlod(&data).env("TWINLOD_PORT_URBAN_BROKER", &port).arg("serve"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("urban-broker") && err.contains(&port), "{err}");
}

#[test]
fn missing_policy_file_is_a_config_error() {
    let data = tempfile::tempdir().unwrap();
    let missing = data.path().join("no-such-policies.json");
    let o = run(twinlod(&data).env("TWINLOD_POLICIES", &missing).arg("serve"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no-such-policies.json"), "{}", stderr(&o));
}

#[test]
fn malformed_env_override_is_a_config_error() {
    let data = tempfile::tempdir().unwrap();
    let o = run(twinlod(&data).env("TWINLOD_PORT_ODP", "not-a-port").arg("serve"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn scenario_passes_and_writes_report() {
    let data = tempfile::tempdir().unwrap();
    let report = data.path().join("report.json");
    let o = run(twinlod(&data).arg("scenario").arg("--report").arg(&report));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], json!(true));
    assert_eq!(r["datasets"][0]["name"], json!("urn:ngsi-ld:OffStreetParking:1"));
    assert!(r["timing"]["total_ms"].is_number());
}

#[test]
fn scenario_with_portal_down_names_it() {
    let data = tempfile::tempdir().unwrap();
    let o = run(twinlod(&data).env("TWINLOD_DISABLED", "odp").arg("scenario"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("odp"), "{}", stderr(&o));
}

#[test]
fn unknown_scenario_file_is_a_config_error() {
    let data = tempfile::tempdir().unwrap();
    let o = run(twinlod(&data)
        .arg("scenario")
        .arg("--scenario")
        .arg(data.path().join("nope.json")));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn wait_until(mut f: impl FnMut() -> bool) -> bool {
    for _ in 0..100 {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    false
}

#[test]
fn inspect_reads_a_running_stack() {
    let data = tempfile::tempdir().unwrap();
    let served = Served::start(&data);

    let rt = tokio::runtime::Runtime::new().unwrap();
    let broker = HttpBrokerClient::new(served.urls["parking-broker"].clone());
    let parking = Entity::from_json(&json!({
        "id": "urn:ngsi-ld:OffStreetParking:9",
        "type": "OffStreetParking",
        "name": {"type": "Property", "value": "Parking 9"},
        "availableSpotNumber": {"type": "Property", "value": 40},
        "location": {"type": "GeoProperty", "value": {"type": "Point", "coordinates": [40.4, -3.7]}}
    }))
    .unwrap();
    rt.block_on(broker.create_entity(&parking)).unwrap();
    const UPDATES: i64 = 4;
    for k in 0..UPDATES {
        let patch = json!({"availableSpotNumber": {"type": "Property", "value": 39 - k}});
        rt.block_on(broker.update_attributes(parking.id(), &Patch::from_json(&patch).unwrap()))
            .unwrap();
    }

    let history_rows = || {
        let o = served.inspect(&data, &["history", "urn:ngsi-ld:OffStreetParking:9"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v.as_array().unwrap().len()
    };
    // One snapshot per notification, one row per attribute.
    let want = (1 + UPDATES as usize) * 3;
    assert!(
        wait_until(|| history_rows() >= want),
        "history stuck at {}",
        history_rows()
    );
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(history_rows(), want);

    assert!(wait_until(|| {
        let o = served.inspect(&data, &["dcat", "urn:ngsi-ld:OffStreetParking:9"]);
        o.status.success() && String::from_utf8_lossy(&o.stdout).contains("Parking 9")
    }));

    let o = served.inspect(&data, &["datasets"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("urn:ngsi-ld:OffStreetParking:9"));

    let o = served.inspect(
        &data,
        &["entities", "--broker", "parking", "--type", "OffStreetParking"],
    );
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["id"], json!("urn:ngsi-ld:OffStreetParking:9"));
    assert_eq!(v[0]["availableSpotNumber"], json!(36));

    let o = served.inspect(&data, &["entities", "--type", "Vehicle"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap(), json!([]));

    let o = served.inspect(&data, &["dcat", "no-such-dataset"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn inspect_without_a_stack_is_a_service_failure() {
    let data = tempfile::tempdir().unwrap();
    let closed = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut cmd = twinlod(&data);
    cmd.env("TWINLOD_PORT_ODP", closed.to_string())
        .args(["inspect", "datasets"]);
    let o = run(&mut cmd);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
