//! End-to-end run over a started stack: the parking twin publishes, the
//! portal catalogs, the urban twin pulls the data back, actuates spots and
//! answers parking requests. Every step goes through the services' HTTP
//! APIs; in-process handles are only read for quiescence and op logs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    actuate_if_needed, availability, generate, simulate_occupancy, ScenarioConfig, TwinError, World, OFFSTREET_TYPE,
    RESPONSE_TYPE, SPOT_TYPE,
};
use crate::broker::{BrokerError, ContextBroker, HttpBrokerClient, Query};
use crate::entity::{Attribute, EntityId, Patch};
use crate::flow::HistoryRecord;
use crate::iot_agent::HttpIotClient;
use crate::odp::{HttpPortalClient, PortalApi, SearchFilters};
use crate::stack::{self, Stack};
use crate::time::Timestamp;

pub const CONSUMPTION_GRAPH: &str = "consumption";
pub const FETCH_PROCESSOR: &str = "fetch";
const SETTLE: Duration = Duration::from_secs(30);
const RESPONSE_WAIT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: String,
    pub detail: String,
}

impl Check {
    fn new(name: &str, ok: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            status: if ok { "pass" } else { "fail" }.to_string(),
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub name: String,
    pub rows: usize,
    pub metadata_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub title: String,
    pub organization: String,
    pub resources: Vec<ResourceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSummary {
    pub request: String,
    pub response: String,
    pub result: String,
    pub target: Option<String>,
    pub distance_m: Option<f64>,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationSummary {
    pub fraction_before: Option<f64>,
    pub fraction_after: Option<f64>,
    pub opened: Vec<String>,
    pub payloads: Vec<String>,
}

/// Wall-clock data; everything outside this block is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub total_ms: u64,
    pub phases_ms: BTreeMap<String, u64>,
    pub request_latency_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub rng_seed: u64,
    pub counts: BTreeMap<String, u64>,
    pub entities: BTreeMap<String, BTreeMap<String, usize>>,
    pub datasets: Vec<DatasetSummary>,
    pub history: BTreeMap<String, usize>,
    pub actuation: ActuationSummary,
    pub responses: Vec<ResponseSummary>,
    pub flow: Value,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub timing: Timing,
}

impl ScenarioReport {
    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The report as JSON minus the `timing` block, for reproducibility diffs.
pub fn report_without_timing(r: &ScenarioReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report serializes");
    if let Some(o) = v.as_object_mut() {
        o.remove("timing");
    }
    v
}

struct Phases {
    start: Instant,
    last: Instant,
    done: BTreeMap<String, u64>,
}

impl Phases {
    fn new() -> Self {
        let now = Instant::now();
        Phases {
            start: now,
            last: now,
            done: BTreeMap::new(),
        }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        self.done.insert(name.to_string(), (now - self.last).as_millis() as u64);
        self.last = now;
    }
}

async fn settle(stack: &Stack) -> Result<(), TwinError> {
    stack
        .quiesce(SETTLE)
        .await
        .map_err(|_| TwinError::Timeout("stack to settle".into()))
}

fn unavailable(service: &str) -> impl Fn(BrokerError) -> TwinError + '_ {
    move |e| match e {
        BrokerError::Unavailable(_) => TwinError::ServiceUnavailable(service.to_string()),
        other => TwinError::Broker(other),
    }
}

async fn count(b: &dyn ContextBroker, ty: &str) -> Result<usize, BrokerError> {
    Ok(b.query_entities(&Query::by_type(ty)).await?.len())
}

/// Runs the whole pipeline and grades it. Fails early with
/// `ServiceUnavailable(name)` when a service does not answer its health
/// probe.
pub async fn run_scenario(stack: &Stack, cfg: &ScenarioConfig) -> Result<ScenarioReport, TwinError> {
    let started_at = stack.clock.now();
    let mut phases = Phases::new();
    for h in stack.health().await {
        if !h.ready {
            return Err(TwinError::ServiceUnavailable(h.name));
        }
    }
    let world = generate(cfg)?;
    stack.cosmos.processor().set_max_age(Duration::from_secs(cfg.max_age_s));
    phases.mark("health");

    let parking = HttpBrokerClient::new(stack.url(stack::PARKING_BROKER));
    let urban = HttpBrokerClient::new(stack.url(stack::URBAN_BROKER));
    let iot = HttpIotClient::new(stack.url(stack::IOT_AGENT));
    let portal = HttpPortalClient::new(stack.url(stack::ODP));

    for p in &world.parkings {
        parking
            .create_entity(&p.entity)
            .await
            .map_err(unavailable(stack::PARKING_BROKER))?;
    }
    for s in &world.spots {
        urban
            .create_entity(&s.entity)
            .await
            .map_err(unavailable(stack::URBAN_BROKER))?;
        iot.register_device(&s.device).await?;
    }
    settle(stack).await?;
    phases.mark("create");

    let trace = simulate_occupancy(cfg, &world, cfg.steps);
    let mut parking_updates: BTreeMap<EntityId, u64> = BTreeMap::new();
    let mut final_values: BTreeMap<EntityId, Value> = BTreeMap::new();
    let mut spot_updates = 0u64;
    for ev in &trace {
        match ev.device_line() {
            Some(line) => {
                iot.ingest(&line).await?;
                spot_updates += 1;
            }
            None => {
                let patch = Patch::new().with(&ev.attribute, Attribute::property(ev.value.clone()));
                parking
                    .update_attributes(&ev.entity, &patch)
                    .await
                    .map_err(unavailable(stack::PARKING_BROKER))?;
                *parking_updates.entry(ev.entity.clone()).or_default() += 1;
            }
        }
        final_values.insert(ev.entity.clone(), ev.value.clone());
    }
    settle(stack).await?;
    phases.mark("simulate");

    let published = portal
        .package_search(
            "",
            &SearchFilters {
                organization: Some(crate::flow::organization_name(OFFSTREET_TYPE)),
                keyword: None,
            },
        )
        .await?;
    let http = reqwest::Client::new();
    let graph_available = stack.flow.graph(CONSUMPTION_GRAPH).is_some();
    if graph_available {
        for d in &published {
            let url = format!(
                "{}/flow/{CONSUMPTION_GRAPH}/ingress/{FETCH_PROCESSOR}",
                stack.url(stack::FLOW_ENGINE)
            );
            let resp = http
                .post(url)
                .json(&json!({ "dataset": d.name }))
                .send()
                .await
                .map_err(|_| TwinError::ServiceUnavailable(stack::FLOW_ENGINE.into()))?;
            if !resp.status().is_success() {
                return Err(TwinError::ServiceUnavailable(stack::FLOW_ENGINE.into()));
            }
        }
    }
    settle(stack).await?;
    phases.mark("sync");

    let spots_before = urban.query_entities(&Query::by_type(SPOT_TYPE)).await?;
    let outcome = actuate_if_needed(&spots_before, cfg.actuation_threshold, &iot).await?;
    for id in &outcome.opened {
        let line = format!("{}|s|free", super::sim::device_for(id));
        iot.ingest(&line).await?;
    }
    settle(stack).await?;
    let spots_after = urban.query_entities(&Query::by_type(SPOT_TYPE)).await?;
    phases.mark("actuate");

    let mut latencies = Vec::new();
    for r in &world.requests {
        let t0 = Instant::now();
        urban
            .create_entity(&r.entity)
            .await
            .map_err(unavailable(stack::URBAN_BROKER))?;
        let resp_id = EntityId::new(RESPONSE_TYPE, r.entity.id().suffix()).expect("valid id");
        loop {
            match urban.get_entity(&resp_id).await {
                Ok(_) => break,
                Err(BrokerError::NotFound(_)) if t0.elapsed() < RESPONSE_WAIT => {
                    tokio::time::sleep(Duration::from_millis(2)).await
                }
                Err(BrokerError::NotFound(_)) => return Err(TwinError::Timeout(format!("{resp_id}"))),
                Err(e) => return Err(e.into()),
            }
        }
        latencies.push(t0.elapsed().as_millis() as u64);
    }
    settle(stack).await?;
    phases.mark("requests");

    let mut checks = Vec::new();
    let mut datasets = Vec::new();
    for p in &world.parkings {
        let name = p.entity.id().to_string();
        match portal.package_show(&name).await {
            Ok(d) => datasets.push(DatasetSummary {
                name: d.name,
                title: d.title,
                organization: d.owner_org,
                resources: d
                    .resources
                    .iter()
                    .map(|r| ResourceSummary {
                        name: r.name.clone(),
                        rows: r.row_count,
                        metadata_only: r.metadata_only,
                    })
                    .collect(),
            }),
            Err(e) => checks.push(Check::new("dataset_per_parking", false, format!("{name}: {e}"))),
        }
    }
    datasets.sort_by(|a, b| a.name.cmp(&b.name));

    checks.extend(check_publication(&world, &parking_updates, &datasets, &portal).await);
    let history_len = stack.flow.history.len();
    let history_oracle: usize = world
        .parkings
        .iter()
        .map(|p| {
            let notifications = 1 + parking_updates.get(p.entity.id()).copied().unwrap_or(0) as usize;
            notifications * HistoryRecord::from_snapshot(&p.entity, started_at).len()
        })
        .sum();
    checks.push(Check::new(
        "history_matches_oracle",
        history_len == history_oracle,
        format!("{history_len} records, oracle {history_oracle}"),
    ));

    checks.push(check_parking_state(&world, &final_values, &parking).await?);
    if graph_available {
        checks.push(check_urban_offstreet(&parking, &urban).await?);
    }
    checks.push(check_spots(&world, &final_values, &outcome.opened, &spots_after));

    let before = availability(&spots_before);
    let after = availability(&spots_after);
    let monotone = match (before, after) {
        (Some(b), Some(a)) => a >= b && (a - outcome.fraction_after).abs() < 1e-9,
        (None, None) => true,
        _ => false,
    };
    checks.push(Check::new(
        "actuation_monotonic",
        monotone,
        format!("{before:?} -> {after:?}, opened {}", outcome.opened.len()),
    ));

    let (responses, resp_checks) = check_responses(stack, &world, &urban).await?;
    checks.extend(resp_checks);

    let dead = stack.flow.dead_letter.len();
    checks.push(Check::new("dead_letter_empty", dead == 0, format!("{dead} entries")));
    let errors = stack.cosmos.errors();
    checks.push(Check::new("request_errors", errors.is_empty(), errors.join("; ")));

    let mut entities = BTreeMap::new();
    let mut pb = BTreeMap::new();
    pb.insert(OFFSTREET_TYPE.to_string(), count(&parking, OFFSTREET_TYPE).await?);
    entities.insert(stack::PARKING_BROKER.to_string(), pb);
    let mut ub = BTreeMap::new();
    for ty in [OFFSTREET_TYPE, SPOT_TYPE, super::REQUEST_TYPE, RESPONSE_TYPE] {
        ub.insert(ty.to_string(), count(&urban, ty).await?);
    }
    entities.insert(stack::URBAN_BROKER.to_string(), ub);

    let mut counts = BTreeMap::new();
    counts.insert("parkings".into(), world.parkings.len() as u64);
    counts.insert("spots".into(), world.spots.len() as u64);
    counts.insert("requests".into(), world.requests.len() as u64);
    counts.insert("steps".into(), trace.len() as u64);
    counts.insert("parking_updates".into(), parking_updates.values().sum());
    counts.insert("spot_updates".into(), spot_updates);
    counts.insert("datasets".into(), datasets.len() as u64);

    let mut history = BTreeMap::new();
    history.insert("records".into(), history_len);
    history.insert("oracle".into(), history_oracle);

    let flow: BTreeMap<String, Value> = stack
        .flow
        .graphs
        .iter()
        .map(|(name, g)| (name.clone(), json!(g.counters())))
        .collect();

    phases.mark("checks");
    let finished_at = stack.clock.now();
    let passed = checks.iter().all(Check::passed);
    Ok(ScenarioReport {
        scenario: cfg.name.clone(),
        rng_seed: cfg.rng_seed,
        counts,
        entities,
        datasets,
        history,
        actuation: ActuationSummary {
            fraction_before: before,
            fraction_after: after,
            opened: outcome.opened.iter().map(ToString::to_string).collect(),
            payloads: outcome.payloads,
        },
        responses,
        flow: json!(flow),
        checks,
        passed,
        timing: Timing {
            started_at,
            finished_at,
            total_ms: phases.start.elapsed().as_millis() as u64,
            phases_ms: phases.done,
            request_latency_ms: latencies,
        },
    })
}

async fn check_publication(
    world: &World,
    updates: &BTreeMap<EntityId, u64>,
    datasets: &[DatasetSummary],
    portal: &HttpPortalClient,
) -> Vec<Check> {
    let mut bad = Vec::new();
    for p in &world.parkings {
        let id = p.entity.id();
        let Some(d) = datasets.iter().find(|d| d.name == id.as_str()) else {
            bad.push(format!("{id}: no dataset"));
            continue;
        };
        let expected_title = crate::flow::dataset_title(id);
        if d.title != expected_title {
            bad.push(format!("{id}: title {:?}", d.title));
        }
        let occupancy = crate::flow::distribution_title("availableSpotNumber", &expected_title);
        for r in &d.resources {
            let want = if r.metadata_only {
                0
            } else if r.name == occupancy {
                1 + updates.get(id).copied().unwrap_or(0) as usize
            } else {
                1
            };
            if r.rows != want {
                bad.push(format!("{id}/{}: {} rows, oracle {want}", r.name, r.rows));
            }
        }
        if !d.resources.iter().any(|r| r.name == occupancy) {
            bad.push(format!("{id}: no occupancy resource"));
        }
        match portal.dcat_export(id.as_str()).await {
            Ok(xml) => {
                let ok = roxmltree::Document::parse(&xml).is_ok()
                    && xml.contains(&expected_title)
                    && xml.contains(&occupancy);
                if !ok {
                    bad.push(format!("{id}: DCAT export incomplete"));
                }
            }
            Err(e) => bad.push(format!("{id}: DCAT {e}")),
        }
    }
    let extra = datasets.len().saturating_sub(world.parkings.len());
    vec![
        Check::new("portal_rows_match_oracle", bad.is_empty(), bad.join("; ")),
        Check::new(
            "dataset_per_parking",
            extra == 0 && datasets.len() == world.parkings.len(),
            format!("{} datasets", datasets.len()),
        ),
    ]
}

fn spot_status_oracle(
    world: &World,
    finals: &BTreeMap<EntityId, Value>,
    opened: &[EntityId],
) -> BTreeMap<EntityId, String> {
    world
        .spots
        .iter()
        .map(|s| {
            let id = s.entity.id().clone();
            let status = if opened.contains(&id) {
                "free".to_string()
            } else {
                finals
                    .get(&id)
                    .and_then(Value::as_str)
                    .or_else(|| s.entity.attribute("status").and_then(Attribute::as_str))
                    .unwrap_or_default()
                    .to_string()
            };
            (id, status)
        })
        .collect()
}

fn check_spots(
    world: &World,
    finals: &BTreeMap<EntityId, Value>,
    opened: &[EntityId],
    observed: &[crate::entity::Entity],
) -> Check {
    let want = spot_status_oracle(world, finals, opened);
    let got: BTreeMap<EntityId, String> = observed
        .iter()
        .map(|e| {
            (
                e.id().clone(),
                e.attribute("status")
                    .and_then(Attribute::as_str)
                    .unwrap_or_default()
                    .to_string(),
            )
        })
        .collect();
    let diff: Vec<String> = want
        .iter()
        .filter(|(id, s)| got.get(*id) != Some(*s))
        .map(|(id, s)| format!("{id}: want {s}, got {:?}", got.get(id)))
        .collect();
    Check::new(
        "spot_status_matches_trace",
        diff.is_empty() && got.len() == want.len(),
        diff.join("; "),
    )
}

async fn check_parking_state(
    world: &World,
    finals: &BTreeMap<EntityId, Value>,
    parking: &HttpBrokerClient,
) -> Result<Check, TwinError> {
    let mut diff = Vec::new();
    for p in &world.parkings {
        let id = p.entity.id();
        let want = finals
            .get(id)
            .and_then(Value::as_f64)
            .or_else(|| p.entity.attribute("availableSpotNumber").and_then(Attribute::as_f64));
        let e = parking.get_entity(id).await?;
        let got = e.attribute("availableSpotNumber").and_then(Attribute::as_f64);
        if want != got {
            diff.push(format!("{id}: want {want:?}, got {got:?}"));
        }
        if got.is_some_and(|v| v < 0.0 || v > p.capacity as f64) {
            diff.push(format!("{id}: {got:?} outside [0, {}]", p.capacity));
        }
    }
    Ok(Check::new(
        "parking_state_matches_trace",
        diff.is_empty(),
        diff.join("; "),
    ))
}

/// The urban copies of off-street parkings carry the same occupancy and
/// position as the originals.
async fn check_urban_offstreet(parking: &HttpBrokerClient, urban: &HttpBrokerClient) -> Result<Check, TwinError> {
    let originals = parking.query_entities(&Query::by_type(OFFSTREET_TYPE)).await?;
    let copies: BTreeMap<EntityId, crate::entity::Entity> = urban
        .query_entities(&Query::by_type(OFFSTREET_TYPE))
        .await?
        .into_iter()
        .map(|e| (e.id().clone(), e))
        .collect();
    let models = crate::flow::ModelRegistry::builtin();
    let mut diff = Vec::new();
    for o in &originals {
        let Some(c) = copies.get(o.id()) else {
            diff.push(format!("{}: missing in urban broker", o.id()));
            continue;
        };
        let a = o.attribute("availableSpotNumber").and_then(Attribute::as_f64);
        let b = c.attribute("availableSpotNumber").and_then(Attribute::as_f64);
        if a != b {
            diff.push(format!("{}: {a:?} vs {b:?}", o.id()));
        }
        match (o.location(), c.location()) {
            (Some(x), Some(y)) if x.distance_m(&y) < 1e-3 => {}
            (x, y) => diff.push(format!("{}: location {x:?} vs {y:?}", o.id())),
        }
        if let Err(errs) = models.validate(c) {
            diff.push(format!("{}: {}", c.id(), errs.join(", ")));
        }
    }
    Ok(Check::new(
        "urban_offstreet_matches_published",
        diff.is_empty() && copies.len() == originals.len(),
        diff.join("; "),
    ))
}

async fn check_responses(
    stack: &Stack,
    world: &World,
    urban: &HttpBrokerClient,
) -> Result<(Vec<ResponseSummary>, Vec<Check>), TwinError> {
    let wanted: BTreeSet<&EntityId> = world.requests.iter().map(|r| r.entity.id()).collect();
    let log: Vec<_> = stack
        .cosmos
        .processor()
        .op_log()
        .into_iter()
        .filter(|e| wanted.contains(&e.request))
        .collect();
    let mut unsound = Vec::new();
    for entry in &log {
        let best = entry
            .candidates
            .iter()
            .filter(|c| c.available)
            .min_by(|a, b| a.distance_m.total_cmp(&b.distance_m).then_with(|| a.id.cmp(&b.id)));
        match (&entry.decision.target, best) {
            (None, None) => {}
            (Some(t), Some(b)) => {
                let d = entry.position.distance_m(&t.position);
                let rel = (d - t.distance_m).abs() / d.max(f64::MIN_POSITIVE);
                if t.id != b.id || rel > 1e-6 || !entry.candidates.iter().any(|c| c.id == t.id && c.available) {
                    unsound.push(format!("{}: chose {} over {}", entry.request, t.id, b.id));
                }
            }
            (t, b) => unsound.push(format!("{}: target {t:?}, oracle {b:?}", entry.request)),
        }
    }
    let handled: BTreeSet<&EntityId> = log.iter().map(|e| &e.request).collect();

    let mut responses = Vec::new();
    let mut linkage = Vec::new();
    for r in &world.requests {
        let id = EntityId::new(RESPONSE_TYPE, r.entity.id().suffix()).expect("valid id");
        let e = urban.get_entity(&id).await?;
        let target = match e.attribute("refTarget") {
            Some(Attribute::Relationship { object, .. }) => Some(object.to_string()),
            _ => None,
        };
        match e.attribute("refRequest") {
            Some(Attribute::Relationship { object, .. }) if object == r.entity.id() => {}
            other => linkage.push(format!("{id}: refRequest {other:?}")),
        }
        responses.push(ResponseSummary {
            request: r.entity.id().to_string(),
            response: id.to_string(),
            result: e
                .attribute("result")
                .and_then(Attribute::as_str)
                .unwrap_or_default()
                .to_string(),
            target,
            distance_m: e.attribute("distance").and_then(Attribute::as_f64),
            stale: e.attribute("stale").map(Attribute::simple_value) == Some(Value::Bool(true)),
        });
    }
    let checks = vec![
        Check::new("responses_sound", unsound.is_empty(), unsound.join("; ")),
        Check::new(
            "requests_handled_once",
            log.len() == world.requests.len() && handled.len() == world.requests.len(),
            format!("{} decisions for {} requests", log.len(), world.requests.len()),
        ),
        Check::new("response_linkage", linkage.is_empty(), linkage.join("; ")),
    ];
    Ok((responses, checks))
}
