//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! `PASS`/`FAIL` line each, and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::pin::Pin;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use futures::FutureExt;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use twinlod::access::{AccessControl, ClientCredential, Verb};
use twinlod::broker::{
    Broker, BrokerConfig, DeliveryError, HttpNotifier, Notification, Notifier, RetryPolicy, SubscriptionRequest,
};
use twinlod::entity::{Attribute, Entity, EntityId, Patch, Representation};
use twinlod::flow::{
    csv_rows, dataset_fetch, publish_rows, run_graph, to_smart_model, FlowEnv, FlowRecord, GraphSpec, HistoryStore,
    ModelRegistry, SmartModelRules,
};
use twinlod::geo::GeoPoint;
use twinlod::odp::{HttpPortalClient, Portal, PortalApi};
use twinlod::stack::{Stack, StackConfig, ACCESS_CONTROL, FLOW_ENGINE, ODP, PARKING_BROKER};
use twinlod::time::{system_clock, Timestamp};
use twinlod::twin::{
    generate, nearest_available, report_without_timing, run_scenario, simulate_occupancy, ScenarioConfig, TwinError,
};
use url::Url;

type Outcome = Result<String, String>;
type Run = fn() -> Pin<Box<dyn Future<Output = Outcome> + Send>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

/// Converts any displayable error into a failure message with context.
fn ctx<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{what}: {e}")
}

fn main() {
    let criteria: [(&str, Duration, Run); 8] = [
        ("listing_reproduction", Duration::from_secs(1), || {
            Box::pin(listing_reproduction())
        }),
        ("publication_pipeline", Duration::from_secs(5), || {
            Box::pin(publication_pipeline())
        }),
        ("metadata_only_mode", Duration::from_secs(5), || {
            Box::pin(metadata_only_mode())
        }),
        ("consumption_round_trip", Duration::from_secs(5), || {
            Box::pin(consumption_round_trip())
        }),
        ("nearest_parking_oracle", Duration::from_secs(10), || {
            Box::pin(nearest_parking_oracle())
        }),
        ("notification_law", Duration::from_secs(30), || {
            Box::pin(notification_law())
        }),
        ("access_control", Duration::from_secs(2), || Box::pin(access_control())),
        ("soak_determinism", Duration::from_secs(60), || {
            Box::pin(soak_determinism())
        }),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime");
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = rt.block_on(async {
            match tokio::time::timeout(limit, AssertUnwindSafe(run()).catch_unwind()).await {
                Err(_) => Err(format!("did not finish within {limit:?}")),
                Ok(Err(panic)) => Err(panic_message(panic)),
                Ok(Ok(outcome)) => outcome,
            }
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed < limit {
                Ok(detail)
            } else {
                Err(format!("took {elapsed:?}, limit {limit:?}"))
            }
        });
        match result {
            Ok(detail) => println!(
                "PASS {name} ({} ms, limit {} ms): {detail}",
                elapsed.as_millis(),
                limit.as_millis()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "FAIL {name} ({} ms, limit {} ms): {why}",
                    elapsed.as_millis(),
                    limit.as_millis()
                );
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    rt.shutdown_timeout(Duration::from_secs(1));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    let msg = p
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into());
    format!("panicked: {msg}")
}

// Fixtures --------------------------------------------------------------

const OFFSTREET_LISTING: &str = r#"{
    "id": "urn:ngsi-ld:OffStreetParking:1",
    "type": "OffStreetParking",
    "location": {
        "coordinates": [40.3312618, -3.7574926],
        "type": "Point"
    },
    "availableSpotNumber": 132,
    "@context": [
        "https://raw.githubusercontent.com/smart-data-models/dataModel.Parking/master/context.jsonld"
    ]
}"#;

const SPOT_LISTING: &str = r#"{
    "id": "urn:ngsi-ld:ParkingSpot:123",
    "type": "ParkingSpot",
    "location": {
        "coordinates": [40.405382, -3.6734942],
        "type": "Point"
    },
    "status": "closed",
    "@context": [
        "https://raw.githubusercontent.com/smart-data-models/dataModel.Parking/master/context.jsonld"
    ]
}"#;

const REQUEST_LISTING: &str = r#"{
    "id": "urn:ngsi-ld:RequestParking:12345",
    "type": "RequestParking",
    "location": {
        "coordinates": [40.331262, -3.757495],
        "type": "Point"
    },
    "@context": [
        "https://uri.etsi.org/ngsi-ld/v1/ngsi-ld-core-context.jsonld"
    ]
}"#;

/// The catalog listing with its elided parts removed.
const DCAT_LISTING: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<rdf:RDF
 xmlns:rdf="http://www.w3.org/1999/02/22-rdf-syntax-ns#"
 xmlns:dcat="http://www.w3.org/ns/dcat#"
 xmlns:dct="http://purl.org/dc/terms/">
 <dcat:Dataset>
  <dct:title>
   Parking 1
  </dct:title>
  <dcat:distribution>
   <dcat:Distribution>
    <dct:title>
     Occupancy level of Parking 1
    </dct:title>
   </dcat:Distribution>
  </dcat:distribution>
 </dcat:Dataset>
</rdf:RDF>"#;

const RDF_NS: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#";
const DCAT_NS: &str = "http://www.w3.org/ns/dcat#";
const DCT_NS: &str = "http://purl.org/dc/terms/";

const PARKING_1: &str = "urn:ngsi-ld:OffStreetParking:1";

fn listing(text: &str) -> Value {
    serde_json::from_str(text).expect("listing is JSON")
}

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

fn publication_graph(ckan: Value) -> GraphSpec {
    GraphSpec::default()
        .processor("ingress", "notification_ingress", Value::Null)
        .processor("metadata", "update_ckan_metadata", ckan.clone())
        .processor("ckan", "ngsi_to_ckan", ckan)
        .processor("history", "history_sink", Value::Null)
        .connect("ingress", "metadata")
        .connect("metadata", "ckan")
        .connect("ingress", "history")
}

/// A stack on ephemeral ports, optionally with the publication graph replaced.
async fn start_stack(publication: Option<GraphSpec>) -> Result<(Stack, tempfile::TempDir), String> {
    let dir = tempfile::tempdir().map_err(ctx("tempdir"))?;
    let mut cfg = StackConfig::load(&config_dir().join("stack.json"))
        .map_err(ctx("config"))?
        .with_ephemeral_ports();
    cfg.data_dir = None;
    if let Some(g) = publication {
        let path = dir.path().join("publication.json");
        std::fs::write(&path, serde_json::to_string(&g).unwrap()).map_err(ctx("graph file"))?;
        cfg.graphs.insert("publication".into(), path);
    }
    let stack = Stack::start(cfg).await.map_err(ctx("stack start"))?;
    Ok((stack, dir))
}

async fn token(base: &str, id: &str, secret: &str) -> Result<String, String> {
    let v: Value = reqwest::Client::new()
        .post(format!("{base}/oauth/token"))
        .form(&[
            ("grant_type", "client_credentials"),
            ("client_id", id),
            ("client_secret", secret),
        ])
        .send()
        .await
        .map_err(ctx("token request"))?
        .json()
        .await
        .map_err(ctx("token body"))?;
    v["access_token"]
        .as_str()
        .map(String::from)
        .ok_or_else(|| format!("no token in {v}"))
}

/// Creates Parking 1 on the parking broker and applies the occupancy updates.
async fn drive_parking_1(stack: &Stack) -> Result<(), String> {
    let http = reqwest::Client::new();
    let base = stack.url(PARKING_BROKER);
    let r = http
        .post(format!("{base}/ngsi-ld/v1/entities"))
        .json(&listing(OFFSTREET_LISTING))
        .send()
        .await
        .map_err(ctx("create"))?;
    ensure!(r.status() == 201, "create answered {}", r.status());
    for v in [131, 130] {
        let r = http
            .patch(format!("{base}/ngsi-ld/v1/entities/{PARKING_1}/attrs"))
            .json(&json!({"availableSpotNumber": {"type": "Property", "value": v}}))
            .send()
            .await
            .map_err(ctx("update"))?;
        ensure!(r.status().is_success(), "update to {v} answered {}", r.status());
    }
    stack.quiesce(Duration::from_secs(4)).await.map_err(ctx("quiesce"))
}

/// (element path, trimmed text) for every element carrying text.
fn text_paths(xml: &str) -> Result<BTreeSet<(String, String)>, String> {
    let doc = roxmltree::Document::parse(xml).map_err(ctx("xml"))?;
    let mut out = BTreeSet::new();
    for n in doc.descendants().filter(|n| n.is_element()) {
        let text: String = n.children().filter(|c| c.is_text()).filter_map(|c| c.text()).collect();
        if text.trim().is_empty() {
            continue;
        }
        let mut path: Vec<String> = n
            .ancestors()
            .filter(|a| a.is_element())
            .map(|a| format!("{{{}}}{}", a.tag_name().namespace().unwrap_or(""), a.tag_name().name()))
            .collect();
        path.reverse();
        out.insert((path.join("/"), text.trim().to_string()));
    }
    Ok(out)
}

fn dcat_titles(xml: &str) -> Result<(String, Vec<String>), String> {
    let doc = roxmltree::Document::parse(xml).map_err(ctx("xml"))?;
    let title = |n: roxmltree::Node| {
        n.children()
            .find(|c| c.has_tag_name((DCT_NS, "title")))
            .and_then(|c| c.text())
            .unwrap_or_default()
            .trim()
            .to_string()
    };
    let ds = doc
        .descendants()
        .find(|n| n.has_tag_name((DCAT_NS, "Dataset")))
        .ok_or("no dcat:Dataset")?;
    let dists = ds
        .descendants()
        .filter(|n| n.has_tag_name((DCAT_NS, "Distribution")))
        .map(title)
        .collect();
    Ok((title(ds), dists))
}

// 1 ---------------------------------------------------------------------

async fn listing_reproduction() -> Outcome {
    let broker = Broker::new(Arc::new(HttpNotifier::new()));
    for text in [OFFSTREET_LISTING, SPOT_LISTING, REQUEST_LISTING] {
        let want = listing(text);
        let e = Entity::from_json(&want).map_err(ctx("load"))?;
        let id = broker.create_entity(e).map_err(ctx("create"))?;
        let got = broker.get_entity(&id).map_err(ctx("get"))?.simplified();
        ensure!(got == want, "{id} simplified: {got} != {want}");
        let rendered = broker
            .render_entity(&id, Representation::Simplified)
            .map_err(ctx("render"))?;
        ensure!(rendered == want, "{id} rendered: {rendered}");
        let keys: BTreeSet<&String> = got.as_object().unwrap().keys().collect();
        let want_keys: BTreeSet<&String> = want.as_object().unwrap().keys().collect();
        ensure!(keys == want_keys, "{id} keys {keys:?}");
        let normalized = broker
            .render_entity(&id, Representation::Normalized)
            .map_err(ctx("render"))?;
        let again = Entity::from_json(&normalized).map_err(ctx("reload"))?.simplified();
        ensure!(again == want, "{id} via normalized: {again}");
    }

    // The catalog listing: every titled element it shows must appear in the export.
    let portal = Portal::new(system_clock());
    let env = FlowEnv::new(system_clock())
        .with_portal(Arc::new(portal.clone()))
        .with_history(Arc::new(HistoryStore::in_memory()));
    let g = run_graph(
        &publication_graph(json!({"resource_attribute_whitelist": ["availableSpotNumber"]})),
        &env,
    )
    .map_err(ctx("graph"))?;
    let n = Notification {
        subscription_id: "urn:ngsi-ld:Subscription:listing".into(),
        fired_at: Timestamp::now(),
        entities: vec![Entity::from_json(&listing(OFFSTREET_LISTING)).unwrap()],
        touched: ["availableSpotNumber".to_string(), "location".to_string()].into(),
    };
    g.inject(
        "ingress",
        FlowRecord::from_external(n.to_wire(), Timestamp::now()).unwrap(),
    )
    .await
    .map_err(ctx("inject"))?;
    g.wait_idle().await;
    let export = portal.dcat_export(PARKING_1).map_err(ctx("dcat"))?;
    g.shutdown().await;
    let want = text_paths(DCAT_LISTING)?;
    let got = text_paths(&export)?;
    let missing: Vec<_> = want.difference(&got).collect();
    ensure!(missing.is_empty(), "catalog export lacks {missing:?}");
    Ok(format!(
        "3 entity listings round-trip, catalog listing contained ({} titled elements)",
        want.len()
    ))
}

// 2 ---------------------------------------------------------------------

async fn publication_pipeline() -> Outcome {
    let graph = publication_graph(json!({"resource_attribute_whitelist": ["availableSpotNumber"]}));
    let (stack, _dir) = start_stack(Some(graph)).await?;
    let result = async {
        drive_parking_1(&stack).await?;
        let portal = HttpPortalClient::new(stack.url(ODP));
        let d = portal.package_show(PARKING_1).await.map_err(ctx("package_show"))?;
        ensure!(d.name == PARKING_1, "name {}", d.name);
        ensure!(d.title == "Parking 1", "title {:?}", d.title);
        ensure!(d.resources.len() == 1, "{} resources", d.resources.len());
        let r = &d.resources[0];
        ensure!(r.name == "Occupancy level of Parking 1", "resource {:?}", r.name);
        let rows = portal.resource_rows(PARKING_1, &r.id).await.map_err(ctx("rows"))?;
        let values: Vec<Value> = rows.iter().map(|r| r["value"].clone()).collect();
        ensure!(values == vec![json!(132), json!(131), json!(130)], "rows {values:?}");

        let xml = reqwest::get(format!("{}/datasets/{PARKING_1}/dcat.rdf", stack.url(ODP)))
            .await
            .map_err(ctx("dcat"))?
            .text()
            .await
            .map_err(ctx("dcat body"))?;
        let doc = roxmltree::Document::parse(&xml).map_err(ctx("dcat xml"))?;
        let root = doc.root_element();
        ensure!(root.has_tag_name((RDF_NS, "RDF")), "root {:?}", root.tag_name());
        let declared: BTreeMap<&str, &str> = root
            .namespaces()
            .filter_map(|ns| Some((ns.name()?, ns.uri())))
            .collect();
        for (prefix, uri) in [("rdf", RDF_NS), ("dcat", DCAT_NS), ("dct", DCT_NS)] {
            ensure!(
                declared.get(prefix) == Some(&uri),
                "namespace {prefix} is {:?}",
                declared.get(prefix)
            );
        }
        let (title, dists) = dcat_titles(&xml)?;
        ensure!(title == "Parking 1", "dcat title {title:?}");
        ensure!(
            dists == vec!["Occupancy level of Parking 1".to_string()],
            "distributions {dists:?}"
        );
        Ok("rows [132, 131, 130], one distribution, rdf/dcat/dct declared".to_string())
    }
    .await;
    stack.shutdown().await;
    result
}

// 3 ---------------------------------------------------------------------

async fn metadata_only_mode() -> Outcome {
    let graph = publication_graph(json!({
        "resource_attribute_whitelist": ["availableSpotNumber"],
        "metadata_only": true,
        "broker_base": "${parking_broker}"
    }));
    let (stack, _dir) = start_stack(Some(graph)).await?;
    let result = async {
        drive_parking_1(&stack).await?;
        let portal = HttpPortalClient::new(stack.url(ODP));
        let d = portal.package_show(PARKING_1).await.map_err(ctx("package_show"))?;
        ensure!(d.title == "Parking 1", "title {:?}", d.title);
        ensure!(d.resources.len() == 1, "{} resources", d.resources.len());
        let r = &d.resources[0];
        ensure!(r.metadata_only, "resource holds data");
        ensure!(r.row_count == 0, "{} rows stored", r.row_count);

        let pep = stack.url(ACCESS_CONTROL);
        ensure!(
            r.url.starts_with(&pep),
            "access URL {} does not go through the proxy {pep}",
            r.url
        );
        let xml = portal.dcat_export(PARKING_1).await.map_err(ctx("dcat"))?;
        ensure!(xml.contains(&r.url), "dcat lacks the access URL");

        let http = reqwest::Client::new();
        let anon = http.get(&r.url).send().await.map_err(ctx("anonymous get"))?;
        ensure!(anon.status() == 401, "anonymous access answered {}", anon.status());
        let draco = token(&pep, "draco", "draco-secret").await?;
        let resp = http.get(&r.url).bearer_auth(&draco).send().await.map_err(ctx("get"))?;
        ensure!(resp.status() == 200, "access URL answered {}", resp.status());
        let e: Value = resp.json().await.map_err(ctx("entity body"))?;
        ensure!(e["id"] == json!(PARKING_1), "resolved to {}", e["id"]);
        ensure!(e["availableSpotNumber"]["value"] == json!(130), "stale entity {e}");
        Ok(format!("0 rows, {} resolves to the live entity", r.url))
    }
    .await;
    stack.shutdown().await;
    result
}

// 4 ---------------------------------------------------------------------

const CAR_PARKS_CSV: &str = "\
parking_id,label,free_places,capacity,lat,lon,operator
101,Plaza Mayor,35,120,40.4153,-3.7074,EMT
102,Sol,0,80,40.4169,-3.7035,EMT
103,Atocha,12,200,40.4065,-3.6895,Adif
";

async fn consumption_round_trip() -> Outcome {
    let (stack, _dir) = start_stack(None).await?;
    let result = async {
        let models = ModelRegistry::load(&config_dir().join("models.json")).map_err(ctx("models"))?;
        let portal = HttpPortalClient::new(stack.url(ODP)).with_token(stack.flow_token.clone());
        let rows = csv_rows(CAR_PARKS_CSV).map_err(ctx("csv"))?;
        publish_rows(&portal, "city-council", "public-car-parks", "Public car parks", &rows)
            .await
            .map_err(ctx("publish csv"))?;

        // Homogenize directly to have an oracle for what the graph must produce.
        let import: Value =
            serde_json::from_str(&std::fs::read_to_string(config_dir().join("graphs/import.json")).unwrap()).unwrap();
        let rules: SmartModelRules = serde_json::from_value(
            import["processors"]
                .as_array()
                .unwrap()
                .iter()
                .find(|p| p["name"] == "smart")
                .unwrap()["config"]
                .clone(),
        )
        .map_err(ctx("rules"))?;
        let fetched = dataset_fetch(&portal, "public-car-parks", Timestamp::now())
            .await
            .map_err(ctx("fetch"))?;
        ensure!(fetched.records.len() == 3, "fetched {} rows", fetched.records.len());
        let mut want = BTreeMap::new();
        for rec in fetched.records {
            let out = to_smart_model(rec, &rules, &models).map_err(ctx("to_smart_model"))?;
            let e = out.as_entity().unwrap().clone();
            models.validate(&e).map_err(|v| format!("{}: {v:?}", e.id()))?;
            want.insert(e.id().clone(), e);
        }

        let r = reqwest::Client::new()
            .post(format!("{}/flow/import/ingress/fetch", stack.url(FLOW_ENGINE)))
            .json(&json!({"dataset": "public-car-parks"}))
            .send()
            .await
            .map_err(ctx("trigger import"))?;
        ensure!(r.status().is_success(), "import trigger answered {}", r.status());
        stack.quiesce(Duration::from_secs(4)).await.map_err(ctx("quiesce"))?;

        let got: Vec<Entity> = stack
            .urban_broker
            .dump()
            .into_iter()
            .filter(|e| e.entity_type() == "OffStreetParking")
            .collect();
        ensure!(
            got.len() == 3,
            "{} OffStreetParking entities in the urban broker",
            got.len()
        );
        for e in &got {
            models.validate(e).map_err(|v| format!("{} invalid: {v:?}", e.id()))?;
            let w = want.get(e.id()).ok_or_else(|| format!("unexpected {}", e.id()))?;
            ensure!(
                e.simplified() == w.simplified(),
                "{} differs: {} vs {}",
                e.id(),
                e.simplified(),
                w.simplified()
            );
        }
        let free = |id: &str| {
            got.iter()
                .find(|e| e.id().to_string() == id)
                .and_then(|e| e.attribute("availableSpotNumber"))
                .map(|a| a.simple_value())
        };
        ensure!(
            free("urn:ngsi-ld:OffStreetParking:101") == Some(json!(35)),
            "101 free places"
        );
        ensure!(
            free("urn:ngsi-ld:OffStreetParking:102") == Some(json!(0)),
            "102 free places"
        );

        for (id, value) in [("101", 35), ("102", 0), ("103", 12)] {
            let name = format!("urn:ngsi-ld:OffStreetParking:{id}");
            let d = portal.package_show(&name).await.map_err(ctx("republished dataset"))?;
            ensure!(d.title == format!("Parking {id}"), "title {:?}", d.title);
            let r = d.resources.first().ok_or_else(|| format!("{name} has no resource"))?;
            let rows = portal.resource_rows(&name, &r.id).await.map_err(ctx("rows"))?;
            ensure!(
                rows.len() == 1 && rows[0]["value"] == json!(value),
                "{name} rows {rows:?}"
            );
        }
        Ok("3 CSV rows became valid OffStreetParking entities and 3 standard datasets".to_string())
    }
    .await;
    stack.shutdown().await;
    result
}

// 5 ---------------------------------------------------------------------

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let r = 6_371_000.0_f64;
    let (la1, la2) = (a.0.to_radians(), b.0.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((b.1 - a.1).to_radians() / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().min(1.0).asin()
}

async fn nearest_parking_oracle() -> Outcome {
    let candidates = [
        Entity::from_json(&listing(OFFSTREET_LISTING)).unwrap(),
        Entity::from_json(&listing(SPOT_LISTING)).unwrap(),
    ];
    let request = Entity::from_json(&listing(REQUEST_LISTING)).unwrap();
    let t = nearest_available(request.location().unwrap(), &candidates).map_err(ctx("nearest"))?;
    ensure!(t.id.to_string() == PARKING_1, "listing request targets {}", t.id);

    let (stack, _dir) = start_stack(None).await?;
    let scenario = ScenarioConfig::load(&config_dir().join("scenarios/use_case.json")).map_err(ctx("scenario"))?;
    let report = run_scenario(&stack, &scenario).await;
    stack.shutdown().await;
    let report = report.map_err(ctx("scenario run"))?;
    let target = report.responses.first().and_then(|r| r.target.clone());
    ensure!(
        target.as_deref() == Some(PARKING_1),
        "scenario response targets {target:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut answered = 0;
    for instance in 0..200 {
        let n = rng.random_range(0..=500usize);
        let here = (rng.random_range(40.30..40.45), rng.random_range(-3.80..-3.60));
        let mut entities = Vec::with_capacity(n);
        let mut best: Option<(f64, String)> = None;
        for i in 0..n {
            let at = (rng.random_range(40.30..40.45), rng.random_range(-3.80..-3.60));
            let offstreet = rng.random_bool(0.5);
            let ty = if offstreet { "OffStreetParking" } else { "ParkingSpot" };
            let mut e = Entity::new(EntityId::new(ty, i).unwrap(), ty).unwrap();
            e.set("location", Attribute::geo(GeoPoint::new(at.0, at.1).unwrap()))
                .unwrap();
            let available = if offstreet {
                let free = rng.random_range(0..3i64);
                e.set("availableSpotNumber", Attribute::property(free)).unwrap();
                free > 0
            } else {
                let status = ["free", "occupied", "closed"][rng.random_range(0..3usize)];
                e.set("status", Attribute::property(status)).unwrap();
                status == "free"
            };
            if available {
                let d = haversine(here, at);
                let id = e.id().to_string();
                if best.as_ref().is_none_or(|(bd, bid)| d < *bd || (d == *bd && id < *bid)) {
                    best = Some((d, id));
                }
            }
            entities.push(e);
        }
        let got = nearest_available(GeoPoint::new(here.0, here.1).unwrap(), &entities);
        match (best, got) {
            (None, Err(TwinError::NoneAvailable)) => {}
            (Some((d, id)), Ok(t)) => {
                ensure!(t.id.to_string() == id, "instance {instance}: {} vs oracle {id}", t.id);
                let rel = (t.distance_m - d).abs() / d.max(f64::MIN_POSITIVE);
                ensure!(rel <= 1e-6, "instance {instance}: distance {} vs {d}", t.distance_m);
                answered += 1;
            }
            (want, got) => return Err(format!("instance {instance}: oracle {want:?}, got {got:?}")),
        }
    }
    Ok(format!(
        "listing and scenario target Parking 1; 200 instances agree ({answered} with an answer)"
    ))
}

// 6 ---------------------------------------------------------------------

#[derive(Default)]
struct Tally(Mutex<BTreeMap<String, u64>>);

#[async_trait]
impl Notifier for Tally {
    async fn deliver(&self, endpoint: &Url, _body: &Value) -> Result<(), DeliveryError> {
        *self.0.lock().entry(endpoint.to_string()).or_default() += 1;
        Ok(())
    }
}

const LAW_TYPES: [&str; 3] = ["Sensor", "Gauge", "Meter"];
const LAW_ATTRS: [&str; 5] = ["a", "b", "c", "d", "e"];

fn random_attrs(rng: &mut ChaCha8Rng) -> Vec<(&'static str, i64)> {
    (0..rng.random_range(0..=3))
        .map(|_| (LAW_ATTRS[rng.random_range(0..5usize)], rng.random_range(-9..9)))
        .collect()
}

/// Fails the first two attempts of every distinct body, then records it.
#[derive(Default)]
struct Flaky {
    attempts: Mutex<BTreeMap<String, usize>>,
    accepted: Mutex<Vec<Value>>,
    total: AtomicUsize,
}

async fn flaky_sink(State(f): State<Arc<Flaky>>, Json(body): Json<Value>) -> StatusCode {
    f.total.fetch_add(1, Ordering::SeqCst);
    let key = body.to_string();
    let n = {
        let mut a = f.attempts.lock();
        let n = a.entry(key).or_default();
        *n += 1;
        *n
    };
    if n <= 2 {
        return StatusCode::SERVICE_UNAVAILABLE;
    }
    f.accepted.lock().push(body);
    StatusCode::OK
}

async fn notification_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let trials = 10;
    let mut total_notifications = 0u64;
    for trial in 0..trials {
        let tally = Arc::new(Tally::default());
        let broker = Broker::new(tally.clone());
        let n_subs = rng.random_range(1..=20usize);
        let mut subs = Vec::new();
        for i in 0..n_subs {
            let ty = rng.random_range(0..LAW_TYPES.len());
            let watched: BTreeSet<&str> = (0..rng.random_range(0..=2))
                .map(|_| LAW_ATTRS[rng.random_range(0..5usize)])
                .collect();
            let endpoint = format!("http://sink.test/{i}");
            let req = SubscriptionRequest::new(LAW_TYPES[ty], endpoint.clone())
                .watching(watched.iter().map(|s| s.to_string()));
            let id = broker.create_subscription(req).map_err(ctx("subscribe"))?;
            subs.push((id, ty, watched, endpoint));
        }

        let mut expected = vec![0u64; n_subs];
        let mut exists = BTreeSet::new();
        for _ in 0..1000 {
            let ty = rng.random_range(0..LAW_TYPES.len());
            let n = rng.random_range(0..30u32);
            let id = EntityId::new(LAW_TYPES[ty], n).unwrap();
            let attrs = random_attrs(&mut rng);
            let ok = if !exists.contains(&id) && rng.random_bool(0.8) {
                let mut e = Entity::new(id.clone(), LAW_TYPES[ty]).unwrap();
                for (a, v) in &attrs {
                    e.set(a, Attribute::property(*v)).unwrap();
                }
                let ok = broker.create_entity(e).is_ok();
                exists.insert(id);
                ok
            } else {
                let p = attrs
                    .iter()
                    .fold(Patch::new(), |p, (a, v)| p.with(a, Attribute::property(*v)));
                let ok = broker.update_attributes(&id, p).is_ok();
                ensure!(ok == exists.contains(&id), "trial {trial}: update of {id} ok={ok}");
                ok
            };
            let touched: BTreeSet<&str> = attrs.iter().map(|(a, _)| *a).collect();
            if !ok || touched.is_empty() {
                continue;
            }
            for (i, (_, sty, watched, _)) in subs.iter().enumerate() {
                if *sty == ty && (watched.is_empty() || !watched.is_disjoint(&touched)) {
                    expected[i] += 1;
                }
            }
        }
        broker.wait_delivered().await;
        let delivered = tally.0.lock().clone();
        for (i, (sid, _, _, endpoint)) in subs.iter().enumerate() {
            let fired = broker.subscription(sid).unwrap().notifications_fired;
            ensure!(
                fired == expected[i],
                "trial {trial} sub {i}: fired {fired}, oracle {}",
                expected[i]
            );
            let got = delivered.get(endpoint.as_str()).copied().unwrap_or(0);
            ensure!(
                got == expected[i],
                "trial {trial} sub {i}: delivered {got}, oracle {}",
                expected[i]
            );
            total_notifications += fired;
        }
    }

    // At-least-once against an endpoint that refuses the first two attempts.
    let flaky = Arc::new(Flaky::default());
    let app = Router::new()
        .route("/notify", post(flaky_sink))
        .with_state(flaky.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(ctx("bind"))?;
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    let broker = Broker::with_config(
        Arc::new(HttpNotifier::new()),
        BrokerConfig {
            retry: RetryPolicy {
                max_attempts: 5,
                initial_backoff: Duration::from_millis(2),
                max_backoff: Duration::from_millis(20),
            },
            clock: system_clock(),
        },
    );
    let sid = broker
        .create_subscription(
            SubscriptionRequest::new("Sensor", format!("http://{addr}/notify")).watching(["level".to_string()]),
        )
        .map_err(ctx("subscribe"))?;
    let id = EntityId::new("Sensor", 1).unwrap();
    let mut e = Entity::new(id.clone(), "Sensor").unwrap();
    e.set("level", Attribute::property(0)).unwrap();
    broker.create_entity(e).map_err(ctx("create"))?;
    let updates = 40;
    for v in 1..=updates {
        broker
            .update_attributes(&id, Patch::new().with("level", Attribute::property(v)))
            .map_err(ctx("update"))?;
    }
    broker.wait_delivered().await;
    server.abort();

    let seen: BTreeSet<i64> = flaky
        .accepted
        .lock()
        .iter()
        .filter_map(|b| Notification::from_wire(b).ok())
        .filter_map(|n| n.entities.first()?.attribute("level")?.simple_value().as_i64())
        .collect();
    let want: BTreeSet<i64> = (0..=updates).collect();
    ensure!(seen == want, "delivered levels {seen:?}");
    let s = broker.subscription(&sid).unwrap();
    let fired = s.notifications_fired;
    ensure!(fired == updates as u64 + 1, "fired {fired}");
    ensure!(
        s.deliveries_succeeded == fired,
        "succeeded {} of {fired}",
        s.deliveries_succeeded
    );
    ensure!(
        s.deliveries_attempted == 3 * fired,
        "attempted {}",
        s.deliveries_attempted
    );
    ensure!(
        flaky.total.load(Ordering::SeqCst) as u64 == 3 * fired,
        "endpoint saw {} requests",
        flaky.total.load(Ordering::SeqCst)
    );
    Ok(format!(
        "{trials} trials x 1000 updates matched the oracle ({total_notifications} notifications); {fired} flaky deliveries all landed"
    ))
}

// 7 ---------------------------------------------------------------------

async fn access_control() -> Outcome {
    let (stack, _dir) = start_stack(None).await?;
    let result = async {
        let pep = stack.url(ACCESS_CONTROL);
        let http = reqwest::Client::new();
        stack
            .parking_broker
            .create_entity(Entity::from_json(&listing(OFFSTREET_LISTING)).unwrap())
            .map_err(ctx("seed parking"))?;
        stack
            .parking_broker
            .create_entity(Entity::from_json(&listing(SPOT_LISTING)).unwrap())
            .map_err(ctx("seed spot"))?;
        let draco = token(&pep, "draco", "draco-secret").await?;
        let operator = token(&pep, "operator", "operator-secret").await?;

        for path in [
            format!("/ngsi-ld/v1/entities/{PARKING_1}"),
            "/ngsi-ld/v1/entities?type=OffStreetParking".to_string(),
        ] {
            let r = http
                .get(format!("{pep}{path}"))
                .bearer_auth(&draco)
                .send()
                .await
                .map_err(ctx("read"))?;
            ensure!(r.status().is_success(), "draco GET {path} answered {}", r.status());
        }

        let spot = "urn:ngsi-ld:ParkingSpot:123";
        let before = stack.proxy.forwarded_count();
        let mutations = [
            (
                Verb::POST,
                "/ngsi-ld/v1/entities".to_string(),
                json!({"id": "urn:ngsi-ld:ParkingSpot:9", "type": "ParkingSpot", "status": "free"}),
            ),
            (
                Verb::PATCH,
                format!("/ngsi-ld/v1/entities/{spot}/attrs"),
                json!({"status": {"type": "Property", "value": "free"}}),
            ),
            (Verb::DELETE, format!("/ngsi-ld/v1/entities/{spot}"), Value::Null),
        ];
        for (verb, path, body) in &mutations {
            let method = reqwest::Method::from_bytes(format!("{verb:?}").as_bytes()).unwrap();
            let mut req = http.request(method, format!("{pep}{path}")).bearer_auth(&draco);
            if !body.is_null() {
                req = req.json(body);
            }
            let r = req.send().await.map_err(ctx("mutation"))?;
            ensure!(r.status() == 403, "draco {verb:?} {path} answered {}", r.status());
        }
        ensure!(
            stack.proxy.forwarded_count() == before,
            "a denied mutation was forwarded"
        );
        let s = stack
            .parking_broker
            .get_entity(&spot.parse().unwrap())
            .map_err(ctx("spot"))?;
        ensure!(
            s.attribute("status").unwrap().simple_value() == json!("closed"),
            "spot was mutated"
        );

        // Empty policy table: nothing gets through, whoever asks.
        stack.access.set_policies(Vec::new());
        let probes = [
            (Verb::GET, format!("/ngsi-ld/v1/entities/{PARKING_1}")),
            (Verb::GET, "/ngsi-ld/v1/entities?type=OffStreetParking".to_string()),
            (Verb::POST, "/ngsi-ld/v1/entities".to_string()),
            (Verb::PATCH, format!("/ngsi-ld/v1/entities/{PARKING_1}/attrs")),
            (Verb::DELETE, format!("/ngsi-ld/v1/entities/{spot}")),
            (Verb::POST, "/ngsi-ld/v1/subscriptions".to_string()),
        ];
        let forwarded = stack.proxy.forwarded_count();
        for t in [&draco, &operator] {
            for (verb, path) in &probes {
                let method = reqwest::Method::from_bytes(format!("{verb:?}").as_bytes()).unwrap();
                let r = http
                    .request(method, format!("{pep}{path}"))
                    .bearer_auth(t)
                    .json(&json!({}))
                    .send()
                    .await
                    .map_err(ctx("probe"))?;
                ensure!(
                    r.status() == 403,
                    "{verb:?} {path} answered {} with no policies",
                    r.status()
                );
            }
        }
        ensure!(
            stack.proxy.forwarded_count() == forwarded,
            "request forwarded with no policies"
        );

        let ac = AccessControl::new(Duration::from_secs(60), system_clock());
        ac.register_client(ClientCredential {
            client_id: "any".into(),
            client_secret: "s".into(),
            roles: ["flow".to_string(), "operator".to_string()].into(),
        })
        .map_err(ctx("client"))?;
        let t = ac.issue_token("any", "s").map_err(ctx("issue"))?.value;
        for verb in [Verb::GET, Verb::POST, Verb::PATCH, Verb::DELETE] {
            for path in [
                "/",
                "/ngsi-ld/v1/entities",
                "/api/3/action/package_create",
                "/anything/else",
            ] {
                ensure!(
                    !ac.authorize(&t, verb, path).is_allow(),
                    "{verb:?} {path} allowed by an empty table"
                );
            }
        }
        Ok("draco reads OffStreetParking, 3 ParkingSpot mutations denied, empty table denies all".to_string())
    }
    .await;
    stack.shutdown().await;
    result
}

// 8 ---------------------------------------------------------------------

async fn soak_determinism() -> Outcome {
    let cfg = ScenarioConfig::load(&config_dir().join("scenarios/medium.json")).map_err(ctx("scenario"))?;
    ensure!(cfg.rng_seed == 7, "seed {}", cfg.rng_seed);
    ensure!(cfg.steps == 1000, "steps {}", cfg.steps);

    // History oracle: one snapshot per parking notification, one row per attribute.
    let world = generate(&cfg).map_err(ctx("generate"))?;
    ensure!(
        (world.parkings.len(), world.spots.len(), world.requests.len()) == (10, 50, 20),
        "world sizes {} / {} / {}",
        world.parkings.len(),
        world.spots.len(),
        world.requests.len()
    );
    let mut updates: BTreeMap<EntityId, usize> = BTreeMap::new();
    for ev in simulate_occupancy(&cfg, &world, cfg.steps) {
        if ev.entity.type_segment() == "OffStreetParking" {
            *updates.entry(ev.entity.clone()).or_default() += 1;
        }
    }
    let oracle: usize = world
        .parkings
        .iter()
        .map(|p| (1 + updates.get(p.entity.id()).copied().unwrap_or(0)) * p.entity.attributes().len())
        .sum();

    let mut reports = Vec::new();
    for run in 0..2 {
        let (stack, _dir) = start_stack(None).await?;
        let report = run_scenario(&stack, &cfg).await;
        let history = stack.flow.history.len();
        stack.shutdown().await;
        let report = report.map_err(ctx("scenario run"))?;
        let failed: Vec<String> = report.failed_checks().iter().map(|c| format!("{c:?}")).collect();
        ensure!(
            report.passed && failed.is_empty(),
            "run {run}: failed checks {failed:?}"
        );
        ensure!(history == oracle, "run {run}: history {history}, oracle {oracle}");
        reports.push(serde_json::to_string_pretty(&report_without_timing(&report)).unwrap());
    }
    ensure!(reports[0] == reports[1], "reports differ between runs");
    Ok(format!(
        "all checks pass twice, history {oracle} rows, reports identical ({} bytes)",
        reports[0].len()
    ))
}
