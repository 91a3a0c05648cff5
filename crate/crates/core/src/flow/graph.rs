//! Graph definition, validation and the running graph.
//!
//! Every processor owns one bounded inbox and a single task draining it, so
//! records are handled in arrival order per processor. Forwarding awaits
//! queue space, which is the back-pressure path.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use super::processors::{build, FlowEnv, Processor};
use super::{FlowError, FlowRecord};
use crate::idle::InFlight;

pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(default)]
    pub processors: Vec<ProcessorSpec>,
    #[serde(default)]
    pub connections: Vec<ConnectionSpec>,
}

impl GraphSpec {
    pub fn from_json(text: &str) -> Result<Self, FlowError> {
        serde_json::from_str(text).map_err(|e| FlowError::InvalidGraph(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| FlowError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn processor(mut self, name: &str, kind: &str, config: Value) -> Self {
        self.processors.push(ProcessorSpec {
            name: name.into(),
            kind: kind.into(),
            config,
        });
        self
    }

    pub fn connect(mut self, from: &str, to: &str) -> Self {
        self.connections.push(ConnectionSpec {
            from: from.into(),
            to: to.into(),
            capacity: None,
        });
        self
    }

    /// Structural checks: unique names, known endpoints, positive
    /// capacities, no duplicate edges, no cycles.
    pub fn validate(&self) -> Result<(), FlowError> {
        let mut g = DiGraph::<&str, ()>::new();
        let mut idx = HashMap::new();
        for p in &self.processors {
            if p.name.trim().is_empty() {
                return Err(FlowError::InvalidGraph("processor with empty name".into()));
            }
            if idx.insert(p.name.as_str(), g.add_node(p.name.as_str())).is_some() {
                return Err(FlowError::InvalidGraph(format!("duplicate processor {}", p.name)));
            }
        }
        let mut seen = HashSet::new();
        for c in &self.connections {
            let (Some(&a), Some(&b)) = (idx.get(c.from.as_str()), idx.get(c.to.as_str())) else {
                return Err(FlowError::InvalidGraph(format!(
                    "dangling connection {} -> {}",
                    c.from, c.to
                )));
            };
            if c.capacity == Some(0) {
                return Err(FlowError::InvalidGraph(format!(
                    "zero capacity on {} -> {}",
                    c.from, c.to
                )));
            }
            if !seen.insert((a, b)) {
                return Err(FlowError::InvalidGraph(format!(
                    "duplicate connection {} -> {}",
                    c.from, c.to
                )));
            }
            g.add_edge(a, b, ());
        }
        if petgraph::algo::is_cyclic_directed(&g) {
            return Err(FlowError::InvalidGraph("graph has a cycle".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessorCounters {
    pub records_in: u64,
    pub records_out: u64,
    pub errored: u64,
}

#[derive(Default)]
struct Counters {
    records_in: AtomicU64,
    records_out: AtomicU64,
    errored: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> ProcessorCounters {
        ProcessorCounters {
            records_in: self.records_in.load(Ordering::SeqCst),
            records_out: self.records_out.load(Ordering::SeqCst),
            errored: self.errored.load(Ordering::SeqCst),
        }
    }
}

struct Node {
    processor: Arc<dyn Processor>,
    counters: Arc<Counters>,
}

struct Inner {
    nodes: BTreeMap<String, Node>,
    inboxes: Mutex<Option<HashMap<String, mpsc::Sender<FlowRecord>>>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    in_flight: InFlight,
}

/// A running graph. Cheap to clone.
#[derive(Clone)]
pub struct GraphHandle {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for GraphHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GraphHandle")
            .field("processors", &self.inner.nodes.keys().collect::<Vec<_>>())
            .field("in_flight", &self.inner.in_flight.count())
            .finish()
    }
}

/// Validates `spec`, instantiates its processors against `env` and starts
/// one task per processor. Must be called inside a tokio runtime.
pub fn run_graph(spec: &GraphSpec, env: &FlowEnv) -> Result<GraphHandle, FlowError> {
    spec.validate()?;
    let mut capacity: HashMap<&str, usize> = HashMap::new();
    for c in &spec.connections {
        let cap = c.capacity.unwrap_or(DEFAULT_CAPACITY);
        capacity
            .entry(c.to.as_str())
            .and_modify(|v| *v = (*v).min(cap))
            .or_insert(cap);
    }
    let mut built = Vec::new();
    for p in &spec.processors {
        let proc = build(&p.kind, &p.config, env)
            .map_err(|e| FlowError::InvalidConfig(format!("processor {}: {e}", p.name)))?;
        built.push((p.name.clone(), proc));
    }

    let mut senders = HashMap::new();
    let mut receivers = HashMap::new();
    for (name, _) in &built {
        let cap = capacity.get(name.as_str()).copied().unwrap_or(DEFAULT_CAPACITY);
        let (tx, rx) = mpsc::channel(cap);
        senders.insert(name.clone(), tx);
        receivers.insert(name.clone(), rx);
    }

    let in_flight = InFlight::new();
    let mut nodes = BTreeMap::new();
    let mut tasks = Vec::new();
    for (name, processor) in built {
        let counters = Arc::new(Counters::default());
        let downstream: Vec<mpsc::Sender<FlowRecord>> = spec
            .connections
            .iter()
            .filter(|c| c.from == name)
            .map(|c| senders[&c.to].clone())
            .collect();
        let rx = receivers.remove(&name).expect("one receiver per processor");
        tasks.push(tokio::spawn(drive(
            name.clone(),
            processor.clone(),
            counters.clone(),
            rx,
            downstream,
            in_flight.clone(),
            env.clone(),
        )));
        nodes.insert(name, Node { processor, counters });
    }
    Ok(GraphHandle {
        inner: Arc::new(Inner {
            nodes,
            inboxes: Mutex::new(Some(senders)),
            tasks: Mutex::new(tasks),
            in_flight,
        }),
    })
}

async fn drive(
    name: String,
    processor: Arc<dyn Processor>,
    counters: Arc<Counters>,
    mut rx: mpsc::Receiver<FlowRecord>,
    downstream: Vec<mpsc::Sender<FlowRecord>>,
    in_flight: InFlight,
    env: FlowEnv,
) {
    while let Some(rec) = rx.recv().await {
        counters.records_in.fetch_add(1, Ordering::SeqCst);
        let failed = rec.clone();
        match processor.process(rec).await {
            Ok(outputs) => {
                counters.records_out.fetch_add(outputs.len() as u64, Ordering::SeqCst);
                for out in outputs {
                    for tx in &downstream {
                        in_flight.begin();
                        if tx.send(out.clone()).await.is_err() {
                            in_flight.end();
                        }
                    }
                }
            }
            Err(e) => {
                counters.errored.fetch_add(1, Ordering::SeqCst);
                env.dead_letter.record(&name, &failed, &e, env.clock.now());
            }
        }
        in_flight.end();
    }
}

impl GraphHandle {
    /// Queues `rec` at processor `name`, waiting for space if the inbox is full.
    pub async fn inject(&self, name: &str, rec: FlowRecord) -> Result<(), FlowError> {
        let tx = {
            let inboxes = self.inner.inboxes.lock();
            let inboxes = inboxes.as_ref().ok_or(FlowError::Stopped)?;
            inboxes
                .get(name)
                .cloned()
                .ok_or_else(|| FlowError::UnknownProcessor(name.to_string()))?
        };
        self.inner.in_flight.begin();
        tx.send(rec).await.map_err(|_| {
            self.inner.in_flight.end();
            FlowError::Stopped
        })
    }

    pub fn processors(&self) -> Vec<String> {
        self.inner.nodes.keys().cloned().collect()
    }

    pub fn has_processor(&self, name: &str) -> bool {
        self.inner.nodes.contains_key(name)
    }

    pub fn counters(&self) -> BTreeMap<String, ProcessorCounters> {
        self.inner
            .nodes
            .iter()
            .map(|(n, node)| (n.clone(), node.counters.snapshot()))
            .collect()
    }

    pub fn counter(&self, name: &str) -> Option<ProcessorCounters> {
        self.inner.nodes.get(name).map(|n| n.counters.snapshot())
    }

    pub fn reports(&self) -> BTreeMap<String, Value> {
        self.inner
            .nodes
            .iter()
            .map(|(n, node)| (n.clone(), node.processor.report()))
            .collect()
    }

    /// Records queued or being processed anywhere in the graph.
    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.count()
    }

    /// Resolves when no record is queued or being processed.
    pub async fn wait_idle(&self) {
        self.inner.in_flight.wait_idle().await
    }

    /// Closes the inboxes and waits for every processor to drain.
    pub async fn shutdown(&self) {
        self.inner.inboxes.lock().take();
        let tasks: Vec<_> = std::mem::take(&mut *self.inner.tasks.lock());
        for t in tasks {
            let _ = t.await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rejects_cycles_and_dangling() {
        let cyc = GraphSpec::default()
            .processor("a", "history_sink", Value::Null)
            .processor("b", "history_sink", Value::Null)
            .connect("a", "b")
            .connect("b", "a");
        assert!(matches!(cyc.validate(), Err(FlowError::InvalidGraph(m)) if m.contains("cycle")));
        let dangling = GraphSpec::default()
            .processor("a", "history_sink", Value::Null)
            .connect("a", "z");
        assert!(matches!(dangling.validate(), Err(FlowError::InvalidGraph(m)) if m.contains("dangling")));
        let dup = GraphSpec::default()
            .processor("a", "history_sink", Value::Null)
            .processor("a", "history_sink", Value::Null);
        assert!(dup.validate().is_err());
        let spec: GraphSpec = serde_json::from_value(json!({
            "processors": [{"name": "a", "kind": "history_sink"}, {"name": "b", "kind": "history_sink"}],
            "connections": [{"from": "a", "to": "b", "capacity": 0}]
        }))
        .unwrap();
        assert!(spec.validate().is_err());
    }

    #[tokio::test]
    async fn empty_graph_runs() {
        let h = run_graph(&GraphSpec::default(), &FlowEnv::default()).unwrap();
        assert!(h.counters().is_empty());
        h.wait_idle().await;
        h.shutdown().await;
    }
}
