//! Latency, bandwidth and storage measurements.
//!
//! Latencies are wall-clock averages per phase over `runs` iterations.
//! Bandwidth is counted on the wire by relaying real HTTP traffic to a
//! loopback server through [`proxy::CountingProxy`]. Storage is the
//! serialized size of a reference agent store.

pub mod proxy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    export_store, AgentStore, HttpTransport, LocalTransport, SessionOptions, SessionRecord,
    VcrOptions,
};
use crate::clock::{unix_now, ManualClock};
use crate::encoding::{from_wire, to_wire, WireMode};
use crate::keyhier::{DerivationPath, ExtendedPrivateKey};
use crate::server::{http, EndpointAdvertisement, ServerConfig, ViceroyServer, WrapperRequest};
use crate::vcr::VcrAction;
use crate::wrapper::{
    check_wrapper_echo, verify_wrapper, ClientId, MultiSigPolicy, ServerSigningKey, Wrapper,
};

pub const SCHEMA: &str = "viceroy-bench/1";
pub const DEFAULT_RUNS: usize = 10;

/// Envelope used by [`BenchReport::check_latency`].
pub const LATENCY_ENVELOPE_MS: f64 = 50.0;

const REFERENCE_ORIGIN: &str = "https://shop.example";
const REFERENCE_TIME: u64 = 1_700_000_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench environment: {0}")]
    Environment(String),
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        "BenchEnvironmentError"
    }
}

fn env_err(e: impl fmt::Display) -> BenchError {
    BenchError::Environment(e.to_string())
}

pub const PHASES: [&str; 8] = [
    "key_derivation",
    "wrapper_generation",
    "wrapper_verification",
    "wrapper_storage",
    "history_matching",
    "history_update",
    "vcr_generation",
    "vcr_verification",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowBytes {
    pub request_headers: usize,
    pub request_payload: usize,
    pub response_headers: usize,
    pub response_payload: usize,
}

impl FlowBytes {
    pub fn total(&self) -> usize {
        self.request_headers + self.request_payload + self.response_headers + self.response_payload
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageBytes {
    pub baseline_optimized: usize,
    pub baseline_verbose: usize,
    pub history100_optimized: usize,
    pub history100_verbose: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub runs: usize,
    /// Phase name → mean milliseconds.
    pub latency_ms: BTreeMap<String, f64>,
    pub wrapper_flow: FlowBytes,
    pub vcr_access_flow: FlowBytes,
    pub storage: StorageBytes,
}

impl BenchReport {
    /// Phases whose mean exceeds `limit_ms`.
    pub fn slow_phases(&self, limit_ms: f64) -> Vec<(&str, f64)> {
        self.latency_ms
            .iter()
            .filter(|(_, &v)| v.is_nan() || v >= limit_ms)
            .map(|(k, &v)| (k.as_str(), v))
            .collect()
    }

    pub fn check_latency(&self) -> Result<(), String> {
        let slow = self.slow_phases(LATENCY_ENVELOPE_MS);
        if slow.is_empty() {
            Ok(())
        } else {
            Err(slow
                .iter()
                .map(|(k, v)| format!("{k}={v:.3}ms"))
                .collect::<Vec<_>>()
                .join(", "))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "latency (mean of {} runs)", self.runs)?;
        for phase in PHASES {
            if let Some(ms) = self.latency_ms.get(phase) {
                writeln!(f, "  {phase:<22} {ms:>10.3} ms")?;
            }
        }
        writeln!(
            f,
            "bandwidth (bytes)        req-hdr  req-body  resp-hdr  resp-body   total"
        )?;
        for (name, b) in [
            ("wrapper flow", &self.wrapper_flow),
            ("vcr access flow", &self.vcr_access_flow),
        ] {
            writeln!(
                f,
                "  {name:<22} {:>7} {:>9} {:>9} {:>10} {:>7}",
                b.request_headers,
                b.request_payload,
                b.response_headers,
                b.response_payload,
                b.total()
            )?;
        }
        writeln!(f, "agent storage (bytes)    optimized  verbose")?;
        let s = &self.storage;
        writeln!(
            f,
            "  {:<22} {:>9} {:>8}",
            "baseline", s.baseline_optimized, s.baseline_verbose
        )?;
        write!(
            f,
            "  {:<22} {:>9} {:>8}",
            "100-entry history", s.history100_optimized, s.history100_verbose
        )
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Runs every measurement. Spawns its own loopback server.
pub fn run(runs: usize) -> Result<BenchReport, BenchError> {
    let runs = runs.max(1);
    let latency_ms = measure_latency(runs)?;
    let (wrapper_flow, vcr_access_flow) = measure_bandwidth()?;
    Ok(BenchReport {
        schema: SCHEMA.into(),
        runs,
        latency_ms,
        wrapper_flow,
        vcr_access_flow,
        storage: measure_storage()?,
    })
}

fn measure_latency(runs: usize) -> Result<BTreeMap<String, f64>, BenchError> {
    let master = ExtendedPrivateKey::generate_master(&[0x5au8; 32]).map_err(env_err)?;
    let device = master.derive_child_priv(0).map_err(env_err)?.neuter();
    let server = ViceroyServer::new(ServerSigningKey::generate(), ServerConfig::default())
        .map_err(env_err)?;
    let ad = server.advertisement().clone();
    let mut store = AgentStore::new(device).map_err(env_err)?;
    let dir = tempfile::tempdir().map_err(env_err)?;
    let store_path = dir.path().join("agent.json");
    let mut totals = [0f64; 8];

    for run in 0..runs as u32 {
        let now = unix_now().ok_or_else(|| env_err("clock unavailable"))?;
        let cookie = ClientId::new("vid", format!("{:032x}", run)).map_err(env_err)?;

        let t = Instant::now();
        let (j, key) = device.next_valid_child(run).map_err(env_err)?;
        totals[0] += ms(t);
        let policy = MultiSigPolicy::single(*key.public_key());
        let body = to_wire(
            &WrapperRequest {
                client_id: cookie.clone(),
                vcr_keys: policy.members().to_vec(),
            },
            WireMode::Optimized,
        );

        let t = Instant::now();
        let reply = server.handle_wrapper_request(body.as_bytes());
        totals[1] += ms(t);
        if reply.status != 200 {
            return Err(env_err(format!("wrapper request failed: {}", reply.body)));
        }

        let t = Instant::now();
        let wrapper: Wrapper = from_wire(&reply.body, WireMode::Optimized).map_err(env_err)?;
        verify_wrapper(&ad.server_pubkey, &wrapper).map_err(env_err)?;
        check_wrapper_echo(&policy, &cookie, &wrapper).map_err(env_err)?;
        totals[2] += ms(t);

        let t = Instant::now();
        store.insert_session(SessionRecord {
            server_origin: REFERENCE_ORIGIN.into(),
            endpoints: ad.clone(),
            client_id: cookie.clone(),
            path: DerivationPath::new(vec![0, j]).map_err(env_err)?,
            wrapper,
            created_at: now,
            history: Vec::new(),
        });
        crate::fsutil::write_atomic(&store_path, &export_store(&store, WireMode::Optimized))
            .map_err(env_err)?;
        totals[3] += ms(t);

        let t = Instant::now();
        let hit = store.lookup_cookie(REFERENCE_ORIGIN, &cookie);
        totals[4] += ms(t);
        if hit.is_none() {
            return Err(env_err("cookie index lookup failed"));
        }

        let t = Instant::now();
        store
            .record_visit(
                &[(cookie.name().into(), cookie.value().into())],
                &format!("{REFERENCE_ORIGIN}/products/item"),
                now,
            )
            .map_err(env_err)?;
        totals[5] += ms(t);

        let index = hit.expect("checked");
        let t = Instant::now();
        let mut prepared = store
            .prepare_vcr(&[index], VcrAction::access(), &VcrOptions::default(), now)
            .map_err(env_err)?;
        prepared.sign_with(&master).map_err(env_err)?;
        totals[6] += ms(t);

        let t = Instant::now();
        server
            .verify(&prepared.request.for_submission(), now)
            .map_err(env_err)?;
        totals[7] += ms(t);
    }
    Ok(PHASES
        .iter()
        .zip(totals)
        .map(|(p, total)| (p.to_string(), total / runs as f64))
        .collect())
}

fn flow_bytes(convs: &[proxy::Conversation]) -> FlowBytes {
    let mut out = FlowBytes::default();
    for c in convs {
        let (h, p) = proxy::split_http(&c.upstream);
        out.request_headers += h;
        out.request_payload += p;
        let (h, p) = proxy::split_http(&c.downstream);
        out.response_headers += h;
        out.response_payload += p;
    }
    out
}

/// Wrapper flow: one wrapper request and its response. Access flow: one
/// signed ACCESS request and its response, for a session whose history has
/// a single visit.
fn measure_bandwidth() -> Result<(FlowBytes, FlowBytes), BenchError> {
    let server = Arc::new(
        ViceroyServer::new(ServerSigningKey::generate(), ServerConfig::default())
            .map_err(env_err)?,
    );
    let running = http::spawn(server.clone(), ([127, 0, 0, 1], 0).into()).map_err(env_err)?;
    let proxy = proxy::CountingProxy::start(running.addr()).map_err(env_err)?;
    let origin = format!("http://{}", proxy.addr());
    let transport = HttpTransport::new().map_err(env_err)?;
    let master = ExtendedPrivateKey::generate_master(&[0xa5u8; 32]).map_err(env_err)?;
    let mut store =
        AgentStore::new(master.derive_child_priv(0).map_err(env_err)?.neuter()).map_err(env_err)?;
    let now = unix_now().ok_or_else(|| env_err("clock unavailable"))?;

    use crate::agent::Transport;
    let page = transport
        .get(&format!("{origin}/"), None)
        .map_err(env_err)?;
    let ad = EndpointAdvertisement::from_headers(
        page.headers.iter().map(|(a, b)| (a.as_str(), b.as_str())),
    )
    .ok_or_else(|| env_err("server did not advertise"))?;
    let cookie = page
        .header("set-cookie")
        .and_then(|v| v.split(';').next())
        .and_then(|p| p.split_once('='))
        .and_then(|(n, v)| ClientId::new(n, v).ok())
        .ok_or_else(|| env_err("no session cookie"))?;
    proxy.take();

    let index = store
        .begin_session(
            &transport,
            &origin,
            &ad,
            cookie.clone(),
            now,
            &SessionOptions::default(),
        )
        .map_err(env_err)?;
    let wrapper_flow = flow_bytes(&proxy.take());
    store
        .record_visit(
            &[(cookie.name().into(), cookie.value().into())],
            &format!("{origin}/"),
            now,
        )
        .map_err(env_err)?;

    let mut prepared = store
        .prepare_vcr(&[index], VcrAction::access(), &VcrOptions::default(), now)
        .map_err(env_err)?;
    prepared.sign_with(&master).map_err(env_err)?;
    let outcome = prepared.submit(&transport).map_err(env_err)?;
    let access_flow = flow_bytes(&proxy.take());
    match outcome.records.as_deref() {
        Some([r]) if r.visits.len() == 1 => {}
        _ => return Err(env_err("access flow did not return a single-visit record")),
    }
    drop(proxy);
    running.stop();
    Ok((wrapper_flow, access_flow))
}

/// Store with one session and no history, and the same store after 100
/// visits, for a fixed origin and clock so sizes are reproducible.
pub fn reference_stores() -> Result<(AgentStore, AgentStore), BenchError> {
    let master = ExtendedPrivateKey::generate_master(&[0x3cu8; 32]).map_err(env_err)?;
    let server = Arc::new(
        ViceroyServer::with_clock(
            ServerSigningKey::generate(),
            ServerConfig::default(),
            Arc::new(ManualClock::new(REFERENCE_TIME)),
        )
        .map_err(env_err)?,
    );
    let transport = LocalTransport::new(server);
    let mut store =
        AgentStore::new(master.derive_child_priv(0).map_err(env_err)?.neuter()).map_err(env_err)?;
    let out = store
        .visit(
            &transport,
            &format!("{REFERENCE_ORIGIN}/"),
            REFERENCE_TIME,
            &SessionOptions::default(),
        )
        .map_err(env_err)?;
    let index = out
        .new_session
        .ok_or_else(|| env_err("no session opened"))?;
    let cookie = store.sessions()[index].client_id.clone();
    let mut baseline = store;
    baseline.clear_history(index);
    let mut with_history = baseline.clone();
    for k in 0..100u64 {
        with_history
            .record_visit(
                &[(cookie.name().into(), cookie.value().into())],
                &format!("{REFERENCE_ORIGIN}/products/item-{k:03}"),
                REFERENCE_TIME + 60 * k,
            )
            .map_err(env_err)?;
    }
    Ok((baseline, with_history))
}

fn measure_storage() -> Result<StorageBytes, BenchError> {
    let (baseline, history) = reference_stores()?;
    Ok(StorageBytes {
        baseline_optimized: export_store(&baseline, WireMode::Optimized).len(),
        baseline_verbose: export_store(&baseline, WireMode::Verbose).len(),
        history100_optimized: export_store(&history, WireMode::Optimized).len(),
        history100_verbose: export_store(&history, WireMode::Verbose).len(),
    })
}
