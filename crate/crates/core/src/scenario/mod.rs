//! Scenario files and the runners behind the CLI.
//!
//! A scenario file is flat `key = value` text. Keys outside any section (or
//! under `[scenario]`) configure the run. Keys under `[profile]` override
//! the hardware profile, which starts from `profile = <file>` if given and
//! from the default profile otherwise.
//!
//! Output is JSON lines (one object per sample or summary) plus a long-form
//! `scenario,run,metric,value` CSV of every numeric summary field. Neither
//! contains timestamps, so identical inputs give identical bytes.

pub mod echo;
pub mod latency;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::config::{parse_entries, ConfigError, Entry};
use crate::offload::bench::{batched_read_bench, linked_list_bench};
use crate::pipe::bench::{notify_bench, Mechanism};
use crate::pipe::element::{CqeStatus, WrOpcode};
use crate::rx::{run_rx, RxExperiment, RxMode};
use crate::sim::{HardwareProfile, Nanos, US};
use crate::transport::faults::{FaultPlan, RandomFaults};
use crate::transport::link::{run_link, LinkConfig};
use crate::transport::packet::Opcode;
use crate::transport::{GbnConfig, GbnReceiver, GbnSender, QpMode};
use crate::tx::{run_tx, TxExperiment, TxMode};
use crate::verbs::{Device, QpAttr, SendWr, VerbsError};

use echo::{run_echo, EchoExperiment, EchoMode};
use latency::{run_latency, LatencyMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    EchoServer,
    TxCompare,
    RxSweep,
    NotifyBench,
    LatencyL2Reflector,
    OffloadLinkedList,
    OffloadBatchedRead,
    BulkTransfer,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::EchoServer,
        ScenarioKind::TxCompare,
        ScenarioKind::RxSweep,
        ScenarioKind::NotifyBench,
        ScenarioKind::LatencyL2Reflector,
        ScenarioKind::OffloadLinkedList,
        ScenarioKind::OffloadBatchedRead,
        ScenarioKind::BulkTransfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::EchoServer => "echo_server",
            ScenarioKind::TxCompare => "tx_compare",
            ScenarioKind::RxSweep => "rx_sweep",
            ScenarioKind::NotifyBench => "notify_bench",
            ScenarioKind::LatencyL2Reflector => "latency_l2_reflector",
            ScenarioKind::OffloadLinkedList => "offload_linked_list",
            ScenarioKind::OffloadBatchedRead => "offload_batched_read",
            ScenarioKind::BulkTransfer => "bulk_transfer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn describe(self) -> &'static str {
        match self {
            ScenarioKind::EchoServer => {
                "echo throughput, naive Arm-memory staging vs the cache-resident stack"
            }
            ScenarioKind::TxCompare => {
                "TX throughput of header_only/dma_assist/rdma_assist with a reverse RX flow"
            }
            ScenarioKind::RxSweep => {
                "RX throughput and Arm memory traffic across working-set sizes"
            }
            ScenarioKind::NotifyBench => {
                "WQE submission latency and rate: dma_pipe, doorbell, mmio"
            }
            ScenarioKind::LatencyL2Reflector => "ping-pong RTT of standard vs low-latency QPs",
            ScenarioKind::OffloadLinkedList => {
                "pointer-chasing lookup latency, offloaded vs client-driven"
            }
            ScenarioKind::OffloadBatchedRead => {
                "batched gather throughput, offloaded vs sequential READs"
            }
            ScenarioKind::BulkTransfer => {
                "go-back-N bulk transfer under faults plus a verbs completion check"
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{0}")]
    Run(String),
}

impl From<VerbsError> for ScenarioError {
    fn from(e: VerbsError) -> Self {
        ScenarioError::Run(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    /// Base name of the output files; defaults to the scenario name.
    pub name: String,
    pub seed: u64,
    pub profile: HardwareProfile,
    /// Restricts the run to one mode of the scenario.
    pub mode: Option<String>,
    pub connections: usize,
    pub tx_depth: usize,
    pub payload_bytes: u64,
    /// RX elements per core; several values make a sweep.
    pub working_set: Vec<usize>,
    /// Unset keeps each experiment's own default.
    pub warmup: Option<Nanos>,
    pub duration: Option<Nanos>,
    pub ops: u64,
    pub batch: usize,
    pub max_hops: usize,
    pub messages: u64,
    pub rx_gbps: Option<f64>,
    pub loss: f64,
    pub reorder: f64,
    pub dup: f64,
    pub fault_schedule: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn new(scenario: ScenarioKind, seed: u64) -> Self {
        use ScenarioKind::*;
        ScenarioConfig {
            scenario,
            name: scenario.name().to_string(),
            seed,
            profile: HardwareProfile::bf3(),
            mode: None,
            connections: 4,
            tx_depth: if scenario == OffloadBatchedRead {
                16
            } else {
                64
            },
            payload_bytes: match scenario {
                LatencyL2Reflector | OffloadBatchedRead => 64,
                BulkTransfer => 4096,
                _ => 8192,
            },
            working_set: vec![1024],
            warmup: None,
            duration: None,
            ops: 10_000,
            batch: if scenario == OffloadBatchedRead {
                64
            } else {
                1
            },
            max_hops: 64,
            messages: 1000,
            rx_gbps: None,
            loss: 0.0,
            reorder: 0.0,
            dup: 0.0,
            fault_schedule: None,
            output: None,
        }
    }

    /// Parses scenario text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let entries = parse_entries(text)?;
        let (hw, run): (Vec<Entry>, Vec<Entry>) = entries
            .into_iter()
            .partition(|e| e.section.as_deref() == Some("profile"));
        if let Some(e) = run
            .iter()
            .find(|e| e.section.as_deref().is_some_and(|s| s != "scenario"))
        {
            return Err(ConfigError::Syntax {
                line: e.line,
                msg: format!(
                    "unknown section `{}`",
                    e.section.as_deref().unwrap_or_default()
                ),
            });
        }
        let find = |k: &str| run.iter().rev().find(|e| e.key == k);
        let kind = find("scenario").ok_or_else(|| ConfigError::Missing("scenario".into()))?;
        let scenario = ScenarioKind::parse(&kind.value).ok_or_else(|| {
            let names: Vec<_> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
            kind.value_error(format!("expected one of {}", names.join(", ")))
        })?;
        let seed = find("seed")
            .ok_or_else(|| ConfigError::Missing("seed".into()))?
            .parse()?;
        let mut c = ScenarioConfig::new(scenario, seed);
        let count = |e: &Entry| -> Result<u64, ConfigError> {
            let v: u64 = e.parse()?;
            if v == 0 {
                return Err(e.value_error("must be at least 1"));
            }
            Ok(v)
        };
        let fraction = |e: &Entry| -> Result<f64, ConfigError> {
            let v: f64 = e.parse()?;
            if !(0.0..1.0).contains(&v) {
                return Err(e.value_error("must be in [0, 1)"));
            }
            Ok(v)
        };
        for e in &run {
            match e.key.as_str() {
                "scenario" | "seed" => {}
                "name" => {
                    if e.value.is_empty() || e.value.contains(['/', '\\']) {
                        return Err(e.value_error("must be a plain file name"));
                    }
                    c.name = e.value.clone();
                }
                "profile" => {
                    let path = base_dir.join(&e.value);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|err| e.value_error(format!("{}: {err}", path.display())))?;
                    c.profile = HardwareProfile::from_config(&text)
                        .map_err(|err| e.value_error(format!("{}: {err}", path.display())))?;
                }
                "mode" => c.mode = Some(e.value.clone()),
                "connections" => c.connections = count(e)? as usize,
                "tx_depth" => c.tx_depth = count(e)? as usize,
                "payload_bytes" => c.payload_bytes = count(e)?,
                "working_set" => {
                    c.working_set = e
                        .value
                        .split(',')
                        .map(|v| match v.trim().parse::<usize>() {
                            Ok(n) if n > 0 => Ok(n),
                            _ => Err(e.value_error(format!(
                                "`{}` is not a count of at least 1",
                                v.trim()
                            ))),
                        })
                        .collect::<Result<_, _>>()?;
                }
                "warmup_us" => c.warmup = Some(e.parse::<u64>()? * US),
                "duration_us" => c.duration = Some(count(e)? * US),
                "ops" => c.ops = count(e)?,
                "batch" => c.batch = count(e)? as usize,
                "max_hops" => c.max_hops = count(e)? as usize,
                "messages" => c.messages = count(e)?,
                "rx_gbps" => c.rx_gbps = Some(e.parse()?),
                "loss" => c.loss = fraction(e)?,
                "reorder" => c.reorder = fraction(e)?,
                "dup" => c.dup = fraction(e)?,
                "fault_schedule" => c.fault_schedule = Some(base_dir.join(&e.value)),
                "output" => c.output = Some(base_dir.join(&e.value)),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line: e.line,
                        key: e.key.clone(),
                    })
                }
            }
        }
        c.profile.apply_entries(&hw)?;
        if let Some(m) = &c.mode {
            if !c.modes().contains(&m.as_str()) {
                let e = find("mode").expect("mode came from an entry");
                return Err(e.value_error(format!("expected one of {}", c.modes().join(", "))));
            }
        }
        if scenario == ScenarioKind::OffloadLinkedList && c.max_hops < 2 {
            let e = find("max_hops").expect("default is above 2");
            return Err(e.value_error("must be at least 2"));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| ScenarioError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Mode names this scenario runs by default.
    pub fn modes(&self) -> Vec<&'static str> {
        match self.scenario {
            ScenarioKind::EchoServer => EchoMode::ALL.iter().map(|m| m.name()).collect(),
            ScenarioKind::TxCompare => TxMode::ALL.iter().map(|m| m.name()).collect(),
            ScenarioKind::RxSweep => RxMode::ALL.iter().map(|m| m.name()).collect(),
            ScenarioKind::NotifyBench => Mechanism::ALL.iter().map(|m| m.name()).collect(),
            ScenarioKind::LatencyL2Reflector => LatencyMode::ALL.iter().map(|m| m.name()).collect(),
            ScenarioKind::OffloadLinkedList | ScenarioKind::OffloadBatchedRead => {
                vec!["offloaded_vs_baseline"]
            }
            ScenarioKind::BulkTransfer => vec!["gbn"],
        }
    }

    fn selected(&self) -> Vec<&'static str> {
        self.modes()
            .into_iter()
            .filter(|m| self.mode.as_deref().is_none_or(|s| s == *m))
            .collect()
    }
}

/// Metrics of one scenario run.
#[derive(Debug, Clone, Default)]
pub struct ScenarioOutput {
    pub records: Vec<Value>,
}

impl ScenarioOutput {
    fn push(&mut self, scenario: ScenarioKind, run: &str, kind: &str, body: Value) {
        let mut m = Map::new();
        m.insert("scenario".into(), scenario.name().into());
        m.insert("run".into(), run.into());
        m.insert("type".into(), kind.into());
        if let Value::Object(b) = body {
            m.extend(b);
        }
        self.records.push(Value::Object(m));
    }

    pub fn summaries(&self) -> impl Iterator<Item = &Value> {
        self.records.iter().filter(|r| r["type"] == "summary")
    }

    /// Summary field `metric` of run `run`.
    pub fn metric(&self, run: &str, metric: &str) -> Option<f64> {
        self.summaries()
            .find(|r| r["run"] == run)
            .and_then(|r| r.get(metric))
            .and_then(Value::as_f64)
    }

    pub fn jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("scenario,run,metric,value\n");
        for r in self.summaries() {
            let Value::Object(m) = r else { continue };
            for (k, v) in m {
                if v.is_number() || v.is_boolean() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{}",
                        r["scenario"].as_str().unwrap_or(""),
                        r["run"].as_str().unwrap_or(""),
                        k,
                        v
                    );
                }
            }
        }
        s
    }

    /// Writes `<name>.jsonl` and `<name>_summary.csv` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf), ScenarioError> {
        let io = |path: &Path, e: std::io::Error| ScenarioError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let jsonl = dir.join(format!("{name}.jsonl"));
        let csv = dir.join(format!("{name}_summary.csv"));
        std::fs::write(&jsonl, self.jsonl()).map_err(|e| io(&jsonl, e))?;
        std::fs::write(&csv, self.csv()).map_err(|e| io(&csv, e))?;
        Ok((jsonl, csv))
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("metrics serialize")
}

/// Rate samples from a cumulative (time, bytes) series.
fn rate_series(series: &[(Nanos, u64)]) -> impl Iterator<Item = Value> + '_ {
    series.windows(2).map(|w| {
        let dt = (w[1].0 - w[0].0).max(1) as f64;
        json!({ "t_ns": w[1].0, "gbps": (w[1].1 - w[0].1) as f64 * 8.0 / dt })
    })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutput, ScenarioError> {
    let mut out = ScenarioOutput::default();
    let kind = cfg.scenario;
    let p = &cfg.profile;
    let run_err = |e: &dyn std::fmt::Display| ScenarioError::Run(e.to_string());
    for mode in cfg.selected() {
        match kind {
            ScenarioKind::EchoServer => {
                let mut exp = EchoExperiment::new(EchoMode::parse(mode).expect("listed mode"));
                exp.packet_bytes = cfg.payload_bytes;
                exp.window = cfg.connections * cfg.tx_depth;
                exp.warmup = cfg.warmup.unwrap_or(exp.warmup);
                exp.duration = cfg.duration.unwrap_or(exp.duration);
                let r = run_echo(&exp, p, cfg.seed);
                for s in rate_series(&r.series) {
                    out.push(kind, mode, "sample", s);
                }
                let mut v = to_value(&r);
                v.as_object_mut().unwrap().remove("series");
                out.push(kind, mode, "summary", v);
            }
            ScenarioKind::TxCompare => {
                let mut exp =
                    TxExperiment::new(TxMode::parse(mode).expect("listed mode"), cfg.payload_bytes);
                exp.sqs = cfg.connections;
                exp.depth = cfg.tx_depth;
                exp.warmup = cfg.warmup.unwrap_or(exp.warmup);
                exp.window = cfg.duration.unwrap_or(exp.window);
                exp.rx_gbps = Some(cfg.rx_gbps.unwrap_or(p.endpoint_rate_gbps));
                let r = run_tx(&exp, p, cfg.seed);
                for s in rate_series(&r.series) {
                    out.push(kind, mode, "sample", s);
                }
                let mut v = to_value(&r);
                v["drop_fraction"] = to_value(&r.drop_fraction());
                out.push(kind, mode, "summary", v);
            }
            ScenarioKind::RxSweep => {
                for &count in &cfg.working_set {
                    let mut exp =
                        RxExperiment::new(RxMode::parse(mode).expect("listed mode"), count);
                    exp.element_bytes = cfg.payload_bytes;
                    exp.warmup = cfg.warmup.unwrap_or(exp.warmup);
                    exp.window = cfg.duration.unwrap_or(exp.window);
                    let r = run_rx(&exp, p, cfg.seed).map_err(|e| run_err(&e))?;
                    let run = format!("{mode}/{count}");
                    for s in &r.series {
                        out.push(kind, &run, "sample", to_value(s));
                    }
                    out.push(kind, &run, "summary", to_value(&r));
                }
            }
            ScenarioKind::NotifyBench => {
                let m = Mechanism::parse(mode).expect("listed mode");
                let r = notify_bench(p, m, cfg.ops, cfg.batch).map_err(|e| run_err(&e))?;
                out.push(kind, mode, "summary", to_value(&r));
            }
            ScenarioKind::LatencyL2Reflector => {
                let m = LatencyMode::ALL
                    .into_iter()
                    .find(|m| m.name() == mode)
                    .expect("listed mode");
                let r = run_latency(p, m, cfg.payload_bytes, cfg.ops, cfg.seed);
                for s in &r.breakdown {
                    out.push(kind, mode, "step", to_value(s));
                }
                let mut v = to_value(&r);
                let obj = v.as_object_mut().unwrap();
                obj.remove("breakdown");
                let rtt = obj.remove("rtt_ns").unwrap_or_default();
                for (k, x) in rtt.as_object().into_iter().flatten() {
                    obj.insert(format!("rtt_{k}"), x.clone());
                }
                out.push(kind, mode, "summary", v);
            }
            ScenarioKind::OffloadLinkedList => {
                let r = linked_list_bench(p, cfg.max_hops).map_err(|e| run_err(&e))?;
                for pt in &r.points {
                    out.push(kind, mode, "sample", to_value(pt));
                }
                let mut v = to_value(&r);
                v.as_object_mut().unwrap().remove("points");
                v["latency_ratio_max_hops"] = to_value(&r.latency_ratio(cfg.max_hops));
                out.push(kind, mode, "summary", v);
            }
            ScenarioKind::OffloadBatchedRead => {
                let r = batched_read_bench(
                    p,
                    cfg.batch,
                    cfg.payload_bytes,
                    cfg.tx_depth,
                    cfg.duration.unwrap_or(500 * US),
                )
                .map_err(|e| run_err(&e))?;
                out.push(kind, mode, "summary", to_value(&r));
            }
            ScenarioKind::BulkTransfer => {
                let v = bulk_transfer(cfg)?;
                out.push(kind, mode, "summary", v);
            }
        }
    }
    Ok(out)
}

fn bulk_transfer(cfg: &ScenarioConfig) -> Result<Value, ScenarioError> {
    let p = &cfg.profile;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let msg_bytes = cfg.payload_bytes.min(1 << 20) as usize;
    let mut sent = Vec::with_capacity(msg_bytes * cfg.messages as usize);
    let mut tx = GbnSender::new(
        1,
        0,
        GbnConfig {
            max_outstanding: cfg.tx_depth,
            ..GbnConfig::default()
        },
    );
    let mut rx = GbnReceiver::new(1, 0);
    for _ in 0..cfg.messages {
        let mut m = vec![0u8; msg_bytes];
        rng.fill(&mut m[..]);
        tx.enqueue(Opcode::Send, &m, 0);
        sent.extend_from_slice(&m);
    }
    let plan = match &cfg.fault_schedule {
        Some(path) => FaultPlan::load(path)?,
        None => FaultPlan::random(RandomFaults {
            seed: cfg.seed,
            loss: cfg.loss,
            reorder: cfg.reorder,
            dup: cfg.dup,
            reorder_delay: 2 * p.wire_one_way_ns,
        }),
    };
    let rep = run_link(
        &mut tx,
        &mut rx,
        &plan,
        &LinkConfig::new(p.endpoint_rate_gbps, p.wire_one_way_ns),
    );
    let intact = rep.completed && rep.delivered == sent;

    // The same volume through the verbs surface: every other WR signaled.
    let buf = msg_bytes.min(64 * 1024) as u64;
    let mut dev = Device::open_device(p.clone(), (4 * buf) as usize);
    let ctx = dev.alloc_context()?;
    dev.reg_mr(ctx, 0, 4 * buf)?;
    let cq = dev.create_cq(ctx, cfg.tx_depth.max(16))?;
    let a = dev.create_qp(ctx, cq, cq, QpMode::Standard)?;
    let b = dev.create_qp(ctx, cq, cq, QpMode::Standard)?;
    for (x, y) in [(a, b), (b, a)] {
        dev.modify_qp(x, QpAttr::Init)?;
        dev.modify_qp(
            x,
            QpAttr::Rtr {
                peer: y,
                remote_psn: 0,
            },
        )?;
        dev.modify_qp(x, QpAttr::Rts { local_psn: 0 })?;
    }
    dev.write_host(0, &sent[..buf as usize])?;
    let mut cqes = 0u64;
    let mut failed = 0u64;
    let mut signaled = 0u64;
    for i in 0..cfg.messages {
        let wr = SendWr {
            wr_id: i,
            opcode: WrOpcode::Write,
            local_addr: 0,
            length: buf as u32,
            remote_addr: 2 * buf,
            signaled: i % 2 == 0 || i + 1 == cfg.messages,
            inline: false,
        };
        signaled += wr.signaled as u64;
        loop {
            match dev.post_send(a, &wr) {
                Err(VerbsError::Retry) => {
                    for c in dev.poll_cq(cq, 64)? {
                        cqes += 1;
                        failed += (c.status != CqeStatus::Success) as u64;
                    }
                }
                r => break r?,
            }
        }
    }
    let mut idle = 0;
    while cqes < signaled && idle < 1000 {
        let got = dev.poll_cq(cq, 64)?;
        idle = if got.is_empty() { idle + 1 } else { 0 };
        for c in got {
            cqes += 1;
            failed += (c.status != CqeStatus::Success) as u64;
        }
    }
    let copied = dev.read_host(2 * buf, buf as usize)? == sent[..buf as usize];
    let stats = dev.close_device();

    Ok(json!({
        "messages": cfg.messages,
        "message_bytes": msg_bytes,
        "sent_bytes": sent.len(),
        "delivered_bytes": rep.delivered_bytes,
        "stream_intact": intact,
        "data_packets": rep.data_packets,
        "retransmissions": rep.retransmissions,
        "dropped": rep.dropped,
        "duplicated": rep.duplicated,
        "delayed": rep.delayed,
        "finish_ns": rep.finish_ns,
        "goodput_gbps": rep.goodput_gbps(),
        "verbs_signaled_wrs": signaled,
        "verbs_cqes": cqes,
        "verbs_failed_cqes": failed,
        "verbs_payload_intact": copied,
        "verbs_sqes": stats.sqes,
        "verbs_pipe_dmas": stats.pipe_dmas,
    }))
}
