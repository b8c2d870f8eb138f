//! Experiment configs, built-in presets, CSV output and the closed-form
//! page-table memory overhead model.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::SnapshotDump;
use crate::machine::{Machine, MachineConfig, PolicyKind, SocketMask, FRAME_SIZE};
use crate::pagetable::PageSize;
use crate::policy::{PolicyEngine, SystemPolicy};
use crate::workload::{
    apply_fragmentation, run_scenario_with_dump, Mitosis, Pattern, Placement, RunError, RunStats,
    ScenarioConfig, WorkloadSpec,
};

pub const KB: u64 = 1 << 10;
pub const MB: u64 = 1 << 20;
pub const GB: u64 = 1 << 30;
pub const TB: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown preset `{0}` (migration-4k, migration-2m, multisocket-4k, multisocket-2m, fragmentation, memtable)")]
    UnknownPreset(String),
    #[error("scenario {scenario}: {source}")]
    Run { scenario: String, source: RunError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Page-table bytes for a compact `footprint` and the resulting memory
/// ratio with `replicas` copies relative to one.
pub fn mem_overhead(footprint: u64, replicas: u32) -> Result<(u64, f64), ExperimentError> {
    if footprint == 0 || replicas == 0 {
        return Err(ExperimentError::Config("footprint and replicas must be at least 1".into()));
    }
    let level = |span: u64| footprint.div_ceil(span).max(1);
    let pt_pages = 1 + level(512 * GB) + level(GB) + level(2 * MB);
    let pt = pt_pages * FRAME_SIZE;
    let (f, p) = (footprint as f64, pt as f64);
    Ok((pt, (f + replicas as f64 * p) / (f + p)))
}

pub const MEMTABLE_FOOTPRINTS: [u64; 4] = [MB, GB, TB, 16 * TB];
pub const MEMTABLE_REPLICAS: [u32; 5] = [1, 2, 4, 8, 16];

/// Size with a binary unit and two decimals, e.g. `2.01 MB`.
pub fn human_bytes(bytes: u64) -> String {
    let units = [("TB", TB), ("GB", GB), ("MB", MB), ("KB", KB)];
    for (name, unit) in units {
        if bytes >= unit || (name == "MB" && bytes >= 10 * KB) {
            return format!("{:.2} {name}", bytes as f64 / unit as f64);
        }
    }
    format!("{bytes} B")
}

/// Parses `512MB`, `1GB`, `16TB`, `4096` and similar.
pub fn parse_bytes(text: &str) -> Result<u64, String> {
    let t = text.trim().to_ascii_uppercase();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("bad size `{text}`"))?;
    let mult = match unit.trim() {
        "" | "B" => 1,
        "K" | "KB" => KB,
        "M" | "MB" => MB,
        "G" | "GB" => GB,
        "T" | "TB" => TB,
        _ => return Err(format!("bad size unit in `{text}`")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("size `{text}` overflows"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemtableSpec {
    pub footprints: Vec<u64>,
    pub replicas: Vec<u32>,
}

impl Default for MemtableSpec {
    fn default() -> Self {
        MemtableSpec {
            footprints: MEMTABLE_FOOTPRINTS.to_vec(),
            replicas: MEMTABLE_REPLICAS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemtableRow {
    pub footprint: u64,
    pub pt_bytes: u64,
    pub ratios: Vec<f64>,
}

pub fn memtable(spec: &MemtableSpec) -> Result<Vec<MemtableRow>, ExperimentError> {
    spec.footprints
        .iter()
        .map(|&f| {
            let ratios = spec
                .replicas
                .iter()
                .map(|&r| mem_overhead(f, r).map(|(_, ratio)| ratio))
                .collect::<Result<_, _>>()?;
            Ok(MemtableRow {
                footprint: f,
                pt_bytes: mem_overhead(f, 1)?.0,
                ratios,
            })
        })
        .collect()
}

pub fn render_memtable(spec: &MemtableSpec, rows: &[MemtableRow]) -> String {
    let mut out = format!("{:>10} | {:>10}", "Footprint", "PT Size");
    for r in &spec.replicas {
        let _ = write!(out, " | {r:>6}");
    }
    out.push('\n');
    for row in rows {
        let footprint = human_bytes(row.footprint).replace(".00 ", " ");
        let _ = write!(out, "{footprint:>10} | {:>10}", human_bytes(row.pt_bytes));
        for ratio in &row.ratios {
            let _ = write!(out, " | {ratio:>6.3}");
        }
        out.push('\n');
    }
    out
}

pub fn memtable_csv(spec: &MemtableSpec, rows: &[MemtableRow]) -> String {
    let mut out = String::from("footprint_bytes,pt_bytes");
    for r in &spec.replicas {
        let _ = write!(out, ",ratio_r{r}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.footprint, row.pt_bytes);
        for ratio in &row.ratios {
            let _ = write!(out, ",{ratio:.3}");
        }
        out.push('\n');
    }
    out
}

/// A scenario bound to a workload, with an optional baseline row for
/// normalized runtime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub scenario: ScenarioConfig,
    pub workload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Directory for one page-table snapshot per scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dumps: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Replaces every workload seed when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub machine: MachineConfig,
    #[serde(default, with = "policy_text")]
    pub sys_policy: SystemPolicy,
    #[serde(default, rename = "workload")]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default, rename = "run")]
    pub runs: Vec<RunEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memtable: Option<MemtableSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

mod policy_text {
    use super::SystemPolicy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &SystemPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(p)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SystemPolicy, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.machine.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.runs.is_empty() && self.memtable.is_none() {
            return bad("nothing to run: add [[run]] entries or a [memtable] block".into());
        }
        for run in &self.runs {
            let name = &run.scenario.name;
            if !self.workloads.iter().any(|w| w.name == run.workload) {
                return bad(format!("run {name}: unknown workload `{}`", run.workload));
            }
            if self.runs.iter().filter(|r| &r.scenario.name == name).count() > 1 {
                return bad(format!("duplicate run name `{name}`"));
            }
            if let Some(b) = &run.baseline {
                if !self.runs.iter().any(|r| &r.scenario.name == b) {
                    return bad(format!("run {name}: unknown baseline `{b}`"));
                }
            }
        }
        Ok(())
    }

    fn workload(&self, name: &str) -> WorkloadSpec {
        let mut w = self
            .workloads
            .iter()
            .find(|w| w.name == name)
            .expect("validated workload reference")
            .clone();
        if let Some(seed) = self.seed {
            w.seed = seed;
        }
        w
    }

    /// Forces a per-process replication mask on every run.
    pub fn set_replication(&mut self, mask: SocketMask) {
        for run in &mut self.runs {
            run.scenario.mitosis = Mitosis::Replicate(mask);
        }
    }

    pub fn set_page_size(&mut self, page_size: PageSize) {
        for run in &mut self.runs {
            run.scenario.page_size = page_size;
        }
    }

    pub fn set_sockets(&mut self, sockets: usize) {
        self.machine.socket_count = sockets;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub workload: String,
    pub page_size: PageSize,
    pub mitosis: Mitosis,
    pub stats: RunStats,
    pub baseline: Option<String>,
    pub normalized: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub socket_count: usize,
    pub rows: Vec<ResultRow>,
    pub dumps: Vec<SnapshotDump>,
    pub memtable: Option<(MemtableSpec, Vec<MemtableRow>)>,
}

impl ExperimentResult {
    pub fn row(&self, scenario: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    pub fn csv_header(socket_count: usize) -> String {
        let mut h = String::from(
            "scenario,workload,page_size,mitosis,total_cycles,init_cycles,walk_cycles,walk_fraction",
        );
        for s in 0..socket_count {
            let _ = write!(h, ",remote_leaf_pct_s{s}");
        }
        h.push_str(",pt_frames,data_frames,baseline,normalized_runtime");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.socket_count);
        out.push('\n');
        for r in &self.rows {
            let s = &r.stats;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{:.4}",
                r.scenario,
                r.workload,
                r.page_size.label(),
                r.mitosis.to_string().replace(',', ";"),
                s.total_cycles,
                s.init_cycles,
                s.walk_cycles,
                s.walk_fraction
            );
            for pct in &s.remote_leaf_pct {
                match pct {
                    Some(p) => {
                        let _ = write!(out, ",{p:.2}");
                    }
                    None => out.push(','),
                }
            }
            let _ = write!(
                out,
                ",{},{},{},{}",
                s.pt_frames,
                s.data_frames,
                r.baseline.as_deref().unwrap_or(""),
                r.normalized.map(|n| format!("{n:.3}")).unwrap_or_default()
            );
            out.push('\n');
        }
        out
    }
}

/// Runs every entry, in parallel, keeping config order in the output.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let policy = PolicyEngine::new(cfg.sys_policy);
    let jobs: Vec<(ScenarioConfig, WorkloadSpec)> = cfg
        .runs
        .iter()
        .map(|r| (r.scenario.clone(), cfg.workload(&r.workload)))
        .collect();
    let results: Vec<Mutex<Option<Result<(RunStats, SnapshotDump), ExperimentError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((scenario, workload)) = jobs.get(i) else { break };
                let outcome = Machine::new(cfg.machine.clone())
                    .map_err(|e| ExperimentError::Config(e.to_string()))
                    .and_then(|mut machine| {
                        run_scenario_with_dump(&mut machine, scenario, workload, &policy).map_err(|source| {
                            ExperimentError::Run {
                                scenario: scenario.name.clone(),
                                source,
                            }
                        })
                    });
                *results[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    let mut rows = Vec::with_capacity(jobs.len());
    let mut dumps = Vec::with_capacity(jobs.len());
    for (entry, slot) in cfg.runs.iter().zip(results) {
        let (stats, dump) = slot.into_inner().expect("result slot").expect("every job ran")?;
        rows.push(ResultRow {
            scenario: entry.scenario.name.clone(),
            workload: entry.workload.clone(),
            page_size: entry.scenario.page_size,
            mitosis: entry.scenario.mitosis,
            stats,
            baseline: entry.baseline.clone(),
            normalized: None,
        });
        dumps.push(dump);
    }
    let totals: Vec<(String, u64)> = rows.iter().map(|r| (r.scenario.clone(), r.stats.total_cycles)).collect();
    for row in &mut rows {
        if let Some(b) = &row.baseline {
            let base = totals.iter().find(|(n, _)| n == b).map(|&(_, t)| t).unwrap_or(0);
            if base > 0 {
                row.normalized = Some(row.stats.total_cycles as f64 / base as f64);
            }
        }
    }
    let memtable = match &cfg.memtable {
        Some(spec) => Some((spec.clone(), memtable(spec)?)),
        None => None,
    };
    Ok(ExperimentResult {
        socket_count: cfg.machine.socket_count,
        rows,
        dumps,
        memtable,
    })
}

/// Writes the CSV and dumps named in `cfg.output`, relative to `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<(), ExperimentError> {
    if let Some(csv) = &cfg.output.csv {
        let path = dir.join(csv);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = match &result.memtable {
            Some((spec, rows)) if result.rows.is_empty() => memtable_csv(spec, rows),
            _ => result.to_csv(),
        };
        std::fs::write(path, text)?;
    }
    if let Some(d) = &cfg.output.dumps {
        let dumps = dir.join(d);
        std::fs::create_dir_all(&dumps)?;
        for (row, dump) in result.rows.iter().zip(&result.dumps) {
            let name = row.scenario.replace(['/', ' '], "_");
            std::fs::write(dumps.join(format!("{name}.jsonl")), dump.to_jsonl())?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Migration4k,
    Migration2m,
    Multisocket4k,
    Multisocket2m,
    Fragmentation,
    Memtable,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Migration4k,
        Preset::Migration2m,
        Preset::Multisocket4k,
        Preset::Multisocket2m,
        Preset::Fragmentation,
        Preset::Memtable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Migration4k => "migration-4k",
            Preset::Migration2m => "migration-2m",
            Preset::Multisocket4k => "multisocket-4k",
            Preset::Multisocket2m => "multisocket-2m",
            Preset::Fragmentation => "fragmentation",
            Preset::Memtable => "memtable",
        }
    }
}

impl FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ExperimentError::UnknownPreset(s.into()))
    }
}

/// Desk-scale footprint: far beyond 4KB TLB reach.
pub const DESK_FOOTPRINT: u64 = 512 * MB;
pub const DESK_ACCESSES: u64 = 1_000_000;
pub const DEFAULT_SEED: u64 = 42;
pub const FRAG_SWEEP: [f64; 4] = [0.0, 0.5, 0.9, 1.0];

pub fn preset(name: &str) -> Result<ExperimentConfig, ExperimentError> {
    Ok(build_preset(name.parse()?))
}

pub fn build_preset(p: Preset) -> ExperimentConfig {
    let machine = MachineConfig::default();
    let single = |name: &str| WorkloadSpec {
        name: name.into(),
        seed: DEFAULT_SEED,
        ..WorkloadSpec::new(Pattern::UniformRandom, DESK_FOOTPRINT, DESK_ACCESSES, &[0])
    };
    let entry = |scenario: ScenarioConfig, workload: &str, baseline: &str| RunEntry {
        scenario,
        workload: workload.into(),
        baseline: Some(baseline.into()),
    };
    let mut cfg = ExperimentConfig {
        seed: None,
        machine: machine.clone(),
        sys_policy: SystemPolicy::PerProcess,
        workloads: Vec::new(),
        runs: Vec::new(),
        memtable: None,
        output: OutputSpec {
            csv: Some(format!("{}.csv", p.name())),
            dumps: None,
        },
    };
    match p {
        Preset::Migration4k | Preset::Migration2m => {
            let size = if p == Preset::Migration4k { PageSize::Small } else { PageSize::Huge };
            cfg.workloads.push(single("gups"));
            let baseline = format!("LP-LD-{}", size.label());
            for mitosis in [false, true] {
                for placement in Placement::ALL {
                    cfg.runs.push(entry(ScenarioConfig::migration(placement, size, mitosis), "gups", &baseline));
                }
            }
        }
        Preset::Multisocket4k | Preset::Multisocket2m => {
            let size = if p == Preset::Multisocket4k { PageSize::Small } else { PageSize::Huge };
            let sockets: Vec<usize> = (0..machine.socket_count).collect();
            cfg.workloads.push(WorkloadSpec {
                name: "gups-mt".into(),
                seed: DEFAULT_SEED,
                ..WorkloadSpec::new(Pattern::UniformRandom, DESK_FOOTPRINT, DESK_ACCESSES, &sockets)
            });
            let baseline = format!("F-{}", size.label());
            for (label, kind) in [("F", PolicyKind::FirstTouch), ("I", PolicyKind::Interleave)] {
                for mitosis in [false, true] {
                    let mut s = ScenarioConfig::new(format!("{label}{}-{}", if mitosis { "+M" } else { "" }, size.label()), kind, kind);
                    s.page_size = size;
                    if mitosis {
                        s.mitosis = Mitosis::Replicate(SocketMask::all(machine.socket_count));
                    }
                    cfg.runs.push(entry(s, "gups-mt", &baseline));
                }
            }
        }
        Preset::Fragmentation => {
            cfg.workloads.push(single("gups"));
            let local = ScenarioConfig::migration(Placement::LpLd, PageSize::Small, false);
            let base = ScenarioConfig {
                name: "LP-LD-4k".into(),
                ..local.clone()
            };
            cfg.runs.push(entry(base, "gups", "LP-LD-4k"));
            let huge = ScenarioConfig {
                name: "LP-LD-2m".into(),
                page_size: PageSize::Huge,
                ..local
            };
            for prob in FRAG_SWEEP {
                cfg.runs.push(entry(apply_fragmentation(&huge, prob), "gups", "LP-LD-4k"));
            }
        }
        Preset::Memtable => {
            cfg.memtable = Some(MemtableSpec::default());
        }
    }
    cfg
}
