//! Synthetic workloads driven through the translation engines: thread
//! placement, first-touch initialization, migration events, interference
//! and fragmentation-driven fallback from 2MB to 4KB pages.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::SnapshotDump;
use crate::machine::{AllocPolicy, Machine, PolicyKind, SocketId, SocketMask, FRAME_SIZE, FRAMES_PER_HUGE};
use crate::pagetable::{AddressSpace, PageSize, Perms, PtError, HUGE_PAGE_SIZE};
use crate::policy::PolicyEngine;
use crate::translation::{TranslationConfig, TranslationEngine, WalkStats};

/// Start of the simulated heap; 1GB aligned.
pub const HEAP_BASE: u64 = 1 << 30;

#[derive(Debug, Error, PartialEq)]
pub enum RunError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    PageTable(#[from] PtError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// GUPS-like random 8-byte updates.
    UniformRandom,
    /// 64-byte strided streaming per thread.
    SequentialStream,
    /// Random bucket followed by two neighbouring cachelines.
    HashProbe,
    /// Four dependent node visits down a BTree-like hierarchy.
    PointerChase,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::UniformRandom,
        Pattern::SequentialStream,
        Pattern::HashProbe,
        Pattern::PointerChase,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Pattern::UniformRandom => "uniform-random",
            Pattern::SequentialStream => "sequential-stream",
            Pattern::HashProbe => "hash-probe",
            Pattern::PointerChase => "pointer-chase",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| format!("unknown pattern `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadSpec {
    pub id: usize,
    pub socket: SocketId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub pattern: Pattern,
    pub footprint_bytes: u64,
    /// Total accesses, shared round-robin by the threads.
    pub accesses: u64,
    #[serde(default)]
    pub write_ratio: f64,
    pub threads: Vec<ThreadSpec>,
    #[serde(default)]
    pub init_socket: SocketId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_compute")]
    pub compute_cycles: u64,
}

fn default_name() -> String {
    "workload".into()
}

fn default_compute() -> u64 {
    50
}

impl WorkloadSpec {
    pub fn new(pattern: Pattern, footprint_bytes: u64, accesses: u64, sockets: &[SocketId]) -> Self {
        WorkloadSpec {
            name: pattern.label().into(),
            pattern,
            footprint_bytes,
            accesses,
            write_ratio: 0.0,
            threads: sockets
                .iter()
                .enumerate()
                .map(|(id, &socket)| ThreadSpec { id, socket })
                .collect(),
            init_socket: 0,
            seed: 0,
            compute_cycles: 50,
        }
    }

    pub fn validate(&self, machine: &Machine) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::ConfigMismatch(m));
        if self.threads.is_empty() {
            return bad("workload needs at least one thread".into());
        }
        if self.footprint_bytes == 0 || self.footprint_bytes % FRAME_SIZE != 0 {
            return bad("footprint must be a positive multiple of 4KB".into());
        }
        if self.footprint_bytes > machine.capacity_bytes() {
            return bad("footprint exceeds machine capacity".into());
        }
        if !(0.0..=1.0).contains(&self.write_ratio) {
            return bad("write_ratio must be in [0, 1]".into());
        }
        let n = machine.socket_count();
        if self.init_socket >= n || self.threads.iter().any(|t| t.socket >= n) {
            return bad("thread or init socket outside the machine".into());
        }
        Ok(())
    }
}

/// Placement matrix of the migration experiment. Socket A runs the
/// workload; B is the other socket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    #[serde(rename = "LP-LD")]
    LpLd,
    #[serde(rename = "LP-RD")]
    LpRd,
    #[serde(rename = "RP-LD")]
    RpLd,
    #[serde(rename = "RP-RD")]
    RpRd,
    #[serde(rename = "RPI-LD")]
    RpiLd,
    #[serde(rename = "LP-RDI")]
    LpRdi,
    #[serde(rename = "RPI-RDI")]
    RpiRdi,
}

pub const SOCKET_A: SocketId = 0;
pub const SOCKET_B: SocketId = 1;

impl Placement {
    pub const ALL: [Placement; 7] = [
        Placement::LpLd,
        Placement::LpRd,
        Placement::RpLd,
        Placement::RpRd,
        Placement::RpiLd,
        Placement::LpRdi,
        Placement::RpiRdi,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Placement::LpLd => "LP-LD",
            Placement::LpRd => "LP-RD",
            Placement::RpLd => "RP-LD",
            Placement::RpRd => "RP-RD",
            Placement::RpiLd => "RPI-LD",
            Placement::LpRdi => "LP-RDI",
            Placement::RpiRdi => "RPI-RDI",
        }
    }

    pub fn pt_socket(self) -> SocketId {
        match self {
            Placement::LpLd | Placement::LpRd | Placement::LpRdi => SOCKET_A,
            _ => SOCKET_B,
        }
    }

    pub fn data_socket(self) -> SocketId {
        match self {
            Placement::LpLd | Placement::RpLd | Placement::RpiLd => SOCKET_A,
            _ => SOCKET_B,
        }
    }

    pub fn interference(self) -> SocketMask {
        match self {
            Placement::RpiLd | Placement::LpRdi | Placement::RpiRdi => SocketMask::single(SOCKET_B),
            _ => SocketMask::empty(),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Placement::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown placement `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mitosis {
    #[default]
    Off,
    Replicate(SocketMask),
    MigrateOnMove,
}

impl Mitosis {
    pub fn is_on(self) -> bool {
        self != Mitosis::Off
    }
}

impl fmt::Display for Mitosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mitosis::Off => f.write_str("off"),
            Mitosis::Replicate(m) => write!(f, "replicate:{m}"),
            Mitosis::MigrateOnMove => f.write_str("migrate-on-move"),
        }
    }
}

impl FromStr for Mitosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Mitosis::Off),
            "migrate-on-move" | "migrate" => Ok(Mitosis::MigrateOnMove),
            _ => match s.strip_prefix("replicate:") {
                Some(list) => SocketMask::parse(list).map(Mitosis::Replicate),
                None => Err(format!("unknown mitosis mode `{s}` (off, replicate:<sockets>, migrate-on-move)")),
            },
        }
    }
}

impl TryFrom<String> for Mitosis {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Mitosis> for String {
    fn from(m: Mitosis) -> String {
        m.to_string()
    }
}

/// Threads on `from` move to `to` before access number `at`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationEvent {
    pub at: u64,
    pub from: SocketId,
    pub to: SocketId,
    /// Also move every data frame to `to`.
    #[serde(default)]
    pub move_data: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default = "default_page_size")]
    pub page_size: PageSize,
    #[serde(default)]
    pub mitosis: Mitosis,
    pub data_policy: PolicyKind,
    pub pt_policy: PolicyKind,
    #[serde(default)]
    pub interference_sockets: SocketMask,
    #[serde(default = "default_interference")]
    pub interference_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub migration: Option<MigrationEvent>,
    #[serde(default)]
    pub frag_fail_prob: f64,
    /// Overrides the workload's initialization socket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_socket: Option<SocketId>,
    /// Overrides the workload's thread sockets, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_sockets: Option<Vec<SocketId>>,
    #[serde(default)]
    pub translation: TranslationConfig,
}

fn default_page_size() -> PageSize {
    PageSize::Small
}

fn default_interference() -> f64 {
    1.5
}

impl ScenarioConfig {
    pub fn new(name: impl Into<String>, data_policy: PolicyKind, pt_policy: PolicyKind) -> Self {
        ScenarioConfig {
            name: name.into(),
            placement: None,
            page_size: PageSize::Small,
            mitosis: Mitosis::Off,
            data_policy,
            pt_policy,
            interference_sockets: SocketMask::empty(),
            interference_factor: 1.5,
            migration: None,
            frag_fail_prob: 0.0,
            init_socket: None,
            thread_sockets: None,
            translation: TranslationConfig::default(),
        }
    }

    /// One cell of the migration matrix. The process starts on B, where
    /// page-tables may have been built, and runs on A from the first access.
    /// Data is first touched where it ends up.
    pub fn migration(placement: Placement, page_size: PageSize, mitosis: bool) -> Self {
        let mut name = format!("{placement}-{}", page_size.label());
        if mitosis {
            name.push_str("+M");
        }
        ScenarioConfig {
            placement: Some(placement),
            page_size,
            mitosis: if mitosis { Mitosis::MigrateOnMove } else { Mitosis::Off },
            interference_sockets: placement.interference(),
            migration: Some(MigrationEvent {
                at: 0,
                from: SOCKET_B,
                to: SOCKET_A,
                move_data: false,
            }),
            init_socket: Some(placement.data_socket()),
            thread_sockets: Some(vec![SOCKET_A]),
            ..ScenarioConfig::new(
                name,
                PolicyKind::Fixed(placement.data_socket()),
                PolicyKind::Fixed(placement.pt_socket()),
            )
        }
    }

    pub fn validate(&self, machine: &Machine) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::ConfigMismatch(format!("{}: {m}", self.name)));
        let n = machine.socket_count();
        if let Some(p) = self.placement {
            if n < 2 {
                return bad("placement scenarios need two sockets".into());
            }
            if self.pt_policy != PolicyKind::Fixed(p.pt_socket())
                || self.data_policy != PolicyKind::Fixed(p.data_socket())
                || self.interference_sockets != p.interference()
            {
                return bad(format!("policies do not match placement {p}"));
            }
        }
        for kind in [self.data_policy, self.pt_policy] {
            if let PolicyKind::Fixed(s) = kind {
                if s >= n {
                    return bad(format!("fixed socket {s} outside the machine"));
                }
            }
        }
        if !self.interference_sockets.is_subset_of(SocketMask::all(n)) || self.interference_factor < 1.0 {
            return bad("bad interference settings".into());
        }
        if let Mitosis::Replicate(m) = self.mitosis {
            if m.is_empty() || !m.is_subset_of(SocketMask::all(n)) {
                return bad("replication mask outside the machine".into());
            }
        }
        if !(0.0..=1.0).contains(&self.frag_fail_prob) {
            return bad("frag_fail_prob must be in [0, 1]".into());
        }
        if let Some(e) = self.migration {
            if e.from >= n || e.to >= n {
                return bad("migration socket outside the machine".into());
            }
        }
        self.translation.validate().or_else(|m| bad(m))
    }
}

/// Sets the chance that each 2MB mapping fails and falls back to 4KB pages.
pub fn apply_fragmentation(scenario: &ScenarioConfig, frag_fail_prob: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("{}-frag{frag_fail_prob}", scenario.name),
        frag_fail_prob,
        ..scenario.clone()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub total_cycles: u64,
    pub init_cycles: u64,
    pub walk_cycles: u64,
    pub walk_fraction: f64,
    /// Per socket, share of leaf page-table accesses that were remote.
    /// `None` for sockets that ran no walks.
    pub remote_leaf_pct: Vec<Option<f64>>,
    pub pt_frames: u64,
    pub data_frames: u64,
    pub huge_regions: u64,
    pub small_regions: u64,
    pub walk: WalkStats,
}

struct Stream {
    pattern: Pattern,
    rng: ChaCha8Rng,
    footprint: u64,
    cursor: u64,
    pending: Vec<u64>,
    chase_level: usize,
    /// (start, size) of each pointer-chase level, root first.
    levels: [(u64, u64); 4],
    write_ratio: f64,
}

impl Stream {
    fn new(spec: &WorkloadSpec, thread: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(thread as u64 + 1);
        let footprint = spec.footprint_bytes;
        let threads = spec.threads.len() as u64;
        let mut levels = [(0, 0); 4];
        let weights = [1u64, 16, 256, 4096];
        let total: u64 = weights.iter().sum();
        let mut start = 0;
        for (l, w) in weights.iter().enumerate() {
            let size = if l == 3 {
                footprint - start
            } else {
                (footprint / total * w).max(256) / 256 * 256
            };
            levels[l] = (start, size.max(256).min(footprint - start));
            start += levels[l].1;
        }
        Stream {
            pattern: spec.pattern,
            rng,
            footprint,
            cursor: footprint / threads * thread as u64 / 64 * 64,
            pending: Vec::with_capacity(2),
            chase_level: 0,
            levels,
            write_ratio: spec.write_ratio,
        }
    }

    fn next(&mut self) -> (u64, bool) {
        let offset = if let Some(o) = self.pending.pop() {
            o
        } else {
            match self.pattern {
                Pattern::UniformRandom => self.rng.gen_range(0..self.footprint) & !7,
                Pattern::SequentialStream => {
                    let o = self.cursor;
                    self.cursor = (self.cursor + 64) % self.footprint;
                    o
                }
                Pattern::HashProbe => {
                    let bucket = self.rng.gen_range(0..self.footprint) & !63;
                    self.pending.push((bucket + 128) % self.footprint);
                    self.pending.push((bucket + 64) % self.footprint);
                    bucket
                }
                Pattern::PointerChase => {
                    let (start, size) = self.levels[self.chase_level];
                    self.chase_level = (self.chase_level + 1) % 4;
                    start + (self.rng.gen_range(0..size) & !255)
                }
            }
        };
        let write = self.write_ratio > 0.0 && self.rng.gen_bool(self.write_ratio);
        (HEAP_BASE + offset, write)
    }
}

fn alloc_policy(kind: PolicyKind) -> AllocPolicy {
    kind.into()
}

/// Runs one scenario on a fresh machine and returns its stats.
pub fn run_scenario(
    machine: &mut Machine,
    scenario: &ScenarioConfig,
    workload: &WorkloadSpec,
    policy: &PolicyEngine,
) -> Result<RunStats, RunError> {
    run_scenario_with_dump(machine, scenario, workload, policy).map(|(s, _)| s)
}

/// As `run_scenario`, also returning the final page-table snapshot.
pub fn run_scenario_with_dump(
    machine: &mut Machine,
    scenario: &ScenarioConfig,
    workload: &WorkloadSpec,
    policy: &PolicyEngine,
) -> Result<(RunStats, SnapshotDump), RunError> {
    workload.validate(machine)?;
    scenario.validate(machine)?;
    policy
        .validate(machine.socket_count())
        .map_err(|e| RunError::ConfigMismatch(e.to_string()))?;
    let n = machine.socket_count();
    let init_socket = scenario.init_socket.unwrap_or(workload.init_socket);
    if init_socket >= n {
        return Err(RunError::ConfigMismatch("init socket outside the machine".into()));
    }
    let thread_sockets: Vec<SocketId> = match &scenario.thread_sockets {
        Some(list) if list.is_empty() => {
            return Err(RunError::ConfigMismatch("thread_sockets is empty".into()))
        }
        Some(list) if list.iter().any(|&s| s >= n) => {
            return Err(RunError::ConfigMismatch("thread socket outside the machine".into()))
        }
        Some(list) => list.clone(),
        None => workload.threads.iter().map(|t| t.socket).collect(),
    };
    let running_on: SocketMask = thread_sockets.iter().copied().collect();

    for s in scenario.interference_sockets.iter() {
        machine
            .set_interference(s, scenario.interference_factor)
            .map_err(PtError::from)?;
    }

    let pt_policy = policy.pt_policy_for(alloc_policy(scenario.pt_policy));
    let requested = match scenario.mitosis {
        Mitosis::Replicate(mask) => mask,
        _ => match pt_policy.kind {
            PolicyKind::Fixed(s) => SocketMask::single(s),
            _ => SocketMask::single(init_socket),
        },
    };
    let mask = policy.initial_mask(requested, running_on);
    let mut space = AddressSpace::create(machine, pt_policy, alloc_policy(scenario.data_policy), mask)?
        .with_page_size(scenario.page_size);

    let mut stats = RunStats::default();
    stats.init_cycles = initialize(machine, &mut space, scenario, workload, init_socket, &mut stats)?;

    let mut engines: Vec<TranslationEngine> = thread_sockets
        .iter()
        .map(|&s| TranslationEngine::new(s, scenario.translation))
        .collect();
    for e in &mut engines {
        policy.on_context_switch(&space, e);
    }
    let mut streams: Vec<Stream> = (0..engines.len()).map(|t| Stream::new(workload, t)).collect();

    let threads = engines.len() as u64;
    let mut remaining: Vec<u64> = (0..threads)
        .map(|t| workload.accesses / threads + u64::from(t < workload.accesses % threads))
        .collect();
    let mut leaf = vec![(0u64, 0u64); n];
    let mut access_cycles = 0u64;
    let mut pending_event = scenario.migration.filter(|e| e.at <= workload.accesses);
    let mut done = 0u64;
    loop {
        let mut progressed = false;
        for t in 0..engines.len() {
            if remaining[t] == 0 {
                continue;
            }
            if let Some(e) = pending_event.filter(|e| e.at == done) {
                migrate(machine, &mut space, &mut engines, policy, scenario, e)?;
                pending_event = None;
            }
            let (va, write) = streams[t].next();
            let engine = &mut engines[t];
            let tr = engine.translate(machine, &mut space, va, write)?;
            let socket = engine.socket();
            if let Some(w) = &tr.walk {
                let last = w.accesses.last().expect("walks touch at least one node");
                if last.local {
                    leaf[socket].0 += 1;
                } else {
                    leaf[socket].1 += 1;
                }
            }
            access_cycles += workload.compute_cycles + tr.walk_cycles() + machine.access_cost(socket, tr.data_frame);
            remaining[t] -= 1;
            done += 1;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    if let Some(e) = pending_event {
        migrate(machine, &mut space, &mut engines, policy, scenario, e)?;
    }

    for e in &engines {
        stats.walk.merge(&e.walk_stats());
    }
    stats.walk_cycles = stats.walk.walk_cycles;
    stats.total_cycles = stats.init_cycles + access_cycles;
    stats.walk_fraction = if stats.total_cycles == 0 {
        0.0
    } else {
        stats.walk_cycles as f64 / stats.total_cycles as f64
    };
    stats.remote_leaf_pct = leaf
        .iter()
        .map(|&(l, r)| (l + r > 0).then(|| r as f64 / (l + r) as f64 * 100.0))
        .collect();
    stats.pt_frames = space.pagetable_frames() as u64;
    stats.data_frames = space.data_frames();
    let dump = space.snapshot_dump();
    space.destroy(machine)?;
    Ok((stats, dump))
}

/// Maps the footprint in 2MB regions and first-touches every 4KB page from
/// `init_socket`. Returns the cycles spent on the data writes.
fn initialize(
    machine: &mut Machine,
    space: &mut AddressSpace,
    scenario: &ScenarioConfig,
    workload: &WorkloadSpec,
    init_socket: SocketId,
    stats: &mut RunStats,
) -> Result<u64, RunError> {
    let mut frag = ChaCha8Rng::seed_from_u64(workload.seed);
    frag.set_stream(0);
    let mut cycles = 0;
    let footprint = workload.footprint_bytes;
    let mut offset = 0;
    while offset < footprint {
        let len = HUGE_PAGE_SIZE.min(footprint - offset);
        let va = HEAP_BASE + offset;
        let want_huge = scenario.page_size == PageSize::Huge && len == HUGE_PAGE_SIZE && {
            let u: f64 = frag.gen();
            u >= scenario.frag_fail_prob
        };
        let huge = want_huge
            && match space.map_with(machine, va, len, Perms::RW, init_socket, PageSize::Huge) {
                Ok(_) => true,
                Err(PtError::OutOfMemory(_)) => false,
                Err(e) => return Err(e.into()),
            };
        if huge {
            stats.huge_regions += 1;
            let frame = space.software_walk(init_socket, va)?.data_frame;
            cycles += FRAMES_PER_HUGE * machine.access_cost(init_socket, frame);
        } else {
            stats.small_regions += 1;
            space.map_with(machine, va, len, Perms::RW, init_socket, PageSize::Small)?;
            for page in (va..va + len).step_by(FRAME_SIZE as usize) {
                let frame = space.software_walk(init_socket, page)?.data_frame;
                cycles += machine.access_cost(init_socket, frame);
            }
        }
        offset += len;
    }
    Ok(cycles)
}

fn migrate(
    machine: &mut Machine,
    space: &mut AddressSpace,
    engines: &mut [TranslationEngine],
    policy: &PolicyEngine,
    scenario: &ScenarioConfig,
    event: MigrationEvent,
) -> Result<(), RunError> {
    for e in engines.iter_mut().filter(|e| e.socket() == event.from) {
        e.set_socket(event.to);
    }
    if event.move_data {
        space.migrate_data(machine, event.to)?;
    }
    let follow = scenario.mitosis == Mitosis::MigrateOnMove;
    policy.on_process_migration(machine, space, event.from, event.to, follow)?;
    for e in engines.iter_mut() {
        policy.on_context_switch(space, e);
    }
    Ok(())
}

/// Multi-socket run without migration: threads on every socket, optional
/// replication on `mitosis_mask`.
pub fn run_multisocket(
    machine: &mut Machine,
    data_policy: PolicyKind,
    pt_policy: PolicyKind,
    mitosis_mask: Option<SocketMask>,
    workload: &WorkloadSpec,
) -> Result<RunStats, RunError> {
    let mut scenario = ScenarioConfig::new("multisocket", data_policy, pt_policy);
    if let Some(mask) = mitosis_mask {
        scenario.mitosis = Mitosis::Replicate(mask);
    }
    run_scenario(machine, &scenario, workload, &PolicyEngine::default())
}
