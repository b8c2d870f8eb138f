//! System-wide and per-process replication policy, plus the scheduler hooks
//! that pick a socket-local root and move page-tables with their process.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::machine::{AllocPolicy, FrameNumber, Machine, SocketId, SocketMask};
use crate::pagetable::{AddressSpace, PtError};
use crate::translation::{TranslationEngine, WalkStats};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "state", content = "socket")]
pub enum SystemPolicy {
    Disabled,
    #[default]
    PerProcess,
    FixedSocket(SocketId),
    AllProcesses,
}

impl fmt::Display for SystemPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemPolicy::Disabled => f.write_str("off"),
            SystemPolicy::PerProcess => f.write_str("per-process"),
            SystemPolicy::FixedSocket(s) => write!(f, "fixed:{s}"),
            SystemPolicy::AllProcesses => f.write_str("all"),
        }
    }
}

impl FromStr for SystemPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" | "disabled" => Ok(SystemPolicy::Disabled),
            "per-process" => Ok(SystemPolicy::PerProcess),
            "all" => Ok(SystemPolicy::AllProcesses),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|n| n.parse().ok())
                .map(SystemPolicy::FixedSocket)
                .ok_or_else(|| format!("unknown system policy `{s}` (off, per-process, fixed:<s>, all)")),
        }
    }
}

/// Outcome of a per-process mask request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskDecision {
    Applied(SocketMask),
    /// The system policy overrode the request; the space now uses this mask.
    Overridden(SocketMask),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PolicyEngine {
    system: SystemPolicy,
    /// Drop the source replica after migrating a page-table.
    pub eager_free: bool,
}

impl PolicyEngine {
    pub fn new(system: SystemPolicy) -> Self {
        PolicyEngine {
            system,
            eager_free: true,
        }
    }

    pub fn system_policy(&self) -> SystemPolicy {
        self.system
    }

    /// Takes effect on each space at its next mask operation or `enforce`.
    pub fn set_system_policy(&mut self, state: SystemPolicy) {
        self.system = state;
    }

    pub fn validate(&self, socket_count: usize) -> Result<(), PtError> {
        match self.system {
            SystemPolicy::FixedSocket(s) if s >= socket_count => Err(PtError::InvalidSocket(s)),
            _ => Ok(()),
        }
    }

    /// Page-table allocation policy a new space should use.
    pub fn pt_policy_for(&self, requested: AllocPolicy) -> AllocPolicy {
        match self.system {
            SystemPolicy::FixedSocket(s) => AllocPolicy::fixed(s),
            _ => requested,
        }
    }

    /// Mask a new space should start with, given what the process asked for
    /// and the sockets it will run on.
    pub fn initial_mask(&self, requested: SocketMask, running_on: SocketMask) -> SocketMask {
        match self.system {
            SystemPolicy::Disabled => SocketMask::single(requested.first().unwrap_or(0)),
            SystemPolicy::PerProcess => requested,
            SystemPolicy::FixedSocket(s) => SocketMask::single(s),
            SystemPolicy::AllProcesses => requested.iter().chain(running_on.iter()).collect(),
        }
    }

    /// Per-process replication request, filtered through the system policy.
    pub fn request_mask(
        &self,
        machine: &mut Machine,
        space: &mut AddressSpace,
        requested: SocketMask,
    ) -> Result<MaskDecision, PtError> {
        match self.system {
            SystemPolicy::PerProcess | SystemPolicy::AllProcesses => {
                let mask = match self.system {
                    SystemPolicy::AllProcesses => requested
                        .iter()
                        .chain(space.replication_mask().iter())
                        .collect(),
                    _ => requested,
                };
                space.set_replication_mask(machine, mask)?;
                if mask == requested {
                    Ok(MaskDecision::Applied(mask))
                } else {
                    Ok(MaskDecision::Overridden(mask))
                }
            }
            SystemPolicy::Disabled | SystemPolicy::FixedSocket(_) => {
                self.enforce(machine, space, SocketMask::empty())?;
                let mask = space.replication_mask();
                if mask == requested {
                    Ok(MaskDecision::Applied(mask))
                } else {
                    Ok(MaskDecision::Overridden(mask))
                }
            }
        }
    }

    /// Brings `space` in line with the system policy. `running_on` lists the
    /// sockets the process has threads on.
    pub fn enforce(
        &self,
        machine: &mut Machine,
        space: &mut AddressSpace,
        running_on: SocketMask,
    ) -> Result<(), PtError> {
        match self.system {
            SystemPolicy::PerProcess => Ok(()),
            SystemPolicy::Disabled => {
                let primary = SocketMask::single(space.primary_socket());
                space.set_replication_mask(machine, primary)
            }
            SystemPolicy::AllProcesses => {
                let mask = space.replication_mask().iter().chain(running_on.iter()).collect();
                space.set_replication_mask(machine, mask)
            }
            SystemPolicy::FixedSocket(s) => {
                if s >= space.socket_count() {
                    return Err(PtError::InvalidSocket(s));
                }
                space.set_pt_policy(AllocPolicy::fixed(s));
                let target = SocketMask::single(s);
                if space.replication_mask() == target && space.nodes().any(|n| n.socket() != s) {
                    // A single replica is kept as-is by a mask change, so
                    // force a strict rebuild through a two-socket mask.
                    if let Some(other) = (0..space.socket_count()).find(|&o| o != s) {
                        space.set_replication_mask(machine, target.with(other))?;
                    }
                }
                space.set_replication_mask(machine, target)
            }
        }
    }

    /// Loads the root for the engine's socket and flushes its TLB. No
    /// page-table entries are written.
    pub fn on_context_switch(&self, space: &AddressSpace, engine: &mut TranslationEngine) -> FrameNumber {
        engine.context_switch(space)
    }

    /// Moves the page-table along with a process moving `from` -> `to`.
    /// Without replication support the page-table stays where it is.
    pub fn on_process_migration(
        &self,
        machine: &mut Machine,
        space: &mut AddressSpace,
        from: SocketId,
        to: SocketId,
        mitosis_enabled: bool,
    ) -> Result<(), PtError> {
        if from == to || !mitosis_enabled {
            return Ok(());
        }
        match self.system {
            SystemPolicy::Disabled | SystemPolicy::FixedSocket(_) => Ok(()),
            SystemPolicy::PerProcess | SystemPolicy::AllProcesses => {
                let source = if space.replication_mask().contains(from) {
                    from
                } else {
                    space.primary_socket()
                };
                let eager = self.eager_free && self.system == SystemPolicy::PerProcess;
                space.migrate_pagetable(machine, source, to, eager)
            }
        }
    }

    /// Hook for counter-driven replication decisions. No heuristic ships.
    pub fn suggest_mask(&self, _space: &AddressSpace, _stats: &[WalkStats]) -> Option<SocketMask> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;
    use crate::pagetable::Perms;
    use crate::translation::TranslationConfig;

    fn machine() -> Machine {
        Machine::new(MachineConfig {
            frames_per_socket: 1 << 15,
            pagecache_reserve: 16,
            ..Default::default()
        })
        .unwrap()
    }

    fn space(m: &mut Machine, pt: AllocPolicy, mask: SocketMask) -> AddressSpace {
        let mut s = AddressSpace::create(m, pt, AllocPolicy::first_touch(), mask).unwrap();
        s.map(m, 0, 8 << 20, Perms::RW, 0).unwrap();
        s
    }

    #[test]
    fn parses_cli_states() {
        for (text, p) in [
            ("off", SystemPolicy::Disabled),
            ("per-process", SystemPolicy::PerProcess),
            ("fixed:2", SystemPolicy::FixedSocket(2)),
            ("all", SystemPolicy::AllProcesses),
        ] {
            assert_eq!(text.parse::<SystemPolicy>().unwrap(), p);
            assert_eq!(p.to_string(), text);
        }
        assert!("fixed:x".parse::<SystemPolicy>().is_err());
    }

    #[test]
    fn disabled_ignores_requests_and_collapses() {
        let mut m = machine();
        let mut s = space(&mut m, AllocPolicy::first_touch(), SocketMask::parse("0-1").unwrap());
        let p = PolicyEngine::new(SystemPolicy::Disabled);
        let d = p.request_mask(&mut m, &mut s, SocketMask::parse("0,1").unwrap()).unwrap();
        assert_eq!(d, MaskDecision::Overridden(SocketMask::single(0)));
        assert_eq!(s.replication_mask(), SocketMask::single(0));
    }

    #[test]
    fn fixed_socket_places_every_node() {
        let mut m = machine();
        let mut s = space(&mut m, AllocPolicy::interleave(), SocketMask::single(0));
        assert!(s.nodes().any(|n| n.socket() != 2));
        let p = PolicyEngine::new(SystemPolicy::FixedSocket(2));
        p.request_mask(&mut m, &mut s, SocketMask::parse("0-3").unwrap()).unwrap();
        s.map(&mut m, 1 << 40, 4 << 20, Perms::RW, 0).unwrap();
        assert!(s.nodes().all(|n| n.socket() == 2));
        s.check_invariants().unwrap();
    }

    #[test]
    fn all_processes_replicates_everywhere() {
        let mut m = machine();
        let mut s = space(&mut m, AllocPolicy::first_touch(), SocketMask::single(0));
        let p = PolicyEngine::new(SystemPolicy::AllProcesses);
        p.enforce(&mut m, &mut s, SocketMask::all(4)).unwrap();
        assert_eq!(s.replication_mask(), SocketMask::all(4));
        let root = s.root_for_socket(0);
        assert_eq!(s.ring_members(root).len(), 4);
    }

    #[test]
    fn context_switch_selects_local_root() {
        let mut m = machine();
        let s = space(&mut m, AllocPolicy::first_touch(), SocketMask::parse("0,2").unwrap());
        let p = PolicyEngine::new(SystemPolicy::PerProcess);
        let mut e = TranslationEngine::new(2, TranslationConfig::default());
        let r = p.on_context_switch(&s, &mut e);
        assert_eq!(m.socket_of(r), 2);
        assert_eq!(p.on_context_switch(&s, &mut e), r);
        let mut e3 = TranslationEngine::new(3, TranslationConfig::default());
        assert_eq!(p.on_context_switch(&s, &mut e3), s.root_for_socket(0));
    }

    #[test]
    fn migration_moves_pagetable_only_when_enabled() {
        let mut m = machine();
        let mut s = space(&mut m, AllocPolicy::fixed(0), SocketMask::single(0));
        let p = PolicyEngine::new(SystemPolicy::PerProcess);
        p.on_process_migration(&mut m, &mut s, 0, 1, false).unwrap();
        assert!(s.nodes().all(|n| n.socket() == 0));

        let mut e = TranslationEngine::new(1, TranslationConfig::default());
        p.on_process_migration(&mut m, &mut s, 0, 1, true).unwrap();
        assert_eq!(s.replication_mask(), SocketMask::single(1));
        for page in 0..2048u64 {
            e.translate(&m, &mut s, page << 12, false).unwrap();
        }
        assert_eq!(e.walk_stats().remote_accesses, 0);
        p.on_process_migration(&mut m, &mut s, 1, 1, true).unwrap();
        assert_eq!(s.replication_mask(), SocketMask::single(1));
    }
}
