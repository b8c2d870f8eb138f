//! Trace-driven NUMA virtual-memory simulator with self-replicating,
//! migratable four-level radix page-tables.
//!
//! The crate is organized bottom-up:
//!
//! - [`machine`]: sockets, frame pools, strict allocation, access costs.
//! - [`pagetable`]: the replicated radix page-table and its replica rings.
//! - [`translation`]: per-core TLBs, paging-structure caches and the walker.
//! - [`policy`]: system-wide and per-process replication policy.
//! - [`workload`]: synthetic access patterns and scenario runs.
//! - [`dump`] / [`analyzer`]: page-table snapshots and their distribution analysis.
//! - [`experiment`]: configs, presets, CSV output and the memory-overhead model.

pub mod analyzer;
pub mod dump;
pub mod experiment;
pub mod machine;
pub mod pagetable;
pub mod policy;
pub mod translation;
pub mod workload;

pub use dump::SnapshotDump;
pub use machine::{AllocPolicy, FrameNumber, Machine, MachineConfig, SocketId, SocketMask};
pub use pagetable::{AddressSpace, PageSize, Perms, PtError, Pte, WriteLog};
