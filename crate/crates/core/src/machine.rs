//! Multi-socket machine model: per-socket frame pools, strict allocation
//! policies, per-socket page-caches reserved for page-table pages, and the
//! memory access cost function.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of a base page / physical frame.
pub const FRAME_SIZE: u64 = 4096;
/// Number of base frames backing one 2MB large page.
pub const FRAMES_PER_HUGE: u64 = 512;

pub type SocketId = usize;

/// Global physical frame index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameNumber(pub u64);

impl fmt::Display for FrameNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("out of memory on socket {0}")]
    OutOfMemory(SocketId),
    #[error("frame {0} freed twice")]
    DoubleFree(FrameNumber),
    #[error("frame {0} does not exist")]
    UnknownFrame(FrameNumber),
    #[error("socket {0} out of range")]
    InvalidSocket(SocketId),
    #[error("invalid machine configuration: {0}")]
    InvalidConfig(String),
}

/// Machine parameters. Latencies are cycles per memory access.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub socket_count: usize,
    /// 4KB frames per socket.
    pub frames_per_socket: u64,
    pub local_latency: u64,
    pub remote_latency: u64,
    /// Bytes per cycle. Recorded, not modeled.
    pub local_bw: f64,
    pub remote_bw: f64,
    /// Frames per socket set aside for page-table allocations.
    pub pagecache_reserve: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        // 4-socket box, 280/580 cycle local/remote DRAM latency, 28/11 GB/s at 2.2GHz.
        MachineConfig {
            socket_count: 4,
            frames_per_socket: 1 << 19,
            local_latency: 280,
            remote_latency: 580,
            local_bw: 28.0 / 2.2,
            remote_bw: 11.0 / 2.2,
            pagecache_reserve: 1024,
        }
    }
}

impl MachineConfig {
    pub fn with_sockets(socket_count: usize) -> Self {
        MachineConfig {
            socket_count,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let bad = |msg: &str| Err(MachineError::InvalidConfig(msg.to_string()));
        if self.socket_count == 0 {
            return bad("socket_count must be at least 1");
        }
        if self.socket_count > SocketMask::MAX_SOCKETS {
            return bad("socket_count exceeds 64");
        }
        if self.pagecache_reserve > self.frames_per_socket {
            return bad("pagecache_reserve exceeds frames_per_socket");
        }
        if self.local_latency == 0 || self.remote_latency < self.local_latency {
            return bad("latencies must satisfy remote >= local > 0");
        }
        Ok(())
    }

    pub fn socket_of(&self, frame: FrameNumber) -> SocketId {
        (frame.0 / self.frames_per_socket) as SocketId
    }
}

/// Set of sockets, at most 64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SocketMask(u64);

impl SocketMask {
    pub const MAX_SOCKETS: usize = 64;

    pub const fn empty() -> Self {
        SocketMask(0)
    }

    pub fn single(socket: SocketId) -> Self {
        SocketMask(1 << socket)
    }

    pub fn all(socket_count: usize) -> Self {
        if socket_count >= 64 {
            SocketMask(u64::MAX)
        } else {
            SocketMask((1u64 << socket_count) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        SocketMask(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn contains(self, socket: SocketId) -> bool {
        socket < 64 && self.0 & (1 << socket) != 0
    }

    pub fn with(self, socket: SocketId) -> Self {
        SocketMask(self.0 | (1 << socket))
    }

    pub fn without(self, socket: SocketId) -> Self {
        SocketMask(self.0 & !(1 << socket))
    }

    /// Lowest socket in the set.
    pub fn first(self) -> Option<SocketId> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as SocketId)
    }

    pub fn is_subset_of(self, other: SocketMask) -> bool {
        self.0 & !other.0 == 0
    }

    /// Sockets in ascending order.
    pub fn iter(self) -> impl Iterator<Item = SocketId> {
        (0..64).filter(move |&s| self.0 & (1 << s) != 0)
    }

    /// Parses a numactl-style socket list: `0,2,4-7`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut mask = SocketMask::empty();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = match part.split_once('-') {
                Some((lo, hi)) => (lo.trim(), hi.trim()),
                None => (part, part),
            };
            let lo: usize = lo.parse().map_err(|_| format!("bad socket `{lo}`"))?;
            let hi: usize = hi.parse().map_err(|_| format!("bad socket `{hi}`"))?;
            if lo > hi || hi >= Self::MAX_SOCKETS {
                return Err(format!("bad socket range `{part}`"));
            }
            for s in lo..=hi {
                mask = mask.with(s);
            }
        }
        Ok(mask)
    }
}

impl fmt::Display for SocketMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<String> for SocketMask {
    type Error = String;

    fn try_from(list: String) -> Result<Self, String> {
        SocketMask::parse(&list)
    }
}

impl From<SocketMask> for String {
    fn from(mask: SocketMask) -> String {
        mask.to_string()
    }
}

impl FromIterator<SocketId> for SocketMask {
    fn from_iter<I: IntoIterator<Item = SocketId>>(iter: I) -> Self {
        iter.into_iter().fold(SocketMask::empty(), SocketMask::with)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Free,
    Data,
    PageTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub number: FrameNumber,
    pub socket: SocketId,
    pub kind: FrameKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "socket")]
pub enum PolicyKind {
    FirstTouch,
    Interleave,
    Fixed(SocketId),
}

/// Allocation policy plus its round-robin cursor. Each address space owns
/// its own copies, so interleave sequences do not depend on other processes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AllocPolicy {
    pub kind: PolicyKind,
    pub next_interleave_socket: SocketId,
}

impl AllocPolicy {
    pub fn first_touch() -> Self {
        PolicyKind::FirstTouch.into()
    }

    pub fn interleave() -> Self {
        PolicyKind::Interleave.into()
    }

    pub fn fixed(socket: SocketId) -> Self {
        PolicyKind::Fixed(socket).into()
    }

    /// Socket the next allocation must land on. Advances the interleave cursor.
    pub fn target(&mut self, touching_socket: SocketId, socket_count: usize) -> SocketId {
        match self.kind {
            PolicyKind::FirstTouch => touching_socket,
            PolicyKind::Fixed(s) => s,
            PolicyKind::Interleave => {
                let s = self.next_interleave_socket % socket_count;
                self.next_interleave_socket = (s + 1) % socket_count;
                s
            }
        }
    }
}

impl From<PolicyKind> for AllocPolicy {
    fn from(kind: PolicyKind) -> Self {
        AllocPolicy {
            kind,
            next_interleave_socket: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocKind {
    Data,
    PageTable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SocketUsage {
    pub free: u64,
    pub data: u64,
    pub pagetable: u64,
    /// Frames currently sitting in the page-table page-cache (counted in `free`).
    pub pagecache: u64,
}

#[derive(Debug, Clone)]
struct SocketPool {
    end: u64,
    /// Reserved page-table frames, LIFO.
    pagecache: Vec<u64>,
    /// Returned general frames, LIFO.
    recycled: Vec<u64>,
    /// Returned, still contiguous 2MB regions (base frame numbers).
    huge_free: Vec<u64>,
    /// Frames above this have never been handed out.
    bump: u64,
    usage: SocketUsage,
}

impl SocketPool {
    fn new(base: u64, frames: u64, reserve: u64) -> Self {
        SocketPool {
            end: base + frames,
            pagecache: (base..base + reserve).rev().collect(),
            recycled: Vec::new(),
            huge_free: Vec::new(),
            bump: base + reserve,
            usage: SocketUsage {
                free: frames,
                pagecache: reserve,
                ..Default::default()
            },
        }
    }

    fn take_general(&mut self) -> Option<u64> {
        if let Some(f) = self.recycled.pop() {
            return Some(f);
        }
        if self.bump < self.end {
            self.bump += 1;
            return Some(self.bump - 1);
        }
        let region = self.huge_free.pop()?;
        self.recycled
            .extend((region + 1..region + FRAMES_PER_HUGE).rev());
        Some(region)
    }

    fn take_huge(&mut self) -> Option<u64> {
        if let Some(r) = self.huge_free.pop() {
            return Some(r);
        }
        let aligned = self.bump.next_multiple_of(FRAMES_PER_HUGE);
        if aligned + FRAMES_PER_HUGE > self.end {
            return None;
        }
        // Skipped alignment gap stays usable for base pages.
        self.recycled.extend((self.bump..aligned).rev());
        self.bump = aligned + FRAMES_PER_HUGE;
        Some(aligned)
    }
}

/// The simulated machine. Owned by a single simulation; not shared.
#[derive(Debug, Clone)]
pub struct Machine {
    config: MachineConfig,
    kinds: Vec<FrameKind>,
    pools: Vec<SocketPool>,
    /// Latency multiplier for memory on each socket (interference).
    latency_factor: Vec<f64>,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Self, MachineError> {
        config.validate()?;
        let total = config.socket_count as u64 * config.frames_per_socket;
        let pools = (0..config.socket_count as u64)
            .map(|s| {
                SocketPool::new(
                    s * config.frames_per_socket,
                    config.frames_per_socket,
                    config.pagecache_reserve,
                )
            })
            .collect();
        Ok(Machine {
            kinds: vec![FrameKind::Free; total as usize],
            pools,
            latency_factor: vec![1.0; config.socket_count],
            config,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn socket_count(&self) -> usize {
        self.config.socket_count
    }

    pub fn socket_of(&self, frame: FrameNumber) -> SocketId {
        self.config.socket_of(frame)
    }

    pub fn frame(&self, number: FrameNumber) -> Option<Frame> {
        let kind = *self.kinds.get(number.0 as usize)?;
        Some(Frame {
            number,
            socket: self.socket_of(number),
            kind,
        })
    }

    pub fn usage(&self, socket: SocketId) -> SocketUsage {
        self.pools[socket].usage
    }

    fn check_socket(&self, socket: SocketId) -> Result<(), MachineError> {
        if socket < self.config.socket_count {
            Ok(())
        } else {
            Err(MachineError::InvalidSocket(socket))
        }
    }

    fn resolve(
        &self,
        policy: &mut AllocPolicy,
        touching_socket: SocketId,
    ) -> Result<SocketId, MachineError> {
        self.check_socket(touching_socket)?;
        let target = policy.target(touching_socket, self.config.socket_count);
        self.check_socket(target)?;
        Ok(target)
    }

    /// Strictly allocates one 4KB frame on the socket chosen by `policy`.
    pub fn allocate_frame(
        &mut self,
        kind: AllocKind,
        policy: &mut AllocPolicy,
        touching_socket: SocketId,
    ) -> Result<Frame, MachineError> {
        let socket = self.resolve(policy, touching_socket)?;
        self.allocate_on(kind, socket)
    }

    pub fn allocate_on(&mut self, kind: AllocKind, socket: SocketId) -> Result<Frame, MachineError> {
        self.check_socket(socket)?;
        let pool = &mut self.pools[socket];
        let (number, frame_kind) = match kind {
            AllocKind::PageTable => {
                let n = match pool.pagecache.pop() {
                    Some(n) => {
                        pool.usage.pagecache -= 1;
                        n
                    }
                    None => pool.take_general().ok_or(MachineError::OutOfMemory(socket))?,
                };
                pool.usage.pagetable += 1;
                (n, FrameKind::PageTable)
            }
            AllocKind::Data => {
                let n = pool.take_general().ok_or(MachineError::OutOfMemory(socket))?;
                pool.usage.data += 1;
                (n, FrameKind::Data)
            }
        };
        pool.usage.free -= 1;
        self.kinds[number as usize] = frame_kind;
        Ok(Frame {
            number: FrameNumber(number),
            socket,
            kind: frame_kind,
        })
    }

    /// Allocates a 2MB-aligned run of 512 data frames. Returns the first frame.
    pub fn allocate_huge(
        &mut self,
        policy: &mut AllocPolicy,
        touching_socket: SocketId,
    ) -> Result<Frame, MachineError> {
        let socket = self.resolve(policy, touching_socket)?;
        let pool = &mut self.pools[socket];
        let base = pool.take_huge().ok_or(MachineError::OutOfMemory(socket))?;
        pool.usage.free -= FRAMES_PER_HUGE;
        pool.usage.data += FRAMES_PER_HUGE;
        for k in &mut self.kinds[base as usize..(base + FRAMES_PER_HUGE) as usize] {
            *k = FrameKind::Data;
        }
        Ok(Frame {
            number: FrameNumber(base),
            socket,
            kind: FrameKind::Data,
        })
    }

    /// Returns a frame to its socket. Page-table frames refill the page-cache first.
    pub fn free_frame(&mut self, number: FrameNumber) -> Result<(), MachineError> {
        let kind = *self
            .kinds
            .get(number.0 as usize)
            .ok_or(MachineError::UnknownFrame(number))?;
        let socket = self.socket_of(number);
        let reserve = self.config.pagecache_reserve;
        let pool = &mut self.pools[socket];
        match kind {
            FrameKind::Free => return Err(MachineError::DoubleFree(number)),
            FrameKind::Data => {
                pool.usage.data -= 1;
                pool.recycled.push(number.0);
            }
            FrameKind::PageTable => {
                pool.usage.pagetable -= 1;
                if (pool.pagecache.len() as u64) < reserve {
                    pool.pagecache.push(number.0);
                    pool.usage.pagecache += 1;
                } else {
                    pool.recycled.push(number.0);
                }
            }
        }
        pool.usage.free += 1;
        self.kinds[number.0 as usize] = FrameKind::Free;
        Ok(())
    }

    /// Frees a 2MB run previously returned by [`Machine::allocate_huge`].
    pub fn free_huge(&mut self, base: FrameNumber) -> Result<(), MachineError> {
        let range = base.0 as usize..(base.0 + FRAMES_PER_HUGE) as usize;
        let kinds = self
            .kinds
            .get_mut(range)
            .ok_or(MachineError::UnknownFrame(base))?;
        if let Some(off) = kinds.iter().position(|&k| k != FrameKind::Data) {
            return Err(MachineError::DoubleFree(FrameNumber(base.0 + off as u64)));
        }
        kinds.fill(FrameKind::Free);
        let pool = &mut self.pools[self.config.socket_of(base)];
        pool.usage.data -= FRAMES_PER_HUGE;
        pool.usage.free += FRAMES_PER_HUGE;
        pool.huge_free.push(base.0);
        Ok(())
    }

    /// Cycles for one memory access from `from_socket` to `target`.
    pub fn access_cost(&self, from_socket: SocketId, target: FrameNumber) -> u64 {
        let socket = self.socket_of(target);
        let base = if socket == from_socket {
            self.config.local_latency
        } else {
            self.config.remote_latency
        };
        let factor = self.latency_factor[socket];
        if factor == 1.0 {
            base
        } else {
            (base as f64 * factor).round() as u64
        }
    }

    /// Marks `socket` as hosting a bandwidth hog; its memory becomes `factor`x slower.
    pub fn set_interference(&mut self, socket: SocketId, factor: f64) -> Result<(), MachineError> {
        self.check_socket(socket)?;
        self.latency_factor[socket] = factor;
        Ok(())
    }

    pub fn total_pagetable_frames(&self) -> u64 {
        self.pools.iter().map(|p| p.usage.pagetable).sum()
    }

    pub fn total_data_frames(&self) -> u64 {
        self.pools.iter().map(|p| p.usage.data).sum()
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.config.socket_count as u64 * self.config.frames_per_socket * FRAME_SIZE
    }
}
