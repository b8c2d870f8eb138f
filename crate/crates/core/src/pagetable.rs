//! Replicated four-level radix page-table.
//!
//! Every logical page-table node exists once per socket in the address
//! space's replication mask. The copies of one node are linked into a
//! circular ring (`ring_next`), so a PTE write reaches every copy in `R`
//! steps without walking the other replicas. Upper-level entries in the copy
//! for socket `s` point at the socket-`s` copy of the child; leaf entries are
//! identical everywhere.
//!
//! All page-table mutation goes through [`AddressSpace::write_pte`] and its
//! internal read-modify-write variant, which is the single write-interception
//! point. Hardware-owned accessed/dirty bits are set per replica by the walker
//! and read back as the OR over the ring.
//!
//! Mutating methods take `&mut self` and readers take `&self`, so one
//! address space admits either one writer or many concurrent readers. Wrap
//! it in [`SharedAddressSpace`] to share it between threads.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{DumpEntry, DumpNode, SnapshotDump};
use crate::machine::{
    AllocKind, AllocPolicy, FrameNumber, Machine, MachineError, SocketId, SocketMask, FRAME_SIZE,
    FRAMES_PER_HUGE,
};

pub const ENTRIES_PER_NODE: usize = 512;
pub const LEVELS: u8 = 4;
/// 48-bit virtual addresses.
pub const VA_LIMIT: u64 = 1 << 48;
pub const HUGE_PAGE_SIZE: u64 = FRAME_SIZE * FRAMES_PER_HUGE;

pub type SharedAddressSpace = Arc<RwLock<AddressSpace>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PtError {
    #[error("out of memory on socket {0}")]
    OutOfMemory(SocketId),
    #[error("address {0:#x} already mapped")]
    AlreadyMapped(u64),
    #[error("address {0:#x} not mapped")]
    NotMapped(u64),
    #[error("page fault at level {level}")]
    PageFault { level: u8 },
    #[error("range {vaddr:#x}+{size:#x} not aligned to the page size")]
    Misaligned { vaddr: u64, size: u64 },
    #[error("range at {0:#x} splits a 2MB page")]
    PartialHugePage(u64),
    #[error("replication mask must be a non-empty subset of the machine's sockets")]
    InvalidMask,
    #[error("socket {0} is not in the replication mask")]
    NotInMask(SocketId),
    #[error("socket {0} out of range")]
    InvalidSocket(SocketId),
    #[error("frame {0} is not a page-table node of this address space")]
    InvalidNode(FrameNumber),
    #[error("invalid entry write: {0}")]
    InvalidEntry(&'static str),
    #[error(transparent)]
    Machine(MachineError),
}

impl From<MachineError> for PtError {
    fn from(e: MachineError) -> Self {
        match e {
            MachineError::OutOfMemory(s) => PtError::OutOfMemory(s),
            other => PtError::Machine(other),
        }
    }
}

bitflags! {
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
    pub struct PteFlags: u8 {
        const PRESENT = 1 << 0;
        const WRITABLE = 1 << 1;
        const HUGE = 1 << 2;
        const ACCESSED = 1 << 3;
        const DIRTY = 1 << 4;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Pte {
    pub frame: FrameNumber,
    pub flags: PteFlags,
}

impl Pte {
    pub const EMPTY: Pte = Pte {
        frame: FrameNumber(0),
        flags: PteFlags::empty(),
    };

    /// Pointer to a next-level table. Any ring member of the child may be named.
    pub fn table(child: FrameNumber) -> Self {
        Pte {
            frame: child,
            flags: PteFlags::PRESENT | PteFlags::WRITABLE,
        }
    }

    pub fn leaf(frame: FrameNumber, perms: Perms) -> Self {
        let mut flags = PteFlags::PRESENT;
        flags.set(PteFlags::WRITABLE, perms.writable);
        Pte { frame, flags }
    }

    pub fn huge_leaf(frame: FrameNumber, perms: Perms) -> Self {
        let mut pte = Self::leaf(frame, perms);
        pte.flags |= PteFlags::HUGE;
        pte
    }

    pub fn present(&self) -> bool {
        self.flags.contains(PteFlags::PRESENT)
    }

    pub fn huge(&self) -> bool {
        self.flags.contains(PteFlags::HUGE)
    }

    pub fn writable(&self) -> bool {
        self.flags.contains(PteFlags::WRITABLE)
    }

    pub fn accessed(&self) -> bool {
        self.flags.contains(PteFlags::ACCESSED)
    }

    pub fn dirty(&self) -> bool {
        self.flags.contains(PteFlags::DIRTY)
    }

    pub fn perms(&self) -> Perms {
        Perms {
            writable: self.writable(),
        }
    }

    fn is_leaf_at(&self, level: u8) -> bool {
        level == 1 || self.huge()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Perms {
    pub writable: bool,
}

impl Perms {
    pub const RW: Perms = Perms { writable: true };
    pub const RO: Perms = Perms { writable: false };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageSize {
    #[default]
    #[serde(rename = "4k")]
    Small,
    #[serde(rename = "2m")]
    Huge,
}

impl PageSize {
    pub fn bytes(self) -> u64 {
        match self {
            PageSize::Small => FRAME_SIZE,
            PageSize::Huge => HUGE_PAGE_SIZE,
        }
    }

    pub fn leaf_level(self) -> u8 {
        match self {
            PageSize::Small => 1,
            PageSize::Huge => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PageSize::Small => "4k",
            PageSize::Huge => "2m",
        }
    }
}

impl std::str::FromStr for PageSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "4k" | "4kb" => Ok(PageSize::Small),
            "2m" | "2mb" => Ok(PageSize::Huge),
            other => Err(format!("unknown page size `{other}` (expected 4k or 2m)")),
        }
    }
}

/// Memory references spent by one page-table operation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WriteLog {
    pub pte_writes: u64,
    /// Reads of `ring_next` pointers while propagating writes.
    pub ring_reads: u64,
    /// Entry reads spent locating entries in the primary replica.
    pub walk_reads: u64,
}

impl WriteLog {
    pub fn total(&self) -> u64 {
        self.pte_writes + self.ring_reads + self.walk_reads
    }
}

impl std::ops::AddAssign for WriteLog {
    fn add_assign(&mut self, rhs: Self) {
        self.pte_writes += rhs.pte_writes;
        self.ring_reads += rhs.ring_reads;
        self.walk_reads += rhs.walk_reads;
    }
}

/// Index into the node at `level` (4 = root) for `vaddr`.
pub fn level_index(vaddr: u64, level: u8) -> usize {
    ((vaddr >> (12 + 9 * (level as u32 - 1))) & 0x1ff) as usize
}

/// Bytes of virtual address space covered by one entry at `level`.
pub fn entry_span(level: u8) -> u64 {
    FRAME_SIZE << (9 * (level as u32 - 1))
}

#[derive(Clone, Debug)]
pub struct PageTableNode {
    level: u8,
    frame: FrameNumber,
    socket: SocketId,
    replica: SocketId,
    entries: Box<[Pte; ENTRIES_PER_NODE]>,
    present: u16,
    ring_next: FrameNumber,
}

impl PageTableNode {
    fn new(level: u8, frame: FrameNumber, socket: SocketId, replica: SocketId) -> Self {
        PageTableNode {
            level,
            frame,
            socket,
            replica,
            entries: Box::new([Pte::EMPTY; ENTRIES_PER_NODE]),
            present: 0,
            ring_next: frame,
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn frame(&self) -> FrameNumber {
        self.frame
    }

    /// Socket the node's frame lives on.
    pub fn socket(&self) -> SocketId {
        self.socket
    }

    /// Replica tree this node belongs to.
    pub fn replica(&self) -> SocketId {
        self.replica
    }

    pub fn entry(&self, index: usize) -> Pte {
        self.entries[index]
    }

    pub fn ring_next(&self) -> FrameNumber {
        self.ring_next
    }

    pub fn present_count(&self) -> usize {
        self.present as usize
    }

    fn set(&mut self, index: usize, pte: Pte) {
        let was = self.entries[index].present();
        match (was, pte.present()) {
            (false, true) => self.present += 1,
            (true, false) => self.present -= 1,
            _ => {}
        }
        self.entries[index] = pte;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkStep {
    pub level: u8,
    pub frame: FrameNumber,
    pub socket: SocketId,
    pub index: usize,
}

/// Result of a software walk from one socket's root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkTrace {
    pub steps: Vec<WalkStep>,
    pub leaf: Pte,
    pub page_size: PageSize,
    /// The 4KB data frame holding `vaddr`.
    pub data_frame: FrameNumber,
}

/// Where to place the frames of a freshly allocated node ring.
#[derive(Clone, Copy)]
enum Placement {
    /// Single-replica tables follow the page-table policy.
    Policy { touching: SocketId },
    /// Always on the replica's own socket.
    Strict,
}

#[derive(Clone, Copy, Debug)]
struct LeafLoc {
    node: FrameNumber,
    index: usize,
    level: u8,
}

#[derive(Debug, Clone)]
pub struct AddressSpace {
    socket_count: usize,
    frames_per_socket: u64,
    roots: Vec<FrameNumber>,
    mask: SocketMask,
    pt_policy: AllocPolicy,
    data_policy: AllocPolicy,
    page_size: PageSize,
    nodes: BTreeMap<FrameNumber, PageTableNode>,
    epoch: u64,
}

impl AddressSpace {
    /// Allocates one root per socket in `mask`, each on its own socket.
    pub fn create(
        machine: &mut Machine,
        pt_policy: AllocPolicy,
        data_policy: AllocPolicy,
        mask: SocketMask,
    ) -> Result<Self, PtError> {
        let socket_count = machine.socket_count();
        if mask.is_empty() || !mask.is_subset_of(SocketMask::all(socket_count)) {
            return Err(PtError::InvalidMask);
        }
        let mut space = AddressSpace {
            socket_count,
            frames_per_socket: machine.config().frames_per_socket,
            roots: Vec::new(),
            mask,
            pt_policy,
            data_policy,
            page_size: PageSize::Small,
            nodes: BTreeMap::new(),
            epoch: 0,
        };
        let root = space.alloc_ring(machine, LEVELS, Placement::Strict)?;
        space.roots = vec![root; socket_count];
        for member in space.ring_members(root) {
            let replica = space.nodes[&member].replica;
            space.roots[replica] = member;
        }
        Ok(space)
    }

    pub fn with_page_size(mut self, page_size: PageSize) -> Self {
        self.page_size = page_size;
        self
    }

    pub fn page_size(&self) -> PageSize {
        self.page_size
    }

    /// Policy for page-table nodes allocated from now on.
    pub fn set_pt_policy(&mut self, policy: AllocPolicy) {
        self.pt_policy = policy;
    }

    pub fn pt_policy(&self) -> AllocPolicy {
        self.pt_policy
    }

    pub fn replication_mask(&self) -> SocketMask {
        self.mask
    }

    pub fn primary_socket(&self) -> SocketId {
        self.mask.first().expect("mask is never empty")
    }

    pub fn socket_count(&self) -> usize {
        self.socket_count
    }

    pub fn roots(&self) -> &[FrameNumber] {
        &self.roots
    }

    /// Bumped whenever cached translations may have gone stale.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn node(&self, frame: FrameNumber) -> Option<&PageTableNode> {
        self.nodes.get(&frame)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PageTableNode> {
        self.nodes.values()
    }

    pub fn pagetable_frames(&self) -> usize {
        self.nodes.len()
    }

    fn socket_of(&self, frame: FrameNumber) -> SocketId {
        (frame.0 / self.frames_per_socket) as SocketId
    }

    /// Root used by threads on `socket`. O(1), no walk.
    pub fn root_for_socket(&self, socket: SocketId) -> FrameNumber {
        self.roots[socket]
    }

    fn primary_root(&self) -> FrameNumber {
        self.roots[self.primary_socket()]
    }

    fn alloc_ring(
        &mut self,
        machine: &mut Machine,
        level: u8,
        placement: Placement,
    ) -> Result<FrameNumber, PtError> {
        let single = self.mask.len() == 1;
        let mut members: Vec<(SocketId, FrameNumber, SocketId)> = Vec::with_capacity(self.mask.len());
        for replica in self.mask.iter() {
            let got = match placement {
                Placement::Policy { touching } if single => {
                    machine.allocate_frame(AllocKind::PageTable, &mut self.pt_policy, touching)
                }
                _ => machine.allocate_on(AllocKind::PageTable, replica),
            };
            match got {
                Ok(f) => members.push((replica, f.number, f.socket)),
                Err(e) => {
                    for &(_, f, _) in &members {
                        machine.free_frame(f)?;
                    }
                    return Err(e.into());
                }
            }
        }
        let n = members.len();
        for (i, &(replica, frame, socket)) in members.iter().enumerate() {
            let mut node = PageTableNode::new(level, frame, socket, replica);
            node.ring_next = members[(i + 1) % n].1;
            self.nodes.insert(frame, node);
        }
        Ok(members[0].1)
    }

    fn free_ring(&mut self, machine: &mut Machine, handle: FrameNumber) -> Result<(), PtError> {
        for member in self.ring_members(handle) {
            self.nodes.remove(&member);
            machine.free_frame(member)?;
        }
        Ok(())
    }

    /// Ring members starting at `handle`.
    pub fn ring_members(&self, handle: FrameNumber) -> Vec<FrameNumber> {
        let mut out = vec![handle];
        let mut cur = self.nodes[&handle].ring_next;
        while cur != handle {
            out.push(cur);
            cur = self.nodes[&cur].ring_next;
        }
        out
    }

    fn member_for_replica(&self, handle: FrameNumber, replica: SocketId) -> FrameNumber {
        let mut cur = handle;
        loop {
            let node = &self.nodes[&cur];
            if node.replica == replica {
                return cur;
            }
            cur = node.ring_next;
            assert_ne!(cur, handle, "ring of {handle} has no member for replica {replica}");
        }
    }

    /// Applies `update` to entry `index` of every ring member. Table pointers
    /// are re-targeted to the child copy of each member's replica.
    fn write_ring(
        &mut self,
        handle: FrameNumber,
        index: usize,
        update: impl Fn(Pte) -> Pte,
    ) -> WriteLog {
        let mut log = WriteLog::default();
        let mut stale = false;
        for member in self.ring_members(handle) {
            let node = &self.nodes[&member];
            let (level, replica, old) = (node.level, node.replica, node.entries[index]);
            let mut pte = update(old);
            if pte.present() && !pte.is_leaf_at(level) {
                pte.frame = self.member_for_replica(pte.frame, replica);
            }
            stale |= old.present();
            self.nodes.get_mut(&member).unwrap().set(index, pte);
            log.pte_writes += 1;
            log.ring_reads += 1;
        }
        if stale {
            self.epoch += 1;
        }
        log
    }

    /// Writes `pte` at `index` of the node ring containing `handle`, in every replica.
    pub fn write_pte(
        &mut self,
        handle: FrameNumber,
        index: usize,
        pte: Pte,
    ) -> Result<WriteLog, PtError> {
        let node = self.nodes.get(&handle).ok_or(PtError::InvalidNode(handle))?;
        if index >= ENTRIES_PER_NODE {
            return Err(PtError::InvalidEntry("index out of range"));
        }
        if pte.present() {
            if pte.huge() && node.level != 2 {
                return Err(PtError::InvalidEntry("huge entries only at level 2"));
            }
            if !pte.is_leaf_at(node.level) {
                match self.nodes.get(&pte.frame) {
                    Some(child) if child.level + 1 == node.level => {}
                    _ => return Err(PtError::InvalidEntry("table entry must name a child node")),
                }
            }
        }
        Ok(self.write_ring(handle, index, |_| pte))
    }

    fn check_range(&self, vaddr: u64, size: u64, page: u64) -> Result<(), PtError> {
        if size == 0 || vaddr % page != 0 || size % page != 0 || vaddr.checked_add(size).map_or(true, |e| e > VA_LIMIT) {
            return Err(PtError::Misaligned { vaddr, size });
        }
        Ok(())
    }

    /// Leaf entry covering `vaddr` in the primary replica.
    fn locate(&self, vaddr: u64) -> Result<LeafLoc, PtError> {
        let mut node = self.primary_root();
        for level in (1..=LEVELS).rev() {
            let index = level_index(vaddr, level);
            let pte = self.nodes[&node].entries[index];
            if !pte.present() {
                return Err(PtError::PageFault { level });
            }
            if pte.is_leaf_at(level) {
                return Ok(LeafLoc { node, index, level });
            }
            node = pte.frame;
        }
        unreachable!("level 1 entries are always leaves")
    }

    /// Path of (node, index) pairs from the primary root toward `vaddr`.
    fn path(&self, vaddr: u64) -> Vec<(FrameNumber, usize)> {
        let mut out = Vec::with_capacity(LEVELS as usize);
        let mut node = self.primary_root();
        for level in (1..=LEVELS).rev() {
            let index = level_index(vaddr, level);
            out.push((node, index));
            let pte = self.nodes[&node].entries[index];
            if !pte.present() || pte.is_leaf_at(level) {
                break;
            }
            node = pte.frame;
        }
        out
    }

    fn ensure_path(
        &mut self,
        machine: &mut Machine,
        vaddr: u64,
        leaf_level: u8,
        touching: SocketId,
        log: &mut WriteLog,
    ) -> Result<FrameNumber, PtError> {
        let mut node = self.primary_root();
        for level in (leaf_level + 1..=LEVELS).rev() {
            let index = level_index(vaddr, level);
            log.walk_reads += 1;
            let pte = self.nodes[&node].entries[index];
            if pte.present() {
                node = pte.frame;
                continue;
            }
            let child = self.alloc_ring(machine, level - 1, Placement::Policy { touching })?;
            *log += self.write_ring(node, index, |_| Pte::table(child));
            node = child;
        }
        Ok(node)
    }

    /// Frees now-empty tables on the path to `vaddr`, bottom-up. The root stays.
    fn prune(&mut self, machine: &mut Machine, vaddr: u64, log: &mut WriteLog) -> Result<(), PtError> {
        let path = self.path(vaddr);
        for depth in (1..path.len()).rev() {
            let (node, _) = path[depth];
            if self.nodes[&node].present > 0 {
                break;
            }
            let (parent, index) = path[depth - 1];
            *log += self.write_ring(parent, index, |_| Pte::EMPTY);
            self.free_ring(machine, node)?;
        }
        Ok(())
    }

    fn is_mapped_at(&self, vaddr: u64, page_size: PageSize) -> bool {
        match self.locate(vaddr) {
            Ok(_) => true,
            // A level-2 table pointer blocks a huge mapping even when the 4k page is free.
            Err(PtError::PageFault { level }) => page_size == PageSize::Huge && level < 2,
            Err(_) => false,
        }
    }

    /// Maps `[vaddr, vaddr+size)` using the address space's page size.
    pub fn map(
        &mut self,
        machine: &mut Machine,
        vaddr: u64,
        size: u64,
        perms: Perms,
        touching_socket: SocketId,
    ) -> Result<WriteLog, PtError> {
        self.map_with(machine, vaddr, size, perms, touching_socket, self.page_size)
    }

    /// Maps and populates a range with pages of `page_size`. Intermediate
    /// tables are allocated on demand in every replica; data frames follow
    /// the data policy. On failure the partial mapping is undone.
    pub fn map_with(
        &mut self,
        machine: &mut Machine,
        vaddr: u64,
        size: u64,
        perms: Perms,
        touching_socket: SocketId,
        page_size: PageSize,
    ) -> Result<WriteLog, PtError> {
        if touching_socket >= self.socket_count {
            return Err(PtError::InvalidSocket(touching_socket));
        }
        let step = page_size.bytes();
        self.check_range(vaddr, size, step)?;
        let end = vaddr + size;
        if let Some(va) = (vaddr..end).step_by(step as usize).find(|&va| self.is_mapped_at(va, page_size)) {
            return Err(PtError::AlreadyMapped(va));
        }

        let leaf_level = page_size.leaf_level();
        let table_span = entry_span(leaf_level + 1);
        let mut log = WriteLog::default();
        let mut cached: Option<(u64, FrameNumber)> = None;
        let mut va = vaddr;
        while va < end {
            let result = (|| -> Result<(), PtError> {
                let key = va / table_span;
                let node = match cached {
                    Some((k, n)) if k == key => n,
                    _ => {
                        let n = self.ensure_path(machine, va, leaf_level, touching_socket, &mut log)?;
                        cached = Some((key, n));
                        n
                    }
                };
                let pte = match page_size {
                    PageSize::Small => {
                        let f = machine.allocate_frame(AllocKind::Data, &mut self.data_policy, touching_socket)?;
                        Pte::leaf(f.number, perms)
                    }
                    PageSize::Huge => {
                        let f = machine.allocate_huge(&mut self.data_policy, touching_socket)?;
                        Pte::huge_leaf(f.number, perms)
                    }
                };
                log += self.write_ring(node, level_index(va, leaf_level), |_| pte);
                Ok(())
            })();
            if let Err(e) = result {
                let mut scratch = WriteLog::default();
                if va > vaddr {
                    self.unmap(machine, vaddr, va - vaddr)?;
                }
                self.prune(machine, va, &mut scratch)?;
                return Err(e);
            }
            va += step;
        }
        Ok(log)
    }

    /// Leaf locations covering a fully mapped range, with the walk reads spent.
    fn mapped_leaves(&self, vaddr: u64, size: u64) -> Result<(Vec<(u64, LeafLoc)>, u64), PtError> {
        self.check_range(vaddr, size, FRAME_SIZE)?;
        let end = vaddr + size;
        let mut out = Vec::new();
        let mut reads = 0;
        let mut cached: Option<(u64, FrameNumber)> = None;
        let mut va = vaddr;
        while va < end {
            let loc = self.locate(va).map_err(|_| PtError::NotMapped(va))?;
            let span = entry_span(loc.level);
            if loc.level == 2 && (va % span != 0 || va + span > end) {
                return Err(PtError::PartialHugePage(va));
            }
            // Upper levels are read once per leaf table, the leaf once per entry.
            let key = va / entry_span(loc.level + 1);
            if cached != Some((key, loc.node)) {
                reads += (LEVELS - loc.level) as u64;
                cached = Some((key, loc.node));
            }
            reads += 1;
            out.push((va, loc));
            va += span;
        }
        Ok((out, reads))
    }

    /// Clears the range in every replica, frees its data frames and any
    /// tables left empty.
    pub fn unmap(&mut self, machine: &mut Machine, vaddr: u64, size: u64) -> Result<WriteLog, PtError> {
        let (leaves, reads) = self.mapped_leaves(vaddr, size)?;
        let mut log = WriteLog {
            walk_reads: reads,
            ..Default::default()
        };
        let mut last_table = None;
        let mut prune_points = Vec::new();
        for &(va, loc) in &leaves {
            let pte = self.nodes[&loc.node].entries[loc.index];
            log += self.write_ring(loc.node, loc.index, |_| Pte::EMPTY);
            if pte.huge() {
                machine.free_huge(pte.frame)?;
            } else {
                machine.free_frame(pte.frame)?;
            }
            if last_table != Some(loc.node) {
                last_table = Some(loc.node);
                prune_points.push(va);
            }
        }
        for va in prune_points {
            self.prune(machine, va, &mut log)?;
        }
        Ok(log)
    }

    /// Read-modify-write of permissions on every leaf in the range. Each
    /// replica keeps its own accessed/dirty bits.
    pub fn protect(&mut self, vaddr: u64, size: u64, perms: Perms) -> Result<WriteLog, PtError> {
        let (leaves, reads) = self.mapped_leaves(vaddr, size)?;
        let mut log = WriteLog {
            walk_reads: reads,
            ..Default::default()
        };
        for (_, loc) in leaves {
            log += self.write_ring(loc.node, loc.index, |mut pte| {
                pte.flags.set(PteFlags::WRITABLE, perms.writable);
                pte
            });
        }
        // Permission changes always invalidate, even when no entry was stale.
        self.epoch += 1;
        Ok(log)
    }

    /// Accessed/dirty of the leaf for `vaddr`, ORed over all replicas.
    pub fn read_ad_bits(&self, vaddr: u64) -> Result<(bool, bool), PtError> {
        let loc = self.locate(vaddr).map_err(|_| PtError::NotMapped(vaddr))?;
        Ok(self.or_bits(loc.node, loc.index))
    }

    /// Accessed/dirty ORed over the replicas of the entry at `level` on the path to `vaddr`.
    pub fn read_ad_bits_at_level(&self, vaddr: u64, level: u8) -> Result<(bool, bool), PtError> {
        let path = self.path(vaddr);
        let depth = (LEVELS - level) as usize;
        let &(node, index) = path.get(depth).ok_or(PtError::NotMapped(vaddr))?;
        if !self.nodes[&node].entries[index].present() {
            return Err(PtError::NotMapped(vaddr));
        }
        Ok(self.or_bits(node, index))
    }

    fn or_bits(&self, handle: FrameNumber, index: usize) -> (bool, bool) {
        self.ring_members(handle)
            .into_iter()
            .map(|m| self.nodes[&m].entries[index])
            .fold((false, false), |(a, d), pte| (a || pte.accessed(), d || pte.dirty()))
    }

    /// Resets accessed and dirty on the leaf in every replica.
    pub fn clear_ad_bits(&mut self, vaddr: u64) -> Result<(), PtError> {
        let loc = self.locate(vaddr).map_err(|_| PtError::NotMapped(vaddr))?;
        for member in self.ring_members(loc.node) {
            let node = self.nodes.get_mut(&member).unwrap();
            node.entries[loc.index].flags.remove(PteFlags::ACCESSED | PteFlags::DIRTY);
        }
        // Cached translations remember the dirty state.
        self.epoch += 1;
        Ok(())
    }

    /// Hardware-style bit update on one specific node entry (one replica only).
    pub fn mark_entry(&mut self, node: FrameNumber, index: usize, dirty: bool) {
        let entry = &mut self.nodes.get_mut(&node).expect("walked node exists").entries[index];
        entry.flags |= PteFlags::ACCESSED;
        if dirty {
            entry.flags |= PteFlags::DIRTY;
        }
    }

    /// Sets bits on the leaf for `vaddr` in the replica used by `observer`,
    /// as that socket's page walker would. Dirty implies accessed.
    pub fn set_replica_bits(
        &mut self,
        observer: SocketId,
        vaddr: u64,
        accessed: bool,
        dirty: bool,
    ) -> Result<(), PtError> {
        let trace = self.software_walk(observer, vaddr).map_err(|_| PtError::NotMapped(vaddr))?;
        if accessed || dirty {
            let last = trace.steps.last().expect("walk has steps");
            self.mark_entry(last.frame, last.index, dirty);
        }
        Ok(())
    }

    /// Walks from `roots[observer]`, reporting every node touched.
    pub fn software_walk(&self, observer: SocketId, vaddr: u64) -> Result<WalkTrace, PtError> {
        let mut node = *self.roots.get(observer).ok_or(PtError::InvalidSocket(observer))?;
        let mut steps = Vec::with_capacity(LEVELS as usize);
        for level in (1..=LEVELS).rev() {
            let n = &self.nodes[&node];
            let index = level_index(vaddr, level);
            steps.push(WalkStep {
                level,
                frame: node,
                socket: n.socket,
                index,
            });
            let pte = n.entries[index];
            if !pte.present() {
                return Err(PtError::PageFault { level });
            }
            if pte.is_leaf_at(level) {
                let (page_size, offset) = if level == 2 {
                    (PageSize::Huge, (vaddr % HUGE_PAGE_SIZE) / FRAME_SIZE)
                } else {
                    (PageSize::Small, 0)
                };
                return Ok(WalkTrace {
                    steps,
                    leaf: pte,
                    page_size,
                    data_frame: FrameNumber(pte.frame.0 + offset),
                });
            }
            node = pte.frame;
        }
        unreachable!("level 1 entries are always leaves")
    }

    /// Logical nodes of the primary tree, pre-order.
    fn logical_nodes(&self, root: FrameNumber) -> Vec<FrameNumber> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(frame) = stack.pop() {
            out.push(frame);
            let node = &self.nodes[&frame];
            for pte in node.entries.iter().rev() {
                if pte.present() && !pte.is_leaf_at(node.level) {
                    stack.push(pte.frame);
                }
            }
        }
        out
    }

    fn replica_is_strict(&self, logical: &[FrameNumber], replica: SocketId) -> bool {
        logical
            .iter()
            .all(|&h| self.nodes[&self.member_for_replica(h, replica)].socket == replica)
    }

    /// Changes the set of sockets holding replicas. New replicas are full
    /// copies placed strictly on their socket; dropped replicas are freed.
    /// With two or more sockets every replica is socket-local. On
    /// `OutOfMemory` nothing changes.
    pub fn set_replication_mask(&mut self, machine: &mut Machine, new: SocketMask) -> Result<(), PtError> {
        if new.is_empty() || !new.is_subset_of(SocketMask::all(self.socket_count)) {
            return Err(PtError::InvalidMask);
        }
        let old = self.mask;
        if new == old {
            return Ok(());
        }
        let logical = self.logical_nodes(self.primary_root());
        let keep: SocketMask = new
            .iter()
            .filter(|&s| old.contains(s) && (new.len() == 1 || self.replica_is_strict(&logical, s)))
            .collect();
        let build: Vec<SocketId> = new.iter().filter(|&s| !keep.contains(s)).collect();

        // Allocate every new frame before touching any ring.
        let mut copies: BTreeMap<(SocketId, FrameNumber), FrameNumber> = BTreeMap::new();
        for &socket in &build {
            for &h in &logical {
                match machine.allocate_on(AllocKind::PageTable, socket) {
                    Ok(f) => {
                        copies.insert((socket, h), f.number);
                    }
                    Err(e) => {
                        for &f in copies.values() {
                            machine.free_frame(f)?;
                        }
                        return Err(e.into());
                    }
                }
            }
        }

        // Fill the copies. Leaf bits start as the OR over existing replicas.
        for &socket in &build {
            for &h in &logical {
                let frame = copies[&(socket, h)];
                let src = &self.nodes[&h];
                let mut node = PageTableNode::new(src.level, frame, socket, socket);
                for index in 0..ENTRIES_PER_NODE {
                    let pte = src.entries[index];
                    if !pte.present() {
                        continue;
                    }
                    let (a, d) = self.or_bits(h, index);
                    let mut copy = pte;
                    copy.flags.set(PteFlags::ACCESSED, a);
                    copy.flags.set(PteFlags::DIRTY, d);
                    if !pte.is_leaf_at(src.level) {
                        copy.frame = copies[&(socket, pte.frame)];
                    }
                    node.set(index, copy);
                }
                self.nodes.insert(frame, node);
            }
        }

        // Drop replicas that are no longer wanted (or were rebuilt), then relink.
        let mut rings: Vec<Vec<FrameNumber>> = Vec::with_capacity(logical.len());
        for &h in &logical {
            let ring: Vec<FrameNumber> = new
                .iter()
                .map(|s| match copies.get(&(s, h)) {
                    Some(&f) => f,
                    None => self.member_for_replica(h, s),
                })
                .collect();
            rings.push(ring);
        }
        let dropped: Vec<FrameNumber> = logical
            .iter()
            .flat_map(|&h| {
                old.iter()
                    .filter(|&s| !keep.contains(s))
                    .map(move |s| (h, s))
            })
            .map(|(h, s)| self.member_for_replica(h, s))
            .collect();
        for member in dropped {
            self.nodes.remove(&member);
            machine.free_frame(member)?;
        }
        for ring in &rings {
            for (i, &frame) in ring.iter().enumerate() {
                self.nodes.get_mut(&frame).unwrap().ring_next = ring[(i + 1) % ring.len()];
            }
        }
        let root_ring = &rings[0];
        let primary = new.first().unwrap();
        for (slot, socket) in new.iter().enumerate() {
            self.roots[socket] = root_ring[slot];
        }
        for socket in 0..self.socket_count {
            if !new.contains(socket) {
                self.roots[socket] = root_ring[0];
            }
        }
        debug_assert_eq!(self.nodes[&self.roots[primary]].replica, primary);
        self.mask = new;
        self.epoch += 1;
        Ok(())
    }

    /// Moves the page-table to `to` by replicating there and, when
    /// `eager_free` is set, dropping the replica on `from`.
    pub fn migrate_pagetable(
        &mut self,
        machine: &mut Machine,
        from: SocketId,
        to: SocketId,
        eager_free: bool,
    ) -> Result<(), PtError> {
        if !self.mask.contains(from) {
            return Err(PtError::NotInMask(from));
        }
        if to >= self.socket_count {
            return Err(PtError::InvalidSocket(to));
        }
        if from == to {
            return Ok(());
        }
        let grown = self.mask.with(to);
        self.set_replication_mask(machine, grown)?;
        if eager_free {
            self.set_replication_mask(machine, grown.without(from))?;
        }
        Ok(())
    }

    /// Leaf entries of the primary tree as (vaddr, node, index).
    fn leaves(&self) -> Vec<(u64, FrameNumber, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(self.primary_root(), 0u64)];
        while let Some((frame, base)) = stack.pop() {
            let node = &self.nodes[&frame];
            for (index, pte) in node.entries.iter().enumerate().rev() {
                if !pte.present() {
                    continue;
                }
                let va = base + index as u64 * entry_span(node.level);
                if pte.is_leaf_at(node.level) {
                    out.push((va, frame, index));
                } else {
                    stack.push((pte.frame, va));
                }
            }
        }
        out.sort_unstable_by_key(|&(va, _, _)| va);
        out
    }

    /// Number of 4KB data frames mapped.
    pub fn data_frames(&self) -> u64 {
        self.leaves()
            .iter()
            .map(|&(_, n, i)| if self.nodes[&n].entries[i].huge() { FRAMES_PER_HUGE } else { 1 })
            .sum()
    }

    /// Moves every data frame not already on `to` onto it, rewriting leaves
    /// in all replicas. Page-table frames stay where they are.
    pub fn migrate_data(&mut self, machine: &mut Machine, to: SocketId) -> Result<WriteLog, PtError> {
        if to >= self.socket_count {
            return Err(PtError::InvalidSocket(to));
        }
        let mut log = WriteLog::default();
        let mut policy = AllocPolicy::fixed(to);
        for (_, node, index) in self.leaves() {
            let pte = self.nodes[&node].entries[index];
            if self.socket_of(pte.frame) == to {
                continue;
            }
            log.walk_reads += 1;
            let moved = if pte.huge() {
                machine.allocate_huge(&mut policy, to)?.number
            } else {
                machine.allocate_frame(AllocKind::Data, &mut policy, to)?.number
            };
            log += self.write_ring(node, index, |mut p| {
                p.frame = moved;
                p
            });
            if pte.huge() {
                machine.free_huge(pte.frame)?;
            } else {
                machine.free_frame(pte.frame)?;
            }
        }
        Ok(log)
    }

    /// Forgets all cached translations held by walkers of this space.
    pub fn invalidate(&mut self) {
        self.epoch += 1;
    }

    /// Every node of every replica, replicas in socket order, each tree pre-order.
    pub fn snapshot_dump(&self) -> SnapshotDump {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for replica in self.mask.iter() {
            for frame in self.logical_nodes(self.roots[replica]) {
                let node = &self.nodes[&frame];
                let entries = node
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.present())
                    .map(|(i, p)| DumpEntry {
                        i: i as u16,
                        frame: p.frame.0,
                        socket: self.socket_of(p.frame),
                        p: 1,
                        w: p.writable() as u8,
                        h: p.huge() as u8,
                        a: p.accessed() as u8,
                        d: p.dirty() as u8,
                    })
                    .collect();
                nodes.push(DumpNode {
                    replica_socket: node.replica,
                    level: node.level,
                    frame: frame.0,
                    socket: node.socket,
                    entries,
                });
            }
        }
        SnapshotDump {
            roots: self.roots.iter().map(|f| f.0).collect(),
            nodes,
        }
    }

    /// Frees every frame owned by the space.
    pub fn destroy(mut self, machine: &mut Machine) -> Result<(), PtError> {
        for (_, node, index) in self.leaves() {
            let pte = self.nodes[&node].entries[index];
            if pte.huge() {
                machine.free_huge(pte.frame)?;
            } else {
                machine.free_frame(pte.frame)?;
            }
        }
        for frame in std::mem::take(&mut self.nodes).into_keys() {
            machine.free_frame(frame)?;
        }
        Ok(())
    }

    /// Checks ring closure, replica locality and replica equivalence of the
    /// table structure. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let logical = self.logical_nodes(self.primary_root());
        let mut seen = 0;
        for &h in &logical {
            let ring = self.ring_members(h);
            if ring.len() != self.mask.len() {
                return Err(format!("ring of {h} has {} members, mask has {}", ring.len(), self.mask.len()));
            }
            let replicas: SocketMask = ring.iter().map(|m| self.nodes[m].replica).collect();
            if replicas != self.mask {
                return Err(format!("ring of {h} covers {replicas}, mask is {}", self.mask));
            }
            let primary = &self.nodes[&h];
            for &m in &ring {
                let node = &self.nodes[&m];
                if node.level != primary.level {
                    return Err(format!("ring of {h} mixes levels"));
                }
                if self.mask.len() > 1 && node.socket != node.replica {
                    return Err(format!("replica node {m} for socket {} lives on {}", node.replica, node.socket));
                }
                for i in 0..ENTRIES_PER_NODE {
                    let (a, b) = (primary.entries[i], node.entries[i]);
                    if a.present() != b.present() || a.writable() != b.writable() || a.huge() != b.huge() {
                        return Err(format!("entry {i} differs between {h} and {m}"));
                    }
                    if !a.present() {
                        continue;
                    }
                    if a.is_leaf_at(node.level) {
                        if a.frame != b.frame {
                            return Err(format!("leaf {i} differs between {h} and {m}"));
                        }
                    } else if self.nodes[&b.frame].replica != node.replica
                        || !self.ring_members(a.frame).contains(&b.frame)
                    {
                        return Err(format!("table pointer {i} of {m} leaves its replica"));
                    }
                }
            }
            seen += ring.len();
        }
        if seen != self.nodes.len() {
            return Err(format!("{} nodes unreachable", self.nodes.len() - seen));
        }
        for s in 0..self.socket_count {
            let expect = if self.mask.contains(s) { s } else { self.primary_socket() };
            if self.nodes[&self.roots[s]].replica != expect {
                return Err(format!("roots[{s}] names the wrong replica"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;

    const MB2: u64 = HUGE_PAGE_SIZE;

    fn machine(sockets: usize) -> Machine {
        Machine::new(MachineConfig {
            socket_count: sockets,
            frames_per_socket: 1 << 16,
            pagecache_reserve: 64,
            ..Default::default()
        })
        .unwrap()
    }

    fn space(m: &mut Machine, mask: &str) -> AddressSpace {
        AddressSpace::create(
            m,
            AllocPolicy::first_touch(),
            AllocPolicy::first_touch(),
            SocketMask::parse(mask).unwrap(),
        )
        .unwrap()
    }

    fn pt_frames(m: &Machine) -> u64 {
        m.total_pagetable_frames()
    }

    #[test]
    fn single_socket_mask_shares_one_root() {
        let mut m = machine(4);
        let s = space(&mut m, "0");
        assert_eq!(s.pagetable_frames(), 1);
        assert!(s.roots().iter().all(|&r| r == s.roots()[0]));
    }

    #[test]
    fn full_mask_builds_ring_of_four_roots() {
        let mut m = machine(4);
        let s = space(&mut m, "0-3");
        assert_eq!(s.pagetable_frames(), 4);
        assert_eq!(s.ring_members(s.roots()[0]).len(), 4);
        for sock in 0..4 {
            let root = s.root_for_socket(sock);
            assert_eq!(m.socket_of(root), sock);
        }
        s.check_invariants().unwrap();
    }

    #[test]
    fn empty_mask_rejected() {
        let mut m = machine(4);
        let r = AddressSpace::create(&mut m, AllocPolicy::first_touch(), AllocPolicy::first_touch(), SocketMask::empty());
        assert_eq!(r.unwrap_err(), PtError::InvalidMask);
        let r = AddressSpace::create(&mut m, AllocPolicy::first_touch(), AllocPolicy::first_touch(), SocketMask::single(7));
        assert_eq!(r.unwrap_err(), PtError::InvalidMask);
    }

    #[test]
    fn write_pte_costs_two_refs_per_replica() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0-3");
        let root = s.roots()[2];
        let log = s.write_pte(root, 5, Pte::leaf(FrameNumber(99), Perms::RW));
        // Level-4 entries must name tables.
        assert!(log.is_err());
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 0).unwrap();
        let leaf = s.software_walk(0, 0).unwrap().steps[3].frame;
        let log = s.write_pte(leaf, 1, Pte::leaf(FrameNumber(99), Perms::RO)).unwrap();
        assert_eq!((log.pte_writes, log.ring_reads), (4, 4));
        for sock in 0..4 {
            assert_eq!(s.software_walk(sock, FRAME_SIZE).unwrap().data_frame, FrameNumber(99));
        }
    }

    #[test]
    fn write_pte_single_replica() {
        let mut m = machine(4);
        let mut s = space(&mut m, "1");
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 1).unwrap();
        let leaf = s.software_walk(1, 0).unwrap().steps[3].frame;
        let log = s.write_pte(leaf, 7, Pte::leaf(FrameNumber(5), Perms::RW)).unwrap();
        assert_eq!((log.pte_writes, log.ring_reads), (1, 1));
        assert_eq!(s.node(leaf).unwrap().entry(7).frame, FrameNumber(5));
    }

    #[test]
    fn map_2mb_small_pages() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        assert_eq!(s.pagetable_frames(), 4);
        let leaf = s.software_walk(0, 0).unwrap().steps[3].frame;
        assert_eq!(s.node(leaf).unwrap().present_count(), 512);
        assert_eq!(m.total_data_frames(), 512);
    }

    #[test]
    fn replication_copies_tables_not_data() {
        let mut m1 = machine(4);
        let mut single = space(&mut m1, "0");
        single.map(&mut m1, 0, MB2, Perms::RW, 0).unwrap();
        let mut m4 = machine(4);
        let mut full = space(&mut m4, "0-3");
        full.map(&mut m4, 0, MB2, Perms::RW, 0).unwrap();
        assert_eq!(pt_frames(&m4), 4 * pt_frames(&m1));
        assert_eq!(m4.total_data_frames(), m1.total_data_frames());
        full.check_invariants().unwrap();
    }

    #[test]
    fn huge_mapping_has_no_level_one_tables() {
        let mut m = Machine::new(MachineConfig {
            frames_per_socket: 1 << 19,
            ..Default::default()
        })
        .unwrap();
        let mut s = space(&mut m, "0").with_page_size(PageSize::Huge);
        s.map(&mut m, 0, 1 << 30, Perms::RW, 0).unwrap();
        assert!(s.nodes().all(|n| n.level() >= 2));
        let l2 = s.nodes().find(|n| n.level() == 2).unwrap();
        assert_eq!(l2.present_count(), 512);
        let t = s.software_walk(0, 3 * MB2 + 5 * FRAME_SIZE + 17).unwrap();
        assert_eq!(t.page_size, PageSize::Huge);
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.data_frame.0, t.leaf.frame.0 + 5);
    }

    #[test]
    fn map_rejects_overlap_and_misalignment() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, 4 * FRAME_SIZE, Perms::RW, 0).unwrap();
        assert_eq!(s.map(&mut m, 3 * FRAME_SIZE, 2 * FRAME_SIZE, Perms::RW, 0), Err(PtError::AlreadyMapped(3 * FRAME_SIZE)));
        assert!(matches!(s.map(&mut m, 100, FRAME_SIZE, Perms::RW, 0), Err(PtError::Misaligned { .. })));
        assert_eq!(s.map_with(&mut m, 0, MB2, Perms::RW, 0, PageSize::Huge), Err(PtError::AlreadyMapped(0)));
    }

    #[test]
    fn map_unmap_restores_frames() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0-3");
        let before: Vec<_> = (0..4).map(|i| m.usage(i)).collect();
        s.map(&mut m, 1 << 30, 3 * MB2, Perms::RW, 1).unwrap();
        s.unmap(&mut m, 1 << 30, 3 * MB2).unwrap();
        let after: Vec<_> = (0..4).map(|i| m.usage(i)).collect();
        assert_eq!(before, after);
        assert_eq!(s.pagetable_frames(), 4);
        s.check_invariants().unwrap();
    }

    #[test]
    fn unmap_half_keeps_other_half() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0-1");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        let frames: Vec<_> = (0..512).map(|p| s.software_walk(0, p * FRAME_SIZE).unwrap().data_frame).collect();
        s.unmap(&mut m, 0, MB2 / 2).unwrap();
        for p in 0..512u64 {
            for obs in 0..2 {
                let r = s.software_walk(obs, p * FRAME_SIZE);
                if p < 256 {
                    assert_eq!(r.unwrap_err(), PtError::PageFault { level: 1 });
                } else {
                    assert_eq!(r.unwrap().data_frame, frames[p as usize]);
                }
            }
        }
        assert_eq!(s.unmap(&mut m, 0, FRAME_SIZE), Err(PtError::NotMapped(0)));
    }

    #[test]
    fn unmap_and_protect_scale_with_replicas() {
        let k = 64;
        let mut logs = Vec::new();
        for mask in ["0", "0-3"] {
            let mut m = machine(4);
            let mut s = space(&mut m, mask);
            s.map(&mut m, 0, k * FRAME_SIZE, Perms::RW, 0).unwrap();
            let p = s.protect(0, k * FRAME_SIZE, Perms::RO).unwrap();
            let u = s.unmap(&mut m, 0, (k / 2) * FRAME_SIZE).unwrap();
            logs.push((p, u));
        }
        let (p1, u1) = logs[0];
        let (p4, u4) = logs[1];
        assert_eq!(p1.pte_writes, k);
        assert_eq!(p4.pte_writes, 4 * k);
        assert_eq!(p4.ring_reads, 4 * k);
        assert_eq!(u4.pte_writes, 4 * u1.pte_writes);
    }

    #[test]
    fn protect_updates_all_replicas() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0-3");
        s.map(&mut m, 0, 8 * FRAME_SIZE, Perms::RW, 0).unwrap();
        let before: Vec<_> = (0..4).map(|o| s.software_walk(o, 0).unwrap().data_frame).collect();
        s.protect(0, 8 * FRAME_SIZE, Perms::RO).unwrap();
        for o in 0..4 {
            let t = s.software_walk(o, 0).unwrap();
            assert!(!t.leaf.writable());
            assert_eq!(t.data_frame, before[o]);
        }
        // Same-value protect leaves translations alone.
        s.protect(0, 8 * FRAME_SIZE, Perms::RO).unwrap();
        for o in 0..4 {
            assert_eq!(s.software_walk(o, 0).unwrap().data_frame, before[o]);
        }
        assert_eq!(s.protect(1 << 30, FRAME_SIZE, Perms::RO), Err(PtError::NotMapped(1 << 30)));
    }

    #[test]
    fn ad_bits_or_over_replicas() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0-3");
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 0).unwrap();
        assert_eq!(s.read_ad_bits(0).unwrap(), (false, false));
        s.set_replica_bits(2, 0, true, false).unwrap();
        assert_eq!(s.read_ad_bits(0).unwrap(), (true, false));
        s.set_replica_bits(3, 0, true, true).unwrap();
        assert_eq!(s.read_ad_bits(0).unwrap(), (true, true));
        s.clear_ad_bits(0).unwrap();
        assert_eq!(s.read_ad_bits(0).unwrap(), (false, false));
        for o in 0..4 {
            let t = s.software_walk(o, 0).unwrap();
            assert!(!t.leaf.accessed() && !t.leaf.dirty());
        }
        assert_eq!(s.clear_ad_bits(1 << 30), Err(PtError::NotMapped(1 << 30)));
    }

    #[test]
    fn ad_or_exhaustive_placements() {
        // Each replica independently untouched, accessed, or accessed+dirty.
        let mut m = machine(4);
        let mut s = space(&mut m, "0-3");
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 0).unwrap();
        for combo in 0..81u32 {
            s.clear_ad_bits(0).unwrap();
            let states: Vec<u32> = (0..4).map(|r| (combo / 3u32.pow(r)) % 3).collect();
            for (r, &st) in states.iter().enumerate() {
                s.set_replica_bits(r, 0, st >= 1, st == 2).unwrap();
            }
            let oracle = (states.iter().any(|&x| x >= 1), states.iter().any(|&x| x == 2));
            assert_eq!(s.read_ad_bits(0).unwrap(), oracle, "combo {states:?}");
        }
    }

    #[test]
    fn upper_level_bits_are_ored() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0-1");
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 0).unwrap();
        let t = s.software_walk(1, 0).unwrap();
        s.mark_entry(t.steps[0].frame, t.steps[0].index, false);
        assert_eq!(s.read_ad_bits_at_level(0, 4).unwrap(), (true, false));
        assert_eq!(s.read_ad_bits_at_level(0, 3).unwrap(), (false, false));
    }

    #[test]
    fn grow_mask_gives_identical_translations() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, 4 * MB2, Perms::RW, 0).unwrap();
        s.map(&mut m, 1 << 39, MB2, Perms::RO, 0).unwrap();
        s.set_replication_mask(&mut m, SocketMask::all(4)).unwrap();
        s.check_invariants().unwrap();
        for va in (0..4 * MB2).step_by(7 * FRAME_SIZE as usize).chain([1 << 39]) {
            let base = s.software_walk(0, va).unwrap();
            for o in 1..4 {
                let t = s.software_walk(o, va).unwrap();
                assert_eq!((t.data_frame, t.leaf.perms()), (base.data_frame, base.leaf.perms()));
                assert!(t.steps.iter().all(|st| st.socket == o));
            }
        }
    }

    #[test]
    fn shrink_mask_restores_single_table_count() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, 2 * MB2, Perms::RW, 0).unwrap();
        let single = pt_frames(&m);
        s.set_replication_mask(&mut m, SocketMask::parse("0,1").unwrap()).unwrap();
        assert_eq!(pt_frames(&m), 2 * single);
        s.set_replication_mask(&mut m, SocketMask::single(0)).unwrap();
        assert_eq!(pt_frames(&m), single);
        assert!(s.nodes().all(|n| n.ring_next() == n.frame()));
        s.check_invariants().unwrap();
    }

    #[test]
    fn same_mask_is_a_no_op() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        let (frames, epoch) = (pt_frames(&m), s.epoch());
        s.set_replication_mask(&mut m, SocketMask::single(0)).unwrap();
        assert_eq!((pt_frames(&m), s.epoch()), (frames, epoch));
    }

    #[test]
    fn replication_rolls_back_on_oom() {
        let mut m = Machine::new(MachineConfig {
            socket_count: 2,
            frames_per_socket: 1200,
            pagecache_reserve: 2,
            ..Default::default()
        })
        .unwrap();
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        // Exhaust socket 1 except for one frame.
        let mut p = AllocPolicy::fixed(1);
        while m.usage(1).free > 1 {
            m.allocate_frame(AllocKind::PageTable, &mut p, 1).unwrap();
        }
        let counts = |m: &Machine| {
            (0..2).map(|i| m.usage(i)).map(|u| (u.free, u.data, u.pagetable)).collect::<Vec<_>>()
        };
        let before = (counts(&m), s.snapshot_dump());
        let err = s.set_replication_mask(&mut m, SocketMask::all(2)).unwrap_err();
        assert_eq!(err, PtError::OutOfMemory(1));
        assert_eq!((counts(&m), s.snapshot_dump()), before);
        assert_eq!(s.replication_mask(), SocketMask::single(0));
        s.check_invariants().unwrap();
    }

    #[test]
    fn eager_migration_moves_every_table() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, 3 * MB2, Perms::RW, 0).unwrap();
        s.migrate_pagetable(&mut m, 0, 1, true).unwrap();
        assert!(s.nodes().all(|n| n.socket() == 1));
        assert_eq!(s.replication_mask(), SocketMask::single(1));
        assert_eq!(m.usage(0).pagetable, 0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn lazy_migration_keeps_both_consistent() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        s.migrate_pagetable(&mut m, 0, 1, false).unwrap();
        s.map(&mut m, MB2, MB2, Perms::RW, 1).unwrap();
        s.check_invariants().unwrap();
        assert_eq!(
            s.software_walk(0, MB2 + 8192).unwrap().data_frame,
            s.software_walk(1, MB2 + 8192).unwrap().data_frame
        );
        assert_eq!(s.migrate_pagetable(&mut m, 1, 1, true), Ok(()));
        assert_eq!(s.replication_mask().len(), 2);
    }

    #[test]
    fn walk_sockets() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0");
        assert_eq!(s.software_walk(0, 0).unwrap_err(), PtError::PageFault { level: 4 });
        s.map(&mut m, 0, FRAME_SIZE, Perms::RW, 0).unwrap();
        let t = s.software_walk(1, 0).unwrap();
        assert_eq!(t.steps.len(), 4);
        assert!(t.steps.iter().all(|st| st.socket == 0));
    }

    #[test]
    fn snapshot_node_counts() {
        let mut m = machine(4);
        let mut s = space(&mut m, "0");
        assert_eq!(s.snapshot_dump().nodes.len(), 1);
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        let d = s.snapshot_dump();
        assert_eq!(d.nodes.len(), 4);
        assert_eq!(d.nodes.iter().map(|n| n.level).collect::<Vec<_>>(), [4, 3, 2, 1]);
        assert_eq!(d.nodes[3].entries.len(), 512);
        let round = SnapshotDump::from_jsonl(&d.to_jsonl()).unwrap();
        assert_eq!(round, d);
    }

    #[test]
    fn data_migration_rewrites_leaves() {
        let mut m = machine(2);
        let mut s = space(&mut m, "0-1");
        s.map(&mut m, 0, 16 * FRAME_SIZE, Perms::RW, 0).unwrap();
        s.migrate_data(&mut m, 1).unwrap();
        assert_eq!(m.usage(0).data, 0);
        assert_eq!(m.usage(1).data, 16);
        for o in 0..2 {
            assert_eq!(m.socket_of(s.software_walk(o, 0).unwrap().data_frame), 1);
        }
        s.check_invariants().unwrap();
    }

    #[test]
    fn destroy_returns_everything() {
        let mut m = machine(2);
        let before = (m.usage(0), m.usage(1));
        let mut s = space(&mut m, "0-1");
        s.map(&mut m, 0, MB2, Perms::RW, 0).unwrap();
        s.map_with(&mut m, 1 << 30, MB2, Perms::RW, 1, PageSize::Huge).unwrap();
        s.destroy(&mut m).unwrap();
        assert_eq!((m.usage(0), m.usage(1)), before);
    }
}
