//! Per-core translation hardware: a two-level fully associative LRU TLB,
//! per-level paging-structure caches, and a page walker that charges the
//! machine's access cost for every page-table node it touches.

use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasherDefault, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::machine::{FrameNumber, Machine, SocketId};
use crate::pagetable::{level_index, AddressSpace, PageSize, PtError, LEVELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TlbConfig {
    pub l1_entries: usize,
    pub l2_entries: usize,
}

impl Default for TlbConfig {
    fn default() -> Self {
        TlbConfig {
            l1_entries: 64,
            l2_entries: 1024,
        }
    }
}

/// Paging-structure (MMU) cache capacities for levels 4, 3 and 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PscConfig {
    pub enabled: bool,
    pub entries_per_level: [usize; 3],
}

impl Default for PscConfig {
    fn default() -> Self {
        PscConfig {
            enabled: true,
            entries_per_level: [32; 3],
        }
    }
}

/// Optional cache of leaf PTE cachelines standing in for the last-level cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeafCacheConfig {
    pub enabled: bool,
    pub lines: usize,
    pub hit_cycles: u64,
}

impl Default for LeafCacheConfig {
    fn default() -> Self {
        LeafCacheConfig {
            enabled: false,
            lines: 4096,
            hit_cycles: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationConfig {
    pub tlb: TlbConfig,
    pub psc: PscConfig,
    pub leaf_cache: LeafCacheConfig,
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<(), String> {
        let t = self.tlb;
        if t.l1_entries == 0 || t.l2_entries == 0 || t.l1_entries > t.l2_entries {
            return Err("TLB sizes must satisfy 0 < l1_entries <= l2_entries".into());
        }
        if self.psc.enabled && self.psc.entries_per_level.contains(&0) {
            return Err("paging-structure cache levels need at least one entry".into());
        }
        if self.leaf_cache.enabled && self.leaf_cache.lines == 0 {
            return Err("leaf cache needs at least one line".into());
        }
        Ok(())
    }
}

/// Multiplicative hash for small integer keys; lookups are on the hot path.
#[derive(Default, Clone, Copy)]
struct MulHasher(u64);

impl Hasher for MulHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_u8(&mut self, n: u8) {
        self.write_u64(n as u64);
    }

    fn write_usize(&mut self, n: usize) {
        self.write_u64(n as u64);
    }

    fn write_u64(&mut self, n: u64) {
        self.0 = (self.0.rotate_left(5) ^ n).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
}

type FastMap<K, V> = HashMap<K, V, BuildHasherDefault<MulHasher>>;

/// Fully associative LRU map.
#[derive(Debug, Clone)]
struct Lru<K, V> {
    map: FastMap<K, (V, u64)>,
    order: BTreeMap<u64, K>,
    capacity: usize,
    tick: u64,
}

impl<K: Hash + Eq + Copy, V: Copy> Lru<K, V> {
    fn new(capacity: usize) -> Self {
        Lru {
            map: FastMap::with_capacity_and_hasher(capacity, Default::default()),
            order: BTreeMap::new(),
            capacity,
            tick: 0,
        }
    }

    fn get(&mut self, key: &K) -> Option<V> {
        let (value, stamp) = self.map.get_mut(key)?;
        self.order.remove(stamp);
        self.tick += 1;
        *stamp = self.tick;
        self.order.insert(self.tick, *key);
        Some(*value)
    }

    fn update(&mut self, key: &K, value: V) {
        if let Some(slot) = self.map.get_mut(key) {
            slot.0 = value;
        }
    }

    fn remove(&mut self, key: &K) -> Option<V> {
        let (value, stamp) = self.map.remove(key)?;
        self.order.remove(&stamp);
        Some(value)
    }

    /// Inserts as most recent; returns the evicted entry if full.
    fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        self.remove(&key);
        let evicted = if self.map.len() >= self.capacity {
            let (_, old) = self.order.pop_first()?;
            self.map.remove(&old).map(|(v, _)| (old, v))
        } else {
            None
        };
        self.tick += 1;
        self.map.insert(key, (value, self.tick));
        self.order.insert(self.tick, key);
        evicted
    }

    fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }

    fn len(&self) -> usize {
        self.map.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct TlbKey {
    page: u64,
    huge: bool,
}

#[derive(Clone, Copy, Debug)]
struct TlbEntry {
    frame: FrameNumber,
    leaf_node: FrameNumber,
    leaf_index: usize,
    dirty: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkAccess {
    pub level: u8,
    pub frame: FrameNumber,
    pub socket: SocketId,
    pub local: bool,
    pub cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkResult {
    pub cycles: u64,
    pub accesses: Vec<WalkAccess>,
    /// Socket of the translated data frame.
    pub leaf_socket: SocketId,
    /// Deepest paging-structure cache level that hit.
    pub hit_level: Option<u8>,
    pub page_size: PageSize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Translation {
    /// 4KB frame holding the translated address.
    pub data_frame: FrameNumber,
    /// `None` on a TLB hit.
    pub walk: Option<WalkResult>,
}

impl Translation {
    pub fn walk_cycles(&self) -> u64 {
        self.walk.as_ref().map_or(0, |w| w.cycles)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkStats {
    pub walks: u64,
    pub walk_cycles: u64,
    pub local_accesses: u64,
    pub remote_accesses: u64,
    pub tlb_hits: u64,
    pub tlb_misses: u64,
    /// Leaf-level page-table accesses, split by locality.
    pub leaf_local: u64,
    pub leaf_remote: u64,
    pub leaf_cache_hits: u64,
}

impl WalkStats {
    pub fn remote_fraction(&self) -> f64 {
        ratio(self.remote_accesses, self.local_accesses + self.remote_accesses)
    }

    pub fn remote_leaf_fraction(&self) -> f64 {
        ratio(self.leaf_remote, self.leaf_local + self.leaf_remote)
    }

    pub fn merge(&mut self, o: &WalkStats) {
        self.walks += o.walks;
        self.walk_cycles += o.walk_cycles;
        self.local_accesses += o.local_accesses;
        self.remote_accesses += o.remote_accesses;
        self.tlb_hits += o.tlb_hits;
        self.tlb_misses += o.tlb_misses;
        self.leaf_local += o.leaf_local;
        self.leaf_remote += o.leaf_remote;
        self.leaf_cache_hits += o.leaf_cache_hits;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Translation hardware of one core.
#[derive(Debug, Clone)]
pub struct TranslationEngine {
    socket: SocketId,
    config: TranslationConfig,
    l1: Lru<TlbKey, TlbEntry>,
    l2: Lru<TlbKey, TlbEntry>,
    /// Index 0 caches level-4 entries, 1 level-3, 2 level-2.
    psc: [Lru<u64, FrameNumber>; 3],
    leaf_lines: Lru<(FrameNumber, usize), ()>,
    stats: WalkStats,
    seen_epoch: u64,
    root: Option<FrameNumber>,
}

impl TranslationEngine {
    pub fn new(socket: SocketId, config: TranslationConfig) -> Self {
        let psc = config.psc.entries_per_level.map(Lru::new);
        TranslationEngine {
            socket,
            l1: Lru::new(config.tlb.l1_entries),
            l2: Lru::new(config.tlb.l2_entries),
            psc,
            leaf_lines: Lru::new(config.leaf_cache.lines.max(1)),
            config,
            stats: WalkStats::default(),
            seen_epoch: 0,
            root: None,
        }
    }

    pub fn socket(&self) -> SocketId {
        self.socket
    }

    /// Moves the core's thread context to another socket. Cached state is dropped.
    pub fn set_socket(&mut self, socket: SocketId) {
        self.socket = socket;
        self.flush();
        self.root = None;
    }

    /// Loads the root for this socket and empties the TLB and PSC.
    pub fn context_switch(&mut self, space: &AddressSpace) -> FrameNumber {
        self.flush();
        let root = space.root_for_socket(self.socket);
        self.root = Some(root);
        self.seen_epoch = space.epoch();
        root
    }

    pub fn flush(&mut self) {
        self.l1.clear();
        self.l2.clear();
        for level in &mut self.psc {
            level.clear();
        }
    }

    pub fn tlb_len(&self) -> usize {
        self.l1.len() + self.l2.len()
    }

    pub fn walk_stats(&self) -> WalkStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = WalkStats::default();
    }

    fn tlb_lookup(&mut self, vaddr: u64) -> Option<(TlbKey, TlbEntry)> {
        let keys = [
            TlbKey { page: vaddr >> 12, huge: false },
            TlbKey { page: vaddr >> 21, huge: true },
        ];
        for key in keys {
            if let Some(e) = self.l1.get(&key) {
                return Some((key, e));
            }
        }
        for key in keys {
            if let Some(e) = self.l2.remove(&key) {
                self.tlb_fill(key, e);
                return Some((key, e));
            }
        }
        None
    }

    fn tlb_fill(&mut self, key: TlbKey, entry: TlbEntry) {
        if let Some((victim, e)) = self.l1.insert(key, entry) {
            self.l2.insert(victim, e);
        }
    }

    /// Translates `vaddr`, walking the page-table on a TLB miss.
    pub fn translate(
        &mut self,
        machine: &Machine,
        space: &mut AddressSpace,
        vaddr: u64,
        is_write: bool,
    ) -> Result<Translation, PtError> {
        let root = space.root_for_socket(self.socket);
        if space.epoch() != self.seen_epoch || self.root != Some(root) {
            // Shootdown, or the replica we were using is gone.
            self.flush();
            self.seen_epoch = space.epoch();
            self.root = Some(root);
        }

        if let Some((key, mut entry)) = self.tlb_lookup(vaddr) {
            self.stats.tlb_hits += 1;
            if is_write && !entry.dirty {
                space.mark_entry(entry.leaf_node, entry.leaf_index, true);
                entry.dirty = true;
                self.l1.update(&key, entry);
            }
            let offset = if key.huge { (vaddr >> 12) & 0x1ff } else { 0 };
            return Ok(Translation {
                data_frame: FrameNumber(entry.frame.0 + offset),
                walk: None,
            });
        }
        self.stats.tlb_misses += 1;
        self.stats.walks += 1;

        let (mut node, mut level, hit_level) = self.psc_probe(root, vaddr);
        let mut accesses = Vec::with_capacity(LEVELS as usize);
        let mut cycles = 0;
        loop {
            let n = space.node(node).expect("walker reached a freed node");
            let index = level_index(vaddr, level);
            let pte = n.entry(index);
            let socket = n.socket();
            let leaf = level == 1 || pte.huge();
            let local = socket == self.socket;
            let mut cost = machine.access_cost(self.socket, node);
            let mut cache_hit = false;
            if leaf && self.config.leaf_cache.enabled {
                let line = (node, index / 8);
                cache_hit = self.leaf_lines.get(&line).is_some();
                if cache_hit {
                    cost = self.config.leaf_cache.hit_cycles;
                } else {
                    self.leaf_lines.insert(line, ());
                }
            }
            cycles += cost;
            accesses.push(WalkAccess {
                level,
                frame: node,
                socket,
                local,
                cycles: cost,
            });
            if cache_hit {
                self.stats.leaf_cache_hits += 1;
            } else {
                if local {
                    self.stats.local_accesses += 1;
                } else {
                    self.stats.remote_accesses += 1;
                }
                if leaf && pte.present() {
                    if local {
                        self.stats.leaf_local += 1;
                    } else {
                        self.stats.leaf_remote += 1;
                    }
                }
            }
            if !pte.present() {
                self.stats.walk_cycles += cycles;
                return Err(PtError::PageFault { level });
            }
            space.mark_entry(node, index, leaf && is_write);
            if leaf {
                let huge = level == 2;
                let key = TlbKey {
                    page: if huge { vaddr >> 21 } else { vaddr >> 12 },
                    huge,
                };
                self.tlb_fill(
                    key,
                    TlbEntry {
                        frame: pte.frame,
                        leaf_node: node,
                        leaf_index: index,
                        dirty: is_write,
                    },
                );
                self.stats.walk_cycles += cycles;
                let data_frame = if huge {
                    FrameNumber(pte.frame.0 + ((vaddr >> 12) & 0x1ff))
                } else {
                    pte.frame
                };
                return Ok(Translation {
                    data_frame,
                    walk: Some(WalkResult {
                        cycles,
                        accesses,
                        leaf_socket: machine.socket_of(pte.frame),
                        hit_level,
                        page_size: if huge { PageSize::Huge } else { PageSize::Small },
                    }),
                });
            }
            if self.config.psc.enabled {
                self.psc[(LEVELS - level) as usize].insert(psc_key(vaddr, level), pte.frame);
            }
            node = pte.frame;
            level -= 1;
        }
    }

    /// Starting node and level for a walk, skipping levels cached in the PSC.
    fn psc_probe(&mut self, root: FrameNumber, vaddr: u64) -> (FrameNumber, u8, Option<u8>) {
        if self.config.psc.enabled {
            for level in 2..=LEVELS {
                let slot = (LEVELS - level) as usize;
                if let Some(child) = self.psc[slot].get(&psc_key(vaddr, level)) {
                    return (child, level - 1, Some(level));
                }
            }
        }
        (root, LEVELS, None)
    }
}

/// Virtual-address bits consumed down to and including `level`.
fn psc_key(vaddr: u64, level: u8) -> u64 {
    (vaddr & ((1 << 48) - 1)) >> (12 + 9 * (level as u32 - 1))
}

/// Flushes every engine, as a global TLB shootdown would.
pub fn flush_all(engines: &mut [TranslationEngine]) {
    for e in engines {
        e.flush();
    }
}
