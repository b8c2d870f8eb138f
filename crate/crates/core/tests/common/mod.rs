//! Single-table reference model of an address space, used to check the
//! replicated page-table from every socket.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ptsim::machine::FRAME_SIZE;
use ptsim::{AddressSpace, Machine, Perms, PtError};
use rand::Rng;

/// Two 32MB windows under different root entries.
pub const WINDOWS: [u64; 2] = [0x4000_0000, (1 << 39) + 0x20_0000];
pub const WINDOW_PAGES: u64 = 8192;

pub fn page_va(page: u64) -> u64 {
    WINDOWS[(page / WINDOW_PAGES) as usize] + (page % WINDOW_PAGES) * FRAME_SIZE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rec {
    pub frame: u64,
    pub writable: bool,
    pub accessed: bool,
    pub dirty: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Map { page: u64, n: u64, writable: bool },
    Unmap { page: u64, n: u64 },
    Protect { page: u64, n: u64, writable: bool },
    Touch { observer: usize, page: u64, dirty: bool },
    Clear { page: u64 },
}

#[derive(Default)]
pub struct Oracle {
    pub pages: BTreeMap<u64, Rec>,
}

pub fn random_op<R: Rng>(rng: &mut R, sockets: usize) -> Op {
    let total = WINDOWS.len() as u64 * WINDOW_PAGES;
    let n = rng.gen_range(1..=16);
    // Keep ranges inside one window.
    let page = {
        let p = rng.gen_range(0..total);
        let w = p / WINDOW_PAGES;
        w * WINDOW_PAGES + (p % WINDOW_PAGES).min(WINDOW_PAGES - n)
    };
    match rng.gen_range(0..100) {
        0..=39 => Op::Map { page, n, writable: rng.gen_bool(0.7) },
        40..=59 => Op::Unmap { page, n },
        60..=74 => Op::Protect { page, n, writable: rng.gen_bool(0.5) },
        75..=94 => Op::Touch { observer: rng.gen_range(0..sockets), page, dirty: rng.gen_bool(0.3) },
        _ => Op::Clear { page },
    }
}

impl Oracle {
    fn all_mapped(&self, page: u64, n: u64) -> bool {
        (page..page + n).all(|p| self.pages.contains_key(&p))
    }

    /// Applies `op` to both models and checks that they agree on success.
    pub fn apply(&mut self, space: &mut AddressSpace, machine: &mut Machine, op: Op) -> Result<(), String> {
        let size = |n: u64| n * FRAME_SIZE;
        match op {
            Op::Map { page, n, writable } => {
                let free = (page..page + n).all(|p| !self.pages.contains_key(&p));
                let perms = if writable { Perms::RW } else { Perms::RO };
                let r = space.map(machine, page_va(page), size(n), perms, 0);
                match (free, r) {
                    (true, Ok(_)) => {
                        for p in page..page + n {
                            let frame = space.software_walk(0, page_va(p)).map_err(|e| e.to_string())?.data_frame.0;
                            self.pages.insert(p, Rec { frame, writable, accessed: false, dirty: false });
                        }
                        Ok(())
                    }
                    (false, Err(PtError::AlreadyMapped(_))) => Ok(()),
                    (free, r) => Err(format!("map {page}+{n}: oracle free={free}, got {r:?}")),
                }
            }
            Op::Unmap { page, n } => {
                let mapped = self.all_mapped(page, n);
                match (mapped, space.unmap(machine, page_va(page), size(n))) {
                    (true, Ok(_)) => {
                        for p in page..page + n {
                            self.pages.remove(&p);
                        }
                        Ok(())
                    }
                    (false, Err(PtError::NotMapped(_))) => Ok(()),
                    (m, r) => Err(format!("unmap {page}+{n}: oracle mapped={m}, got {r:?}")),
                }
            }
            Op::Protect { page, n, writable } => {
                let mapped = self.all_mapped(page, n);
                let perms = if writable { Perms::RW } else { Perms::RO };
                match (mapped, space.protect(page_va(page), size(n), perms)) {
                    (true, Ok(_)) => {
                        for p in page..page + n {
                            self.pages.get_mut(&p).unwrap().writable = writable;
                        }
                        Ok(())
                    }
                    (false, Err(PtError::NotMapped(_))) => Ok(()),
                    (m, r) => Err(format!("protect {page}+{n}: oracle mapped={m}, got {r:?}")),
                }
            }
            Op::Touch { observer, page, dirty } => {
                match (self.pages.get_mut(&page), space.set_replica_bits(observer, page_va(page), true, dirty)) {
                    (Some(rec), Ok(())) => {
                        rec.accessed = true;
                        rec.dirty |= dirty;
                        Ok(())
                    }
                    (None, Err(PtError::NotMapped(_))) => Ok(()),
                    (rec, r) => Err(format!("touch {page}: oracle {rec:?}, got {r:?}")),
                }
            }
            Op::Clear { page } => match (self.pages.get_mut(&page), space.clear_ad_bits(page_va(page))) {
                (Some(rec), Ok(())) => {
                    rec.accessed = false;
                    rec.dirty = false;
                    Ok(())
                }
                (None, Err(PtError::NotMapped(_))) => Ok(()),
                (rec, r) => Err(format!("clear {page}: oracle {rec:?}, got {r:?}")),
            },
        }
    }

    /// Compares `page` as seen from every socket. Returns the mismatches.
    pub fn check_page(&self, space: &AddressSpace, page: u64) -> Vec<String> {
        let va = page_va(page);
        let mut bad = Vec::new();
        let expected = self.pages.get(&page);
        for socket in 0..space.socket_count() {
            match (expected, space.software_walk(socket, va)) {
                (None, Err(PtError::PageFault { .. })) => {}
                (Some(rec), Ok(t)) => {
                    if t.data_frame.0 != rec.frame || t.leaf.writable() != rec.writable {
                        bad.push(format!("page {page} socket {socket}: {:?} vs {rec:?}", t.leaf));
                    }
                    // A replica never carries a bit the OR-ed view lacks.
                    if (t.leaf.accessed() && !rec.accessed) || (t.leaf.dirty() && !rec.dirty) {
                        bad.push(format!("page {page} socket {socket}: stray A/D bit"));
                    }
                }
                (e, r) => bad.push(format!("page {page} socket {socket}: oracle {e:?}, walk {r:?}")),
            }
        }
        match (expected, space.read_ad_bits(va)) {
            (Some(rec), Ok(ad)) if ad != (rec.accessed, rec.dirty) => {
                bad.push(format!("page {page}: A/D {ad:?} vs {rec:?}"));
            }
            (None, Ok(_)) => bad.push(format!("page {page}: A/D readable on unmapped page")),
            _ => {}
        }
        bad
    }

    /// Half mapped pages, half anywhere in the windows.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<u64> {
        let mapped: Vec<u64> = self.pages.keys().copied().collect();
        let total = WINDOWS.len() as u64 * WINDOW_PAGES;
        (0..count)
            .map(|i| {
                if i % 2 == 0 && !mapped.is_empty() {
                    mapped[rng.gen_range(0..mapped.len())]
                } else {
                    rng.gen_range(0..total)
                }
            })
            .collect()
    }
}
