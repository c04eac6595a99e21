//! Vector matrix register file: the reduced (48 bits per lane) register
//! storage that holds base address vectors during runahead, managed by
//! a circular free list. A slot is owned by exactly one chain
//! instruction and released once its consumer has finished reading it.

use crate::isa::MATRIX_REG_ROWS;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct VmrEntry {
    pub lanes: [u64; MATRIX_REG_ROWS],
    filled: u32,
    expected: usize,
    pub owner: u64,
}

impl VmrEntry {
    pub fn ready(&self) -> bool {
        self.filled.count_ones() as usize >= self.expected
    }
}

#[derive(Debug, Clone)]
pub struct VmrFile {
    /// None emulates unbounded capacity.
    capacity: Option<usize>,
    slots: Vec<Option<VmrEntry>>,
    free: VecDeque<usize>,
}

impl VmrFile {
    pub fn new(capacity: Option<usize>) -> Self {
        let n = capacity.unwrap_or(0);
        VmrFile {
            capacity,
            slots: vec![None; n],
            free: (0..n).collect(),
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn free_len(&self) -> usize {
        self.free.len()
    }

    pub fn allocated(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Pops a slot off the free list for `owner`, expecting `expected`
    /// lane fills before the entry reads as ready. Returns None when the
    /// free list is empty (bounded mode only).
    pub fn alloc(&mut self, owner: u64, expected: usize) -> Option<usize> {
        let idx = match self.free.pop_front() {
            Some(idx) => idx,
            None => {
                if self.capacity.is_some() {
                    return None;
                }
                self.slots.push(None);
                self.slots.len() - 1
            }
        };
        self.slots[idx] = Some(VmrEntry {
            lanes: [0; MATRIX_REG_ROWS],
            filled: 0,
            expected: expected.min(MATRIX_REG_ROWS),
            owner,
        });
        Some(idx)
    }

    /// Writes one 48-bit lane; returns true when the entry just became
    /// ready.
    pub fn fill_lane(&mut self, slot: usize, lane: usize, value: u64) -> bool {
        let entry = self.slots[slot].as_mut().expect("fill of unallocated slot");
        let was_ready = entry.ready();
        entry.lanes[lane] = value & crate::isa::ADDR_MASK;
        entry.filled |= 1 << lane;
        !was_ready && entry.ready()
    }

    pub fn get(&self, slot: usize) -> Option<&VmrEntry> {
        self.slots.get(slot).and_then(|s| s.as_ref())
    }

    pub fn release(&mut self, slot: usize) {
        if self.slots[slot].take().is_some() {
            self.free.push_back(slot);
        }
    }

    /// allocated + free must equal capacity at every cycle boundary.
    pub fn conservation_holds(&self) -> bool {
        match self.capacity {
            Some(cap) => self.allocated() + self.free_len() == cap,
            None => self.allocated() + self.free_len() == self.slots.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_fill_release_cycle() {
        let mut vmr = VmrFile::new(Some(2));
        let s0 = vmr.alloc(10, 3).unwrap();
        let s1 = vmr.alloc(11, 1).unwrap();
        assert_eq!(vmr.alloc(12, 1), None); // exhausted
        assert!(vmr.conservation_holds());

        assert!(!vmr.fill_lane(s0, 0, 0x100));
        assert!(!vmr.fill_lane(s0, 1, 0x200));
        assert!(vmr.fill_lane(s0, 2, (1u64 << 48) | 0x300)); // masked to 48 bits
        assert!(vmr.get(s0).unwrap().ready());
        assert_eq!(vmr.get(s0).unwrap().lanes[2], 0x300);

        vmr.release(s1);
        assert!(vmr.conservation_holds());
        let s2 = vmr.alloc(12, 1).unwrap();
        assert_eq!(s2, s1); // circular free list reuses the slot
    }

    #[test]
    fn unbounded_mode_never_exhausts() {
        let mut vmr = VmrFile::new(None);
        for i in 0..100 {
            assert!(vmr.alloc(i, 16).is_some());
        }
        assert!(vmr.conservation_holds());
    }
}
