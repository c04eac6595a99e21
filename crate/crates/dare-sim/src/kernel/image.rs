//! Flat byte-addressable memory contents for a kernel run, organized as
//! named, non-overlapping, 64-byte-aligned regions with a layout
//! manifest.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Base of the first allocated region; keeps address 0 unmapped so a
/// stray zero base address faults instead of silently reading.
const IMAGE_BASE: u64 = 0x1_0000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub base: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    segments: BTreeMap<u64, Vec<u8>>,
    manifest: Vec<Region>,
    next_base: u64,
}

impl Default for MemoryImage {
    fn default() -> Self {
        MemoryImage {
            segments: BTreeMap::new(),
            manifest: Vec::new(),
            next_base: IMAGE_BASE,
        }
    }
}

impl MemoryImage {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a region at the next 64-byte-aligned base and returns
    /// its base address.
    pub fn add_region(&mut self, name: &str, bytes: Vec<u8>) -> u64 {
        let base = self.next_base;
        let len = bytes.len() as u64;
        self.next_base = base + len.div_ceil(64).max(1) * 64;
        self.manifest.push(Region {
            name: name.to_string(),
            base,
            len,
        });
        self.segments.insert(base, bytes);
        base
    }

    pub fn manifest(&self) -> &[Region] {
        &self.manifest
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.manifest.iter().find(|r| r.name == name)
    }

    pub fn region_bytes(&self, name: &str) -> Option<&[u8]> {
        let r = self.region(name)?;
        self.segments.get(&r.base).map(|v| v.as_slice())
    }

    fn locate(&self, addr: u64, len: usize) -> Option<(u64, usize)> {
        let (&base, seg) = self.segments.range(..=addr).next_back()?;
        let off = (addr - base) as usize;
        if off + len <= seg.len() {
            Some((base, off))
        } else {
            None
        }
    }

    /// True iff `[addr, addr+len)` lies inside one segment.
    pub fn contains(&self, addr: u64, len: usize) -> bool {
        self.locate(addr, len).is_some()
    }

    pub fn read(&self, addr: u64, len: usize) -> Option<&[u8]> {
        let (base, off) = self.locate(addr, len)?;
        Some(&self.segments[&base][off..off + len])
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Option<()> {
        let (base, off) = self.locate(addr, bytes.len())?;
        let seg = self.segments.get_mut(&base).unwrap();
        seg[off..off + bytes.len()].copy_from_slice(bytes);
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_are_aligned_and_disjoint() {
        let mut img = MemoryImage::new();
        let a = img.add_region("a", vec![1; 100]);
        let b = img.add_region("b", vec![2; 64]);
        assert_eq!(a % 64, 0);
        assert_eq!(b % 64, 0);
        assert!(b >= a + 128);
        assert_eq!(img.read(a + 99, 1), Some(&[1u8][..]));
        assert_eq!(img.read(a + 99, 2), None); // crosses the region end
        assert_eq!(img.read(0, 1), None);
    }

    #[test]
    fn write_round_trips() {
        let mut img = MemoryImage::new();
        let base = img.add_region("x", vec![0; 64]);
        img.write(base + 10, &[7, 8, 9]).unwrap();
        assert_eq!(img.read(base + 10, 3), Some(&[7u8, 8, 9][..]));
        assert!(img.write(base + 63, &[1, 2]).is_none());
    }
}
