//! Sparse physical memory. Untouched frames read as zero.

use std::collections::HashMap;

pub const FRAME_BYTES: u64 = 4096;

#[derive(Debug, Clone, Default)]
pub struct PhysMemory {
    frames: HashMap<u64, Box<[u8]>>,
}

impl PhysMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, pa: u64, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        self.read_into(pa, &mut out);
        out
    }

    pub fn read_into(&self, pa: u64, out: &mut [u8]) {
        let mut done = 0usize;
        while done < out.len() {
            let addr = pa + done as u64;
            let (frame, off) = (addr / FRAME_BYTES, (addr % FRAME_BYTES) as usize);
            let n = (FRAME_BYTES as usize - off).min(out.len() - done);
            match self.frames.get(&frame) {
                Some(f) => out[done..done + n].copy_from_slice(&f[off..off + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub fn write(&mut self, pa: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let addr = pa + done as u64;
            let (frame, off) = (addr / FRAME_BYTES, (addr % FRAME_BYTES) as usize);
            let n = (FRAME_BYTES as usize - off).min(data.len() - done);
            let f = self
                .frames
                .entry(frame)
                .or_insert_with(|| vec![0u8; FRAME_BYTES as usize].into_boxed_slice());
            f[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    /// Zeroes `[pa, pa + len)`, which must be frame-aligned.
    pub fn zero(&mut self, pa: u64, len: u64) {
        debug_assert!(pa.is_multiple_of(FRAME_BYTES) && len.is_multiple_of(FRAME_BYTES));
        let first = pa / FRAME_BYTES;
        let count = len / FRAME_BYTES;
        if count as usize > self.frames.len() {
            self.frames
                .retain(|f, _| !(first..first + count).contains(f));
        } else {
            for f in first..first + count {
                self.frames.remove(&f);
            }
        }
    }

    /// Non-zero frames within `[pa, pa + len)` as `(offset from pa, bytes)`.
    pub fn populated(&self, pa: u64, len: u64) -> Vec<(u64, &[u8])> {
        let first = pa / FRAME_BYTES;
        let count = len.div_ceil(FRAME_BYTES);
        let mut out: Vec<(u64, &[u8])> = if count as usize > self.frames.len() {
            self.frames
                .iter()
                .filter(|(f, _)| (first..first + count).contains(f))
                .map(|(f, b)| ((f - first) * FRAME_BYTES, &b[..]))
                .collect()
        } else {
            (first..first + count)
                .filter_map(|f| {
                    self.frames
                        .get(&f)
                        .map(|b| ((f - first) * FRAME_BYTES, &b[..]))
                })
                .collect()
        };
        out.retain(|(_, b)| b.iter().any(|&x| x != 0));
        out.sort_by_key(|(o, _)| *o);
        out
    }

    pub fn resident_frames(&self) -> usize {
        self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_frame_round_trip() {
        let mut m = PhysMemory::new();
        let data: Vec<u8> = (0..10_000u32).map(|i| (i % 251) as u8).collect();
        m.write(4000, &data);
        assert_eq!(m.read(4000, data.len()), data);
        assert_eq!(m.read(0, 10), vec![0; 10]);
    }

    #[test]
    fn zero_and_populated() {
        let mut m = PhysMemory::new();
        m.write(FRAME_BYTES * 3 + 5, &[1, 2, 3]);
        m.write(FRAME_BYTES * 9, &[0; 8]);
        let pop = m.populated(0, FRAME_BYTES * 16);
        assert_eq!(pop.len(), 1);
        assert_eq!(pop[0].0, FRAME_BYTES * 3);
        m.zero(0, FRAME_BYTES * 16);
        assert_eq!(m.resident_frames(), 0);
    }
}
