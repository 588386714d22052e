//! Byte-range bookkeeping for one datagram under reassembly.

use std::net::Ipv4Addr;

/// Identifies one datagram being reassembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FragmentKey {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: u8,
    pub identification: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Range stored (or already present with identical bytes).
    Accepted,
    /// Overlaps stored bytes with different content, or contradicts the
    /// known datagram length. Nothing was stored.
    Conflict,
}

/// Received intervals plus the bytes they cover.
#[derive(Debug, Default)]
pub struct Reassembly {
    buf: Vec<u8>,
    /// Sorted, disjoint, non-adjacent `[start, end)` ranges.
    intervals: Vec<(usize, usize)>,
    total: Option<usize>,
}

const MAX_DATAGRAM: usize = 65535 - 20;

impl Reassembly {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_len(&self) -> Option<usize> {
        self.total
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.total, Some(t) if self.intervals == [(0, t)] || (t == 0 && self.intervals.is_empty()))
    }

    /// Records `data` at byte `offset`. `last` is true for the fragment with
    /// MF clear, which fixes the datagram length.
    pub fn insert(&mut self, offset: usize, data: &[u8], last: bool) -> InsertOutcome {
        let end = offset + data.len();
        if end > MAX_DATAGRAM {
            return InsertOutcome::Conflict;
        }
        if last {
            if matches!(self.total, Some(t) if t != end) {
                return InsertOutcome::Conflict;
            }
            if self.intervals.last().is_some_and(|&(_, e)| e > end) {
                return InsertOutcome::Conflict;
            }
        } else if matches!(self.total, Some(t) if end > t) {
            return InsertOutcome::Conflict;
        }
        for &(s, e) in &self.intervals {
            let (lo, hi) = (s.max(offset), e.min(end));
            if lo < hi && self.buf[lo..hi] != data[lo - offset..hi - offset] {
                return InsertOutcome::Conflict;
            }
        }
        if last {
            self.total = Some(end);
        }
        if data.is_empty() {
            return InsertOutcome::Accepted;
        }
        if self.buf.len() < end {
            self.buf.resize(end, 0);
        }
        self.buf[offset..end].copy_from_slice(data);
        self.merge(offset, end);
        InsertOutcome::Accepted
    }

    fn merge(&mut self, mut start: usize, mut end: usize) {
        let mut out = Vec::with_capacity(self.intervals.len() + 1);
        let mut placed = false;
        for &(s, e) in &self.intervals {
            if e < start {
                out.push((s, e));
            } else if s > end {
                if !placed {
                    out.push((start, end));
                    placed = true;
                }
                out.push((s, e));
            } else {
                start = start.min(s);
                end = end.max(e);
            }
        }
        if !placed {
            out.push((start, end));
        }
        self.intervals = out;
    }

    /// The reassembled payload, once complete.
    pub fn take(self) -> Option<Vec<u8>> {
        if !self.is_complete() {
            return None;
        }
        let mut buf = self.buf;
        buf.truncate(self.total.unwrap_or(0));
        Some(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(data: &[u8], step: usize) -> Vec<(usize, Vec<u8>, bool)> {
        let mut out = Vec::new();
        let mut off = 0;
        while off < data.len() {
            let end = (off + step).min(data.len());
            out.push((off, data[off..end].to_vec(), end == data.len()));
            off = end;
        }
        out
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn every_order_of_four() {
        let data: Vec<u8> = (0..3000u32).map(|i| (i * 7 % 251) as u8).collect();
        let parts = pieces(&data, 800);
        assert_eq!(parts.len(), 4);
        let perms = permutations(4);
        assert_eq!(perms.len(), 24);
        for order in perms {
            let mut r = Reassembly::new();
            for (n, &i) in order.iter().enumerate() {
                let (off, d, last) = &parts[i];
                assert_eq!(r.insert(*off, d, *last), InsertOutcome::Accepted);
                assert_eq!(r.is_complete(), n == 3);
            }
            assert_eq!(r.take().unwrap(), data);
        }
    }

    #[test]
    fn duplicates_are_idempotent() {
        let mut r = Reassembly::new();
        r.insert(0, &[1; 16], false);
        r.insert(0, &[1; 16], false);
        r.insert(8, &[1; 8], false);
        assert_eq!(r.intervals(), &[(0, 16)]);
        r.insert(16, &[2; 4], true);
        assert_eq!(r.take().unwrap().len(), 20);
    }

    #[test]
    fn conflicts_are_rejected_without_effect() {
        let mut r = Reassembly::new();
        r.insert(0, &[1; 16], false);
        assert_eq!(r.insert(8, &[9; 16], false), InsertOutcome::Conflict);
        assert_eq!(r.intervals(), &[(0, 16)]);
        r.insert(16, &[2; 8], true);
        assert_eq!(r.insert(24, &[0; 8], false), InsertOutcome::Conflict);
        assert_eq!(r.insert(24, &[0; 8], true), InsertOutcome::Conflict);
        assert_eq!(r.insert(8, &[1; 4], true), InsertOutcome::Conflict);
        assert!(r.is_complete());
    }

    #[test]
    fn gaps_keep_it_incomplete() {
        let mut r = Reassembly::new();
        r.insert(0, &[0; 8], false);
        r.insert(16, &[0; 8], true);
        assert!(!r.is_complete());
        assert_eq!(r.intervals(), &[(0, 8), (16, 24)]);
        r.insert(8, &[0; 8], false);
        assert!(r.is_complete());
    }
}
