use rand::seq::SliceRandom;

use super::config::batch_split;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Endless stream over `len` records: each epoch is a fresh seeded
/// permutation. Position `k` maps to a record index with no mutable state,
/// so any window of the stream can be recomputed after a restart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataStream {
    pub len: usize,
    pub seed: u64,
}

impl DataStream {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { len, seed }
    }

    fn epoch(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng_for(self.seed, &[0xE90C, epoch]));
        perm
    }

    /// Record indices at stream positions `start..start + count`.
    pub fn window(&self, start: usize, count: usize) -> Vec<usize> {
        if self.len == 0 || count == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in start..start + count {
            let e = k / self.len;
            if cached.as_ref().map_or(true, |(ce, _)| *ce != e) {
                cached = Some((e, self.epoch(e as u64)));
            }
            out.push(cached.as_ref().expect("epoch cached").1[k % self.len]);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Minibatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Indices for batch number `iteration`: `B - round(fB)` source records
/// and `round(fB)` target records, rounding half up.
pub fn compose_batch(
    source: &DataStream,
    target: &DataStream,
    total_batch: usize,
    target_fraction: f64,
    iteration: usize,
) -> Result<Minibatch> {
    let (n_src, n_tgt) = batch_split(total_batch, target_fraction);
    if n_tgt > 0 && target.len == 0 {
        return Err(Error::InvalidData("target fraction is positive but the target dataset is empty".into()));
    }
    if n_src > 0 && source.len == 0 {
        return Err(Error::InvalidData("source dataset is empty".into()));
    }
    Ok(Minibatch {
        source: source.window(iteration * n_src, n_src),
        target: target.window(iteration * n_tgt, n_tgt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_rounding_rule() {
        let s = DataStream::new(10, 1);
        let t = DataStream::new(7, 2);
        let b = compose_batch(&s, &t, 48, 0.5, 0).unwrap();
        assert_eq!((b.source.len(), b.target.len()), (24, 24));
        let b = compose_batch(&s, &t, 16, 0.3, 3).unwrap();
        assert_eq!((b.source.len(), b.target.len()), (11, 5));
        let b = compose_batch(&s, &t, 16, 0.0, 0).unwrap();
        assert_eq!((b.source.len(), b.target.len()), (16, 0));
    }

    #[test]
    fn empty_target_errors() {
        let s = DataStream::new(10, 1);
        let t = DataStream::new(0, 2);
        assert!(compose_batch(&s, &t, 8, 0.5, 0).is_err());
        assert!(compose_batch(&s, &t, 8, 0.0, 0).is_ok());
    }

    #[test]
    fn each_epoch_visits_every_record_once() {
        let s = DataStream::new(9, 4);
        for e in 0..3 {
            let mut w = s.window(e * 9, 9);
            w.sort();
            assert_eq!(w, (0..9).collect::<Vec<_>>());
        }
        assert_eq!(s.window(5, 10), s.window(5, 10));
    }
}
