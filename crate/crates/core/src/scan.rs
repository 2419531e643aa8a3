//! Sharded reductions over an [`IndexedDataset`].
//!
//! Each pass is a fold of records into an accumulator. Segments are folded
//! independently (in parallel when `shards > 1`) and merged strictly in
//! segment order. In deterministic mode the segments are fixed-size chunks
//! that do not depend on the shard count, so the merged result is
//! bit-identical for every shard count.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{IndexedDataset, Record, Segment};

/// A mergeable partial sum over records.
pub trait Accumulator: Send + Sized {
    fn push(&mut self, rec: &Record<'_>);
    fn merge(&mut self, other: Self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub shards: usize,
    pub deterministic: bool,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self {
            shards: 1,
            deterministic: false,
        }
    }
}

impl ScanPlan {
    pub fn sequential() -> Self {
        Self::default()
    }

    pub fn sharded(shards: usize) -> Self {
        Self {
            shards: shards.max(1),
            deterministic: false,
        }
    }
}

fn fold_segment<A: Accumulator>(ds: &IndexedDataset, seg: &Segment, make: &(impl Fn() -> A + Sync)) -> Result<A> {
    let mut acc = make();
    ds.scan_segment(seg, |r| acc.push(&r))?;
    Ok(acc)
}

/// One full pass of `ds` folded into `A`.
pub fn reduce<A, M>(ds: &IndexedDataset, plan: ScanPlan, make: M) -> Result<A>
where
    A: Accumulator,
    M: Fn() -> A + Sync,
{
    ds.count_pass();
    let shards = plan.shards.max(1);
    let segments = if plan.deterministic {
        ds.fixed_chunks()
    } else {
        ds.partition(shards)
    };
    let mut total: Option<A> = None;
    let mut absorb = |part: A| match total.as_mut() {
        None => total = Some(part),
        Some(t) => t.merge(part),
    };
    for wave in segments.chunks(shards) {
        if wave.len() == 1 {
            absorb(fold_segment(ds, &wave[0], &make)?);
            continue;
        }
        let parts: Vec<Result<A>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|seg| {
                    let make = &make;
                    s.spawn(move || fold_segment(ds, seg, make))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scan worker panicked"))
                .collect()
        });
        for part in parts {
            absorb(part?);
        }
    }
    Ok(total.unwrap_or_else(make))
}
