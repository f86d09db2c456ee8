use super::{StampedParams, StampedQuantity, WorkerBuffer};
use crate::lowrank::{KnotSet, PiecesCache, ResidualMode, WorkerShard};
use crate::sync::compute_local;

/// `L_j(p)` stamped with `p`'s iteration and label; numerical failures
/// become poison messages.
pub fn worker_compute(
    shard: &WorkerShard,
    knots: &KnotSet,
    p: &StampedParams,
    mode: ResidualMode,
    cache: &mut PiecesCache,
) -> StampedQuantity {
    let payload = compute_local(p.step, shard, knots, &p.params, mode, cache).map_err(|e| {
        log::warn!("worker {} failed on ({}, {}): {e}", shard.id, p.iter, p.step);
        e.to_string()
    });
    StampedQuantity {
        payload,
        iter: p.iter,
        step: p.step,
        worker: shard.id,
    }
}

/// A worker's data, pending parameters and factorization cache.
#[derive(Clone, Debug)]
pub struct Worker {
    pub shard: WorkerShard,
    pub buffer: WorkerBuffer,
    cache: PiecesCache,
}

impl Worker {
    pub fn new(shard: WorkerShard) -> Self {
        Worker {
            shard,
            buffer: WorkerBuffer::new(),
            cache: PiecesCache::new(),
        }
    }

    pub fn id(&self) -> usize {
        self.shard.id
    }

    pub fn receive(&mut self, p: StampedParams) {
        self.buffer.push(p);
    }

    pub fn next_job(&mut self) -> Option<StampedParams> {
        self.buffer.pop_front()
    }

    pub fn compute(&mut self, p: &StampedParams, knots: &KnotSet, mode: ResidualMode) -> StampedQuantity {
        worker_compute(&self.shard, knots, p, mode, &mut self.cache)
    }
}
