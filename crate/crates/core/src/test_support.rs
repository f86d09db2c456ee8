use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernel::{KernelParams, Location, NoisePrecision, Smoothness};
use crate::lowrank::{KnotSet, ModelParams, WorkerShard};

pub struct Instance {
    pub shards: Vec<WorkerShard>,
    pub knots: KnotSet,
    pub params: ModelParams,
}

pub fn random_locations(rng: &mut ChaCha8Rng, n: usize) -> Vec<Location> {
    (0..n).map(|_| Location([rng.random::<f64>(), rng.random::<f64>()])).collect()
}

/// Small random instance with arbitrary (not fitted) parameters.
pub fn random_instance(seed: u64, j: usize, n: usize, m: usize, p: usize, nu: Smoothness) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shards = (0..j)
        .map(|id| {
            let locs = random_locations(&mut rng, n);
            let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
            WorkerShard::new(id, locs, z, x).unwrap()
        })
        .collect();
    let knots = KnotSet::new(random_locations(&mut rng, m)).unwrap();
    let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.3..0.3));
    let sigma = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
    let params = ModelParams {
        mu: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        sigma,
        gamma: DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)),
        delta: NoisePrecision::new(rng.random_range(0.5..4.0)).unwrap(),
        kernel: KernelParams::new(nu, rng.random_range(0.5..2.0), rng.random_range(0.08..0.5)).unwrap(),
    };
    Instance { shards, knots, params }
}
