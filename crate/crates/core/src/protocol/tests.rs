use super::*;
use crate::kernel::Smoothness;
use crate::lowrank::{grad_hess_thetatilde, CrossPartials, PiecesCache, ResidualMode, ThetaTilde};
use crate::sync::compute_local;
use crate::test_support::{random_instance, Instance};
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stamped(tag: f64, iter: usize, step: StepLabel) -> StampedParams {
    let mut inst = random_instance(0, 1, 2, 2, 1, Smoothness::Half);
    inst.params.gamma[0] = tag;
    StampedParams {
        params: inst.params,
        iter,
        step,
    }
}

#[test]
fn buffer_append_then_replace_in_place() {
    let mut buf = WorkerBuffer::new();
    buf.push(stamped(1.0, 1, StepLabel::MuSigma));
    assert_eq!(buf.len(), 1);
    buf.push(stamped(2.0, 1, StepLabel::Gamma));
    assert_eq!(buf.labels(), vec![StepLabel::MuSigma, StepLabel::Gamma]);
    buf.push(stamped(3.0, 2, StepLabel::MuSigma));
    assert_eq!(buf.labels(), vec![StepLabel::MuSigma, StepLabel::Gamma]);
    let front = buf.pop_front().unwrap();
    assert_eq!((front.iter, front.params.gamma[0]), (2, 3.0));
    assert_eq!(buf.pop_front().unwrap().params.gamma[0], 2.0);
    assert!(buf.pop_front().is_none() && buf.is_empty());
}

#[test]
fn moving_average_examples() {
    let base = random_instance(1, 1, 2, 2, 1, Smoothness::Half).params;
    let with = |v: f64| {
        let mut p = base.clone();
        p.mu.fill(v);
        p.sigma = DMatrix::identity(2, 2) * v;
        p.gamma.fill(v);
        p.set_theta_tilde(ThetaTilde([v, v, v])).unwrap();
        p
    };
    let avg = moving_average(&[with(4.0), with(2.0)], 0.5).unwrap();
    for got in [avg.mu[0], avg.sigma[(0, 0)], avg.gamma[0], avg.theta_tilde().sigma2()] {
        assert!((got - 10.0 / 3.0).abs() < 1e-14, "{got}");
    }
    assert_eq!(moving_average(&[with(4.0)], 0.5).unwrap(), with(4.0));
    let c = moving_average(&[with(1.5), with(1.5), with(1.5)], 0.7).unwrap();
    assert!((c.mu[1] - 1.5).abs() < 1e-15 && (c.theta_tilde().beta() - 1.5).abs() < 1e-15);
    assert!(moving_average(&[], 0.5).is_err());
}

fn delta_theta(inst: &Instance, worker: usize, params: &ModelParams) -> LocalQuantity {
    compute_local(
        StepLabel::DeltaTheta,
        &inst.shards[worker],
        &inst.knots,
        params,
        ResidualMode::FullLocal,
        &mut PiecesCache::new(),
    )
    .unwrap()
}

#[test]
fn correction_with_zero_displacement_is_identity() {
    let inst = random_instance(2, 1, 12, 4, 2, Smoothness::ThreeHalves);
    let q = delta_theta(&inst, 0, &inst.params);
    let LocalQuantity::DeltaTheta { grad, .. } = &q else { unreachable!() };
    assert_eq!(corrected_gradient(&q, &inst.params, &inst.params).unwrap(), *grad);
    let not_theta = LocalQuantity::Gamma {
        xtrx: DMatrix::identity(1, 1),
        v: DVector::zeros(1),
    };
    assert!(corrected_gradient(&not_theta, &inst.params, &inst.params).is_err());
}

#[test]
fn correction_is_exact_for_a_quadratic() {
    // f(θ, μ, Σ) = ½θᵀAθ + θᵀBμ + Σ_a θ_a⟨S_a, Σ⟩, differentiated by hand.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 3;
    let mut r = || rng.random_range(-1.0..1.0);
    let l = Matrix3::from_fn(|_, _| r());
    let a = l * l.transpose();
    let b = DMatrix::from_fn(3, m, |_, _| r());
    let s: [DMatrix<f64>; 3] = std::array::from_fn(|_| {
        let x = DMatrix::from_fn(m, m, |_, _| r());
        &x + x.transpose()
    });
    let grad_at = |p: &ModelParams| {
        let th = p.theta_tilde().to_vector();
        let mut g = a * th + &b * &p.mu;
        for k in 0..3 {
            g[k] += s[k].component_mul(&p.sigma).sum();
        }
        g
    };
    let base = random_instance(3, 1, 2, m, 1, Smoothness::Half).params;
    let mut rec = base.clone();
    rec.mu += DVector::from_element(m, 0.4);
    rec.sigma += DMatrix::identity(m, m) * 0.3;
    rec.set_theta_tilde(ThetaTilde([2.0, 0.7, 0.25])).unwrap();
    let q = LocalQuantity::DeltaTheta {
        grad: grad_at(&base),
        hess: a,
        cross: CrossPartials { mu: b.clone(), sigma: s.clone() },
    };
    let got = corrected_gradient(&q, &base, &rec).unwrap();
    assert!((got - grad_at(&rec)).norm() < 1e-12 * grad_at(&rec).norm().max(1.0));
}

#[test]
fn correction_error_is_second_order() {
    let inst = random_instance(4, 1, 15, 4, 2, Smoothness::FiveHalves);
    let p0 = inst.params.clone();
    let q = delta_theta(&inst, 0, &p0);
    let th = p0.theta_tilde().0;
    let dir_mu = DVector::from_fn(4, |i, _| 0.5 - 0.2 * i as f64);
    let dir_sigma = DMatrix::from_fn(4, 4, |i, j| 0.1 / (1.0 + (i + j) as f64));
    let err = |h: f64| {
        let mut rec = p0.clone();
        rec.mu += &dir_mu * h;
        rec.sigma += &dir_sigma * h;
        rec.set_theta_tilde(ThetaTilde([th[0] * (1.0 + h), th[1] * (1.0 - h), th[2] * (1.0 + 0.5 * h)]))
            .unwrap();
        let (truth, _) = grad_hess_thetatilde(&inst.shards[0], &inst.knots, &rec, ResidualMode::FullLocal).unwrap();
        (corrected_gradient(&q, &p0, &rec).unwrap() - truth).norm()
    };
    let (e1, e2, e3) = (err(0.02), err(0.01), err(0.005));
    for ratio in [e1 / e2, e2 / e3] {
        assert!((3.5..4.5).contains(&ratio), "errors {e1:e} {e2:e} {e3:e}");
    }
}

fn small_server(j: usize, cfg: AsyncConfig) -> (Instance, Server) {
    let inst = random_instance(5, j, 8, 3, 1, Smoothness::Half);
    let server = Server::new(inst.params.clone(), j, inst.knots.clone(), cfg).unwrap();
    (inst, server)
}

fn quantity(inst: &Instance, worker: usize, iter: usize, step: StepLabel) -> StampedQuantity {
    let p = StampedParams {
        params: inst.params.clone(),
        iter,
        step,
    };
    worker_compute(&inst.shards[worker], &inst.knots, &p, ResidualMode::FullLocal, &mut PiecesCache::new())
}

#[test]
fn worker_stamps_its_reply() {
    let inst = random_instance(6, 3, 6, 2, 1, Smoothness::Half);
    let q = quantity(&inst, 2, 7, StepLabel::Gamma);
    assert_eq!((q.iter, q.step, q.worker), (7, StepLabel::Gamma, 2));
    assert_eq!(q.payload.as_ref().unwrap().step(), StepLabel::Gamma);
}

#[test]
fn latest_receipt_wins_and_counts() {
    let (inst, mut s) = small_server(2, AsyncConfig::with_threshold(2, 2));
    let _ = s.initial_broadcast();
    let mut other = inst.params.clone();
    other.gamma[0] += 1.0;
    let q_old = quantity(&inst, 0, 0, StepLabel::MuSigma);
    let q_new = worker_compute(
        &inst.shards[0],
        &inst.knots,
        &StampedParams { params: other, iter: 0, step: StepLabel::MuSigma },
        ResidualMode::FullLocal,
        &mut PiecesCache::new(),
    );
    s.on_receive(q_old).unwrap();
    s.on_receive(q_new.clone()).unwrap();
    assert_eq!(s.latest(StepLabel::MuSigma, 0), Some(&q_new));
    assert_eq!(s.counter(StepLabel::MuSigma), 2);
    // Two receipts from one worker meet the count but not the coverage.
    assert!(s.try_step().unwrap().is_none());
    s.on_receive(quantity(&inst, 1, 0, StepLabel::MuSigma)).unwrap();
    assert!(s.latest(StepLabel::MuSigma, 1).is_some());
    let (b, rec) = s.try_step().unwrap().unwrap();
    assert_eq!((b.iter, b.step), (0, StepLabel::Gamma));
    assert_eq!(rec.staleness, vec![0, 0]);
    assert_eq!(s.counter(StepLabel::MuSigma), 0);
}

#[test]
fn poison_counts_but_is_not_stored() {
    let (inst, mut s) = small_server(2, AsyncConfig::with_threshold(1, 2));
    s.on_receive(StampedQuantity {
        payload: Err("boom".into()),
        iter: 0,
        step: StepLabel::MuSigma,
        worker: 1,
    })
    .unwrap();
    assert_eq!(s.counter(StepLabel::MuSigma), 1);
    assert_eq!(s.poison_count(), 1);
    assert!(s.latest(StepLabel::MuSigma, 1).is_none());
    assert!(s.try_step().unwrap().is_none());
    let bad_worker = StampedQuantity { worker: 5, ..quantity(&inst, 0, 0, StepLabel::MuSigma) };
    assert!(s.on_receive(bad_worker).is_err());
    let mislabeled = StampedQuantity { step: StepLabel::Gamma, ..quantity(&inst, 0, 0, StepLabel::MuSigma) };
    assert!(s.on_receive(mislabeled).is_err());
}

#[test]
fn below_threshold_leaves_state_unchanged() {
    let (inst, mut s) = small_server(3, AsyncConfig::with_threshold(3, 3));
    let before = s.params().clone();
    for w in 0..2 {
        s.on_receive(quantity(&inst, w, 0, StepLabel::MuSigma)).unwrap();
    }
    assert!(s.try_step().unwrap().is_none());
    assert_eq!(s.params(), &before);
    assert_eq!((s.iter(), s.pending_step(), s.counter(StepLabel::MuSigma)), (0, StepLabel::MuSigma, 2));
}

#[test]
fn threshold_one_steps_on_a_single_fresh_quantity() {
    let mut cfg = AsyncConfig::with_threshold(1, 2);
    cfg.strategies = Strategies::NONE;
    let (inst, mut s) = small_server(2, cfg);
    for w in 0..2 {
        s.on_receive(quantity(&inst, w, 0, StepLabel::MuSigma)).unwrap();
    }
    assert!(s.try_step().unwrap().is_some());
    for w in 0..2 {
        s.on_receive(quantity(&inst, w, 0, StepLabel::Gamma)).unwrap();
    }
    assert!(s.try_step().unwrap().is_some());
    assert!(s.try_step().unwrap().is_none());
    // Later rounds: one fresh quantity suffices.
    s.on_receive(quantity(&inst, 0, 0, StepLabel::MuSigma)).unwrap();
    assert!(s.try_step().unwrap().is_none(), "pending step is delta-theta");
    s.on_receive(quantity(&inst, 0, 0, StepLabel::DeltaTheta)).unwrap();
    assert!(s.try_step().unwrap().is_none(), "worker 1 never reported delta-theta");
    s.on_receive(quantity(&inst, 1, 0, StepLabel::DeltaTheta)).unwrap();
    let (b, _) = s.try_step().unwrap().unwrap();
    assert_eq!((b.iter, b.step), (1, StepLabel::MuSigma));
    assert!(s.try_step().unwrap().is_some(), "the stored mu-sigma receipt counts");
}

#[test]
fn staleness_bound_blocks_aggregation() {
    let mut cfg = AsyncConfig::with_threshold(1, 2);
    cfg.strategies = Strategies::NONE;
    cfg.tau_max = 0;
    let (inst, mut s) = small_server(2, cfg);
    for step in StepLabel::ALL {
        for w in 0..2 {
            s.on_receive(quantity(&inst, w, 0, step)).unwrap();
        }
        s.try_step().unwrap().unwrap();
    }
    assert_eq!(s.iter(), 1);
    s.on_receive(quantity(&inst, 0, 1, StepLabel::MuSigma)).unwrap();
    assert!(s.blocked_by_staleness());
    assert!(s.try_step().unwrap().is_none());
    s.on_receive(quantity(&inst, 1, 1, StepLabel::MuSigma)).unwrap();
    assert!(!s.blocked_by_staleness());
    assert!(s.try_step().unwrap().is_some());
}

#[test]
fn history_lookup_reports_missing_stamps() {
    let (_, mut s) = small_server(1, AsyncConfig::with_threshold(1, 1));
    let b = s.initial_broadcast();
    assert_eq!(s.lookup(0, StepLabel::MuSigma).unwrap(), &b.params);
    assert!(s.lookup(3, StepLabel::MuSigma).is_err());
    assert_eq!(AsyncConfig::with_threshold(1, 1).history_len(), 83);
}

#[test]
fn config_validation() {
    assert!(AsyncConfig::with_threshold(0, 3).validate(3).is_err());
    assert!(AsyncConfig::with_threshold(4, 3).validate(3).is_err());
    let mut c = AsyncConfig::with_threshold(1, 3);
    c.omega = 1.0;
    assert!(c.validate(3).is_err());
    let c = AsyncConfig::with_threshold(2, 4);
    assert_eq!(c.step_size.at(0), 0.25);
    assert!(c.validate(4).is_ok());
}

#[test]
fn step_labels_cycle_and_round_trip() {
    assert_eq!(StepLabel::DeltaTheta.next(), StepLabel::MuSigma);
    for s in StepLabel::ALL {
        assert_eq!(StepLabel::from_u8(s.as_u8()).unwrap(), s);
        assert_eq!(s.to_string().parse::<StepLabel>().unwrap(), s);
    }
    assert!(StepLabel::from_u8(3).is_err());
}
