//! Real-thread transport: one thread per worker exchanging encoded frames
//! with the server over channels. Timing is whatever the host gives, so
//! runs are not reproducible; this exists to exercise the wire format end
//! to end.

use std::io::Cursor;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use fedgp_core::kernel::Smoothness;
use fedgp_core::lowrank::{KnotSet, ModelParams, ResidualMode, WorkerShard};
use fedgp_core::protocol::wire::{decode, encode_params, encode_quantity, encode_shutdown, read_frame, Message};
use fedgp_core::protocol::{AsyncConfig, Server, Worker};
use fedgp_core::{Error, Result};

/// Outcome of a threaded run.
#[derive(Clone, Debug)]
pub struct ThreadedRun {
    pub params: ModelParams,
    pub aggregations: usize,
    pub poison: usize,
}

fn decode_frame(bytes: &[u8], m: usize, p: usize, nu: Smoothness) -> Result<Message> {
    let (h, payload) =
        read_frame(&mut Cursor::new(bytes))?.ok_or_else(|| Error::Wire("empty frame".into()))?;
    decode(&h, &payload, m, p, nu)
}

fn worker_loop(
    mut worker: Worker,
    knots: &KnotSet,
    mode: ResidualMode,
    dims: (usize, usize, Smoothness),
    rx: Receiver<Vec<u8>>,
    tx: Sender<Vec<u8>>,
) -> Result<()> {
    loop {
        // Block only when idle; otherwise drain whatever has arrived.
        let next = if worker.buffer.is_empty() {
            match rx.recv() {
                Ok(b) => Some(b),
                Err(_) => return Ok(()),
            }
        } else {
            rx.try_recv().ok()
        };
        if let Some(bytes) = next {
            match decode_frame(&bytes, dims.0, dims.1, dims.2)? {
                Message::Params(p) => worker.receive(p),
                Message::Shutdown => return Ok(()),
                Message::Quantity(_) => return Err(Error::Protocol("worker received a quantity frame".into())),
            }
            continue;
        }
        let job = worker.next_job().expect("buffer checked non-empty");
        let q = worker.compute(&job, knots, mode);
        if tx.send(encode_quantity(&q)?).is_err() {
            return Ok(());
        }
    }
}

/// Runs the asynchronous protocol on threads until the server completes
/// `max_iters` iterations. `idle_timeout` bounds the wait for any single
/// message; exceeding it is reported as a deadlock.
pub fn run_threaded(
    shards: &[WorkerShard],
    knots: &KnotSet,
    mode: ResidualMode,
    cfg: &AsyncConfig,
    init: &ModelParams,
    max_iters: usize,
    idle_timeout: Duration,
) -> Result<ThreadedRun> {
    let j = shards.len();
    let dims = (init.m(), init.p(), init.kernel.nu);
    let mut server = Server::new(init.clone(), j, knots.clone(), *cfg)?;
    let (up_tx, up_rx) = channel::<Vec<u8>>();
    thread::scope(|scope| {
        let mut down = Vec::with_capacity(j);
        let mut handles = Vec::with_capacity(j);
        for shard in shards {
            let (tx, rx) = channel::<Vec<u8>>();
            down.push(tx);
            let up = up_tx.clone();
            let worker = Worker::new(shard.clone());
            handles.push(scope.spawn(move || worker_loop(worker, knots, mode, dims, rx, up)));
        }
        drop(up_tx);
        let send_all = |down: &[Sender<Vec<u8>>], bytes: &[u8]| {
            for tx in down {
                // A worker that already exited reports its own error on join.
                let _ = tx.send(bytes.to_vec());
            }
        };
        let outcome = (|| {
            send_all(&down, &encode_params(&server.initial_broadcast())?);
            let mut aggregations = 0;
            while server.iter() < max_iters {
                let bytes = match up_rx.recv_timeout(idle_timeout) {
                    Ok(b) => b,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(Error::Protocol(format!(
                            "no message for {idle_timeout:?}; server at iteration {} waiting for {}",
                            server.iter(),
                            server.pending_step()
                        )))
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(Error::Protocol("every worker hung up".into()))
                    }
                };
                match decode_frame(&bytes, dims.0, dims.1, dims.2)? {
                    Message::Quantity(q) => server.on_receive(q)?,
                    _ => return Err(Error::Protocol("server received a non-quantity frame".into())),
                }
                while server.iter() < max_iters {
                    let Some((b, _)) = server.try_step()? else { break };
                    aggregations += 1;
                    send_all(&down, &encode_params(&b)?);
                }
            }
            Ok(aggregations)
        })();
        send_all(&down, &encode_shutdown());
        drop(down);
        for h in handles {
            h.join().map_err(|_| Error::Protocol("worker thread panicked".into()))??;
        }
        Ok(ThreadedRun {
            params: server.params().clone(),
            aggregations: outcome?,
            poison: server.poison_count(),
        })
    })
}
