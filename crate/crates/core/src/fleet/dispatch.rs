use std::collections::{HashMap, HashSet, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::wire::{read_frame, write_frame, Message, PROTOCOL};
use super::{evaluate_local, BlobStore, EvalJob, EvalResult, EvalStatus, DEFAULT_JOB_TIMEOUT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("no reachable worker and local fallback is disabled")]
    NoWorkers,
    #[error("duplicate job id {0}")]
    DuplicateJobId(u64),
}

#[derive(Debug, Clone)]
pub struct DispatchOptions {
    pub workers: Vec<SocketAddr>,
    pub local_fallback: bool,
    pub local_parallelism: usize,
    /// Per-job limit enforced by workers and used for local fallback.
    pub job_timeout: Duration,
    /// Extra time the master waits for a result beyond the job limit before
    /// declaring the worker dead.
    pub grace: Duration,
    pub connect_timeout: Duration,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self {
            workers: Vec::new(),
            local_fallback: true,
            local_parallelism: 1,
            job_timeout: DEFAULT_JOB_TIMEOUT,
            grace: Duration::from_secs(30),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DispatchReport {
    /// One result per job, in job order.
    pub results: Vec<EvalResult>,
    /// Remote sends per job; 2 means the job was retried once.
    pub sends: Vec<u32>,
    pub duplicates_ignored: usize,
    /// Workers that failed or were unreachable.
    pub failed_workers: Vec<SocketAddr>,
    /// Jobs evaluated by the local fallback.
    pub local_jobs: usize,
}

impl DispatchReport {
    pub fn retries(&self) -> usize {
        self.sends.iter().filter(|&&s| s > 1).count()
    }
}

struct State {
    queues: Vec<VecDeque<usize>>,
    alive: Vec<bool>,
    results: Vec<Option<EvalResult>>,
    sends: Vec<u32>,
    tried: Vec<Vec<usize>>,
    local: Vec<usize>,
    remaining: usize,
    duplicates: usize,
}

impl State {
    fn settle(&mut self, j: usize, r: EvalResult) {
        if self.results[j].is_none() {
            self.results[j] = Some(r);
            self.remaining -= 1;
        } else {
            self.duplicates += 1;
        }
    }

    /// Next live worker after `from`, skipping `avoid`.
    fn pick(&self, from: usize, avoid: &[usize]) -> Option<usize> {
        let n = self.alive.len();
        (1..=n)
            .map(|k| (from + k) % n)
            .find(|&w| self.alive[w] && !avoid.contains(&w))
    }

    /// Marks `w` dead and moves its work elsewhere. `inflight` jobs count
    /// as attempted; queued ones do not.
    fn fail(&mut self, w: usize, inflight: &[usize], ids: &[u64], fallback: bool) {
        self.alive[w] = false;
        let queued: Vec<usize> = self.queues[w].drain(..).collect();
        for &j in inflight {
            if self.results[j].is_some() {
                continue;
            }
            if self.sends[j] >= 2 {
                self.settle(
                    j,
                    EvalResult::failed(ids[j], EvalStatus::Error, "worker failed after retry"),
                );
                continue;
            }
            match self.pick(w, &self.tried[j].clone()) {
                Some(o) => self.queues[o].push_back(j),
                None if fallback => self.local.push(j),
                None => self.settle(
                    j,
                    EvalResult::failed(ids[j], EvalStatus::Error, "no worker left for retry"),
                ),
            }
        }
        for j in queued {
            match self.pick(w, &[]) {
                Some(o) => self.queues[o].push_back(j),
                None if fallback => self.local.push(j),
                None => self.settle(
                    j,
                    EvalResult::failed(ids[j], EvalStatus::Error, "no worker available"),
                ),
            }
        }
    }
}

struct Conn {
    stream: TcpStream,
    slots: usize,
}

fn connect(addr: SocketAddr, opts: &DispatchOptions) -> io::Result<Conn> {
    let mut stream = TcpStream::connect_timeout(&addr, opts.connect_timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(opts.connect_timeout))?;
    write_frame(&mut stream, &Message::hello(0))?;
    let slots = match read_frame(&mut stream)? {
        Some(Message::Hello { protocol, slots }) if protocol == PROTOCOL => slots.max(1),
        Some(Message::Bye { error }) => {
            return Err(io::Error::other(error.unwrap_or_else(|| "rejected".into())))
        }
        _ => return Err(io::Error::other("bad handshake")),
    };
    stream.set_read_timeout(Some(opts.job_timeout + opts.grace))?;
    Ok(Conn { stream, slots })
}

/// Runs `jobs` on remote workers with round-robin assignment, one retry on
/// a different worker after a worker failure, and optional local fallback.
/// Results are merged by job index; late duplicates are ignored.
pub fn dispatch(
    jobs: &[EvalJob],
    blobs: &BlobStore,
    opts: &DispatchOptions,
) -> Result<DispatchReport, DispatchError> {
    let mut index = HashMap::new();
    for (i, j) in jobs.iter().enumerate() {
        if index.insert(j.job_id, i).is_some() {
            return Err(DispatchError::DuplicateJobId(j.job_id));
        }
    }
    let ids: Vec<u64> = jobs.iter().map(|j| j.job_id).collect();
    let mut report = DispatchReport {
        sends: vec![0; jobs.len()],
        ..Default::default()
    };
    if jobs.is_empty() {
        return Ok(report);
    }

    let conns: Vec<Option<Conn>> = opts
        .workers
        .iter()
        .map(|&a| match connect(a, opts) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("worker {a} unavailable: {e}");
                None
            }
        })
        .collect();
    let alive: Vec<bool> = conns.iter().map(Option::is_some).collect();
    let live: Vec<usize> = (0..conns.len()).filter(|&w| alive[w]).collect();
    if live.is_empty() && !opts.local_fallback {
        return Err(DispatchError::NoWorkers);
    }

    let mut queues = vec![VecDeque::new(); conns.len()];
    let mut local = Vec::new();
    for j in 0..jobs.len() {
        if live.is_empty() {
            local.push(j);
        } else {
            queues[live[j % live.len()]].push_back(j);
        }
    }
    let state = Mutex::new(State {
        queues,
        alive,
        results: vec![None; jobs.len()],
        sends: vec![0; jobs.len()],
        tried: vec![Vec::new(); jobs.len()],
        local,
        remaining: jobs.len(),
        duplicates: 0,
    });
    let cond = Condvar::new();

    thread::scope(|scope| {
        for (w, conn) in conns.into_iter().enumerate() {
            let Some(conn) = conn else { continue };
            let (state, cond, index, ids) = (&state, &cond, &index, &ids);
            scope.spawn(move || {
                drive(w, conn, jobs, blobs, opts, state, cond, index, ids);
            });
        }
    });

    let mut st = state.into_inner().expect("dispatch state");
    report.failed_workers = opts
        .workers
        .iter()
        .zip(&st.alive)
        .filter(|(_, &a)| !a)
        .map(|(&a, _)| a)
        .collect();
    if !st.local.is_empty() {
        st.local.sort_unstable();
        st.local.dedup();
        let pending: Vec<usize> = st.local.iter().copied().filter(|&j| st.results[j].is_none()).collect();
        let batch: Vec<EvalJob> = pending.iter().map(|&j| jobs[j].clone()).collect();
        let out = evaluate_local(&batch, blobs, opts.local_parallelism, Some(opts.job_timeout));
        report.local_jobs = pending.len();
        for (j, r) in pending.into_iter().zip(out) {
            st.settle(j, r);
        }
    }
    report.duplicates_ignored = st.duplicates;
    report.sends = st.sends;
    report.results = st
        .results
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            r.unwrap_or_else(|| EvalResult::failed(ids[j], EvalStatus::Error, "not evaluated"))
        })
        .collect();
    Ok(report)
}

/// Master-side loop for one worker connection.
#[allow(clippy::too_many_arguments)]
fn drive(
    w: usize,
    conn: Conn,
    jobs: &[EvalJob],
    blobs: &BlobStore,
    opts: &DispatchOptions,
    state: &Mutex<State>,
    cond: &Condvar,
    index: &HashMap<u64, usize>,
    ids: &[u64],
) {
    let Conn { mut stream, slots } = conn;
    let mut sent_blobs: HashSet<String> = HashSet::new();
    let mut inflight: Vec<usize> = Vec::new();
    let fail = |inflight: &[usize], why: &str| {
        log::warn!("worker {w} failed: {why}");
        let mut st = state.lock().expect("dispatch state");
        st.fail(w, inflight, ids, opts.local_fallback);
        cond.notify_all();
    };

    loop {
        let batch: Vec<usize> = {
            let mut st = state.lock().expect("dispatch state");
            loop {
                let mut batch = Vec::new();
                while inflight.len() + batch.len() < slots {
                    match st.queues[w].pop_front() {
                        Some(j) => {
                            st.sends[j] += 1;
                            st.tried[j].push(w);
                            batch.push(j);
                        }
                        None => break,
                    }
                }
                if !batch.is_empty() || !inflight.is_empty() {
                    break batch;
                }
                if st.remaining == 0 || !st.alive.iter().any(|&a| a) {
                    drop(st);
                    let _ = write_frame(&mut stream, &Message::Bye { error: None });
                    return;
                }
                st = cond
                    .wait_timeout(st, Duration::from_millis(50))
                    .expect("dispatch state")
                    .0;
            }
        };

        for &j in &batch {
            let job = &jobs[j];
            let mut missing = None;
            for d in job.task.digests() {
                if sent_blobs.contains(d) {
                    continue;
                }
                let Some(img) = blobs.get(d) else {
                    missing = Some(d.clone());
                    break;
                };
                if let Err(e) = write_frame(&mut stream, &Message::blob(img)) {
                    inflight.extend(&batch);
                    return fail(&inflight, &e.to_string());
                }
                sent_blobs.insert(d.clone());
            }
            if let Some(d) = missing {
                let mut st = state.lock().expect("dispatch state");
                st.settle(
                    j,
                    EvalResult::failed(job.job_id, EvalStatus::Error, format!("blob missing: {d}")),
                );
                cond.notify_all();
                continue;
            }
            if let Err(e) = write_frame(&mut stream, &Message::Job { job: job.clone() }) {
                inflight.extend(&batch);
                return fail(&inflight, &e.to_string());
            }
            inflight.push(j);
        }
        if inflight.is_empty() {
            continue;
        }

        match read_frame(&mut stream) {
            Ok(Some(Message::Result { result })) => {
                let Some(&j) = index.get(&result.job_id) else {
                    log::warn!("worker {w} returned unknown job {}", result.job_id);
                    continue;
                };
                inflight.retain(|&x| x != j);
                let mut st = state.lock().expect("dispatch state");
                st.settle(j, result);
                cond.notify_all();
            }
            Ok(Some(Message::Bye { error })) => {
                return fail(&inflight, error.as_deref().unwrap_or("worker said bye"))
            }
            Ok(Some(_)) => return fail(&inflight, "unexpected frame"),
            Ok(None) => return fail(&inflight, "connection closed"),
            Err(e) => return fail(&inflight, &e.to_string()),
        }
    }
}
