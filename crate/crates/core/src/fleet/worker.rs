use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{open_blob, read_frame, write_frame, Message, PROTOCOL};
use super::{evaluate_job, BlobStore, EvalJob, DEFAULT_JOB_TIMEOUT};

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    /// Jobs evaluated concurrently per connection.
    pub slots: usize,
    pub job_timeout: Duration,
    /// Fault injection: crash (drop every connection, stop listening) when
    /// asked to run more than this many jobs.
    pub fail_after_jobs: Option<usize>,
    /// Fault injection: send every result frame twice.
    pub duplicate_results: bool,
    /// Stop listening after this many connections and exit once they close.
    pub max_connections: Option<usize>,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        Self {
            slots: 2,
            job_timeout: DEFAULT_JOB_TIMEOUT,
            fail_after_jobs: None,
            duplicate_results: false,
            max_connections: None,
        }
    }
}

struct Shared {
    opts: WorkerOptions,
    addr: SocketAddr,
    blobs: RwLock<BlobStore>,
    stop: AtomicBool,
    jobs_seen: AtomicUsize,
    conns: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn kill(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for c in self.conns.lock().expect("conn list").drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        // unblock accept()
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
    }
}

/// A worker serving the evaluation protocol on a background thread.
pub struct Worker {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl Worker {
    pub fn spawn(addr: impl ToSocketAddrs, opts: WorkerOptions) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let shared = Arc::new(Shared {
            addr: listener.local_addr()?,
            opts,
            blobs: RwLock::new(BlobStore::new()),
            stop: AtomicBool::new(false),
            jobs_seen: AtomicUsize::new(0),
            conns: Mutex::new(Vec::new()),
        });
        let s = Arc::clone(&shared);
        let thread = thread::spawn(move || accept_loop(listener, s));
        Ok(Self {
            shared,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.addr
    }

    /// Jobs received so far, across connections.
    pub fn jobs_seen(&self) -> usize {
        self.shared.jobs_seen.load(Ordering::SeqCst)
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.load(Ordering::SeqCst)
    }

    /// Stops abruptly: closes the listener and every open connection.
    pub fn kill(&self) {
        self.shared.kill();
    }

    /// Blocks until the worker stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.shared.kill();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves the protocol on `addr` until the process ends.
pub fn serve_worker(addr: impl ToSocketAddrs, opts: WorkerOptions) -> io::Result<()> {
    let w = Worker::spawn(addr, opts)?;
    log::info!("worker listening on {}", w.local_addr());
    w.join();
    Ok(())
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut handlers = Vec::new();
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if let Ok(c) = stream.try_clone() {
            shared.conns.lock().expect("conn list").push(c);
        }
        let s = Arc::clone(&shared);
        handlers.push(thread::spawn(move || {
            if let Err(e) = handle(stream, &s) {
                log::debug!("connection ended: {e}");
            }
        }));
        if shared.opts.max_connections.is_some_and(|m| handlers.len() >= m) {
            break;
        }
    }
    for h in handlers {
        let _ = h.join();
    }
}

fn send(writer: &Mutex<TcpStream>, msg: &Message) -> io::Result<()> {
    write_frame(&mut *writer.lock().expect("writer"), msg)
}

fn reject(writer: &Mutex<TcpStream>, error: String) -> io::Result<()> {
    log::warn!("closing connection: {error}");
    let r = send(writer, &Message::Bye { error: Some(error) });
    let _ = writer.lock().expect("writer").shutdown(Shutdown::Both);
    r
}

fn handle(stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));

    match read_frame(&mut reader) {
        Ok(Some(Message::Hello { protocol, .. })) if protocol == PROTOCOL => {}
        Ok(Some(Message::Hello { protocol, .. })) => {
            return reject(
                &writer,
                format!("protocol version mismatch: expected {PROTOCOL}, got {protocol}"),
            )
        }
        Ok(Some(_)) => return reject(&writer, "expected hello".into()),
        Ok(None) => return Ok(()),
        Err(e) if e.kind() == io::ErrorKind::InvalidData => {
            return reject(&writer, format!("malformed frame: {e}"))
        }
        Err(e) => return Err(e),
    }
    let slots = shared.opts.slots.max(1);
    send(&writer, &Message::hello(slots))?;

    let (tx, rx) = mpsc::channel::<EvalJob>();
    let rx = Arc::new(Mutex::new(rx));
    let runners: Vec<_> = (0..slots)
        .map(|_| {
            let rx = Arc::clone(&rx);
            let writer = Arc::clone(&writer);
            let shared = Arc::clone(shared);
            thread::spawn(move || loop {
                let job = match rx.lock().expect("job queue").recv() {
                    Ok(j) => j,
                    Err(_) => break,
                };
                let blobs = shared.blobs.read().expect("blobs").clone();
                let result = evaluate_job(&job, &blobs, Some(shared.opts.job_timeout));
                if shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                let msg = Message::Result { result };
                let copies = if shared.opts.duplicate_results { 2 } else { 1 };
                for _ in 0..copies {
                    if send(&writer, &msg).is_err() {
                        return;
                    }
                }
            })
        })
        .collect();

    let outcome = loop {
        match read_frame(&mut reader) {
            Ok(None) | Ok(Some(Message::Bye { .. })) => break Ok(()),
            Ok(Some(Message::Blob { digest, data })) => match open_blob(&digest, &data) {
                Ok(img) => shared.blobs.write().expect("blobs").insert_verified(digest, img),
                Err(e) => break reject(&writer, e),
            },
            Ok(Some(Message::Job { job })) => {
                let n = shared.jobs_seen.fetch_add(1, Ordering::SeqCst) + 1;
                if shared.opts.fail_after_jobs.is_some_and(|limit| n > limit) {
                    shared.kill();
                    break Ok(());
                }
                if tx.send(job).is_err() {
                    break Ok(());
                }
            }
            Ok(Some(other)) => {
                break reject(&writer, format!("unexpected {} frame", frame_name(&other)))
            }
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                break reject(&writer, format!("malformed frame: {e}"))
            }
            Err(e) => break Err(e),
        }
    };
    drop(tx);
    for r in runners {
        let _ = r.join();
    }
    let _ = writer.lock().expect("writer").shutdown(Shutdown::Both);
    outcome
}

fn frame_name(m: &Message) -> &'static str {
    match m {
        Message::Hello { .. } => "hello",
        Message::Blob { .. } => "blob",
        Message::Job { .. } => "job",
        Message::Result { .. } => "result",
        Message::Bye { .. } => "bye",
    }
}
