//! Message transports between the coordinator and its workers. Every
//! transport keeps per-worker FIFO order.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::protocol::{pack_bytes, unpack_bytes, Frame, Tag};
use crate::worker::{serve, Worker};

pub trait Transport {
    fn workers(&self) -> usize;

    /// Delivers a frame to one worker; returns the bytes counted for it.
    fn send(&mut self, worker: usize, frame: &Frame) -> Result<usize>;

    /// Next frame from one worker with its counted size. A `Failure` frame
    /// is turned into [`Error::WorkerFailed`].
    fn recv(&mut self, worker: usize) -> Result<(Frame, usize)>;

    /// Sends `Terminate` to every worker and releases their resources.
    fn shutdown(&mut self) -> Result<()>;
}

fn failure(worker: usize, frame: &Frame) -> Error {
    let message = unpack_bytes(&frame.payload)
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_else(|_| "unreadable failure report".into());
    Error::WorkerFailed { worker, message }
}

pub(crate) fn failure_frame(iteration: u32, e: &Error) -> Frame {
    Frame::new(Tag::Failure, iteration, pack_bytes(e.to_string().as_bytes()))
}

fn checked(worker: usize, frame: Frame, bytes: usize) -> Result<(Frame, usize)> {
    if frame.tag == Tag::Failure {
        return Err(failure(worker, &frame));
    }
    Ok((frame, bytes))
}

/// Workers called in place. Nothing is encoded, so no bytes are counted.
pub struct DirectTransport {
    workers: Vec<Worker>,
    inbox: Vec<VecDeque<Frame>>,
}

impl DirectTransport {
    pub fn new(workers: Vec<Worker>) -> Self {
        let inbox = workers.iter().map(|_| VecDeque::new()).collect();
        DirectTransport { workers, inbox }
    }
}

impl Transport for DirectTransport {
    fn workers(&self) -> usize {
        self.workers.len()
    }

    fn send(&mut self, worker: usize, frame: &Frame) -> Result<usize> {
        match self.workers[worker].handle(frame) {
            Ok(replies) => self.inbox[worker].extend(replies),
            Err(e) => self.inbox[worker].push_back(failure_frame(frame.iteration, &e)),
        }
        Ok(0)
    }

    fn recv(&mut self, worker: usize) -> Result<(Frame, usize)> {
        let frame = self.inbox[worker]
            .pop_front()
            .ok_or_else(|| Error::protocol(format!("worker {worker} has no pending reply")))?;
        checked(worker, frame, 0)
    }

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

/// One thread per worker, linked by bounded channels that carry encoded
/// frames, so the byte counts match a real wire.
pub struct ThreadTransport {
    to_worker: Vec<Option<SyncSender<Vec<u8>>>>,
    from_worker: Vec<Receiver<Vec<u8>>>,
    handles: Vec<Option<JoinHandle<()>>>,
}

/// Frames in flight per direction before a sender blocks.
const CHANNEL_DEPTH: usize = 4;

impl ThreadTransport {
    pub fn spawn(workers: Vec<Worker>) -> Self {
        let mut t = ThreadTransport { to_worker: Vec::new(), from_worker: Vec::new(), handles: Vec::new() };
        for (index, mut worker) in workers.into_iter().enumerate() {
            let (tx, rx) = sync_channel::<Vec<u8>>(CHANNEL_DEPTH);
            let (reply_tx, reply_rx) = sync_channel::<Vec<u8>>(CHANNEL_DEPTH);
            let handle = std::thread::Builder::new()
                .name(format!("dfab-worker-{index}"))
                .spawn(move || {
                    while let Ok(bytes) = rx.recv() {
                        let (replies, stop) = match Frame::decode(&bytes) {
                            Ok(f) if f.tag == Tag::Terminate => return,
                            Ok(f) => match worker.handle(&f) {
                                Ok(r) => (r, false),
                                Err(e) => (vec![failure_frame(f.iteration, &e)], true),
                            },
                            Err(e) => (vec![failure_frame(0, &e)], true),
                        };
                        for r in replies {
                            if reply_tx.send(r.encode()).is_err() {
                                return;
                            }
                        }
                        if stop {
                            return;
                        }
                    }
                })
                .expect("spawning a worker thread");
            t.to_worker.push(Some(tx));
            t.from_worker.push(reply_rx);
            t.handles.push(Some(handle));
        }
        t
    }
}

impl Transport for ThreadTransport {
    fn workers(&self) -> usize {
        self.from_worker.len()
    }

    fn send(&mut self, worker: usize, frame: &Frame) -> Result<usize> {
        let bytes = frame.encode();
        let len = bytes.len();
        let tx = self.to_worker[worker]
            .as_ref()
            .ok_or_else(|| Error::protocol(format!("worker {worker} is shut down")))?;
        tx.send(bytes)
            .map_err(|_| Error::WorkerFailed { worker, message: "worker thread exited".into() })?;
        Ok(len)
    }

    fn recv(&mut self, worker: usize) -> Result<(Frame, usize)> {
        let bytes = self.from_worker[worker]
            .recv()
            .map_err(|_| Error::WorkerFailed { worker, message: "worker thread exited".into() })?;
        let len = bytes.len();
        checked(worker, Frame::decode(&bytes)?, len)
    }

    fn shutdown(&mut self) -> Result<()> {
        for tx in self.to_worker.iter_mut() {
            if let Some(tx) = tx.take() {
                let _ = tx.send(Frame::new(Tag::Terminate, 0, vec![]).encode());
            }
        }
        for h in self.handles.iter_mut() {
            if let Some(h) = h.take() {
                h.join().map_err(|_| Error::protocol("a worker thread panicked"))?;
            }
        }
        Ok(())
    }
}

impl Drop for ThreadTransport {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Workers in other processes reached over TCP.
pub struct SocketTransport {
    streams: Vec<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl SocketTransport {
    /// Waits until `workers` peers have connected. Worker indices follow
    /// connection order.
    pub fn accept(listener: &TcpListener, workers: usize, timeout: Duration) -> Result<Self> {
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut streams = Vec::with_capacity(workers);
        while streams.len() < workers {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("worker {} connected from {peer}", streams.len());
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    streams.push((BufReader::new(stream.try_clone()?), BufWriter::new(stream)));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Config(format!(
                            "only {} of {workers} workers connected before the timeout",
                            streams.len()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        listener.set_nonblocking(false)?;
        Ok(SocketTransport { streams })
    }
}

impl Transport for SocketTransport {
    fn workers(&self) -> usize {
        self.streams.len()
    }

    fn send(&mut self, worker: usize, frame: &Frame) -> Result<usize> {
        let w = &mut self.streams[worker].1;
        let n = frame.write_to(w)?;
        w.flush()?;
        Ok(n)
    }

    fn recv(&mut self, worker: usize) -> Result<(Frame, usize)> {
        let (frame, n) = Frame::read_from(&mut self.streams[worker].0)
            .map_err(|e| Error::WorkerFailed { worker, message: e.to_string() })?;
        checked(worker, frame, n)
    }

    fn shutdown(&mut self) -> Result<()> {
        for (_, w) in self.streams.iter_mut() {
            let _ = Frame::new(Tag::Terminate, 0, vec![]).write_to(w);
            let _ = w.flush();
        }
        Ok(())
    }
}

/// Worker side of [`SocketTransport`]: connects, retrying until `timeout`,
/// then serves requests until told to stop.
pub fn serve_tcp(addr: impl ToSocketAddrs + Clone, mut worker: Worker, timeout: Duration) -> Result<()> {
    let deadline = Instant::now() + timeout;
    let stream = loop {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect failed, retrying: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    serve(&mut worker, &mut reader, &mut writer)
}
