//! Bounded queues and live audio capture.
//!
//! Live capture is push-based: a producer thread pulls blocks from a
//! [`CaptureDevice`], slices and gates them, and pushes frames into a
//! [`BoundedQueue`] that drops the oldest frame when full.

use std::collections::VecDeque;
use std::io::{self, Read};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::audio::{Audioframe, FrameConfig, FrameSlicer};
use crate::error::{Error, Result};

pub const DEFAULT_FRAME_QUEUE_CAPACITY: usize = 64;

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

/// Multi-producer bounded FIFO with close semantics.
pub struct BoundedQueue<T> {
    capacity: usize,
    state: Mutex<QueueState<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Arc<Self> {
        Arc::new(Self {
            capacity: capacity.max(1),
            state: Mutex::new(QueueState { items: VecDeque::new(), closed: false, dropped: 0 }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks while full. Returns the item back if the queue is closed.
    pub fn push(&self, item: T) -> std::result::Result<(), T> {
        let mut st = self.state.lock().unwrap();
        while st.items.len() >= self.capacity && !st.closed {
            st = self.not_full.wait(st).unwrap();
        }
        if st.closed {
            return Err(item);
        }
        st.items.push_back(item);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Never blocks; evicts the oldest item when full. Returns whether one was evicted.
    pub fn push_drop_oldest(&self, item: T) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return false;
        }
        let evicted = if st.items.len() >= self.capacity {
            st.items.pop_front();
            st.dropped += 1;
            true
        } else {
            false
        };
        st.items.push_back(item);
        self.not_empty.notify_one();
        evicted
    }

    /// Blocks until an item arrives; `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.not_full.notify_one();
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).unwrap();
        }
    }

    /// Like [`BoundedQueue::pop`] but gives up after `timeout`.
    ///
    /// `None` means the wait timed out; `Some(None)` means closed and drained.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<Option<T>> {
        let deadline = std::time::Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.not_full.notify_one();
                return Some(Some(item));
            }
            if st.closed {
                return Some(None);
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return None;
            }
            st = self.not_empty.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub fn close(&self) {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    /// Items evicted by [`BoundedQueue::push_drop_oldest`].
    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source of raw mono samples.
pub trait CaptureDevice: Send {
    fn sample_rate(&self) -> f64;

    /// Fills `buf` with up to `buf.len()` samples; `Ok(0)` means end of stream.
    fn read(&mut self, buf: &mut [f64]) -> io::Result<usize>;
}

/// Plays back a fixed PCM vector, optionally in real time.
pub struct MockDevice {
    pcm: Vec<f64>,
    pos: usize,
    sample_rate: f64,
    block: usize,
    realtime: bool,
}

impl MockDevice {
    pub fn new(pcm: Vec<f64>, sample_rate: f64, block: usize) -> Self {
        Self { pcm, pos: 0, sample_rate, block: block.max(1), realtime: false }
    }

    /// Sleep for each block's duration before returning it.
    pub fn realtime(mut self) -> Self {
        self.realtime = true;
        self
    }
}

impl CaptureDevice for MockDevice {
    fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    fn read(&mut self, buf: &mut [f64]) -> io::Result<usize> {
        let n = buf.len().min(self.block).min(self.pcm.len() - self.pos);
        buf[..n].copy_from_slice(&self.pcm[self.pos..self.pos + n]);
        self.pos += n;
        if self.realtime && n > 0 {
            std::thread::sleep(Duration::from_secs_f64(n as f64 / self.sample_rate));
        }
        Ok(n)
    }
}

/// Raw little-endian PCM from any reader (e.g. a pipe from a recorder).
pub struct RawPcmDevice<R> {
    reader: R,
    sample_rate: f64,
    format: RawFormat,
    pending: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    F32Le,
    S16Le,
}

impl RawFormat {
    fn width(self) -> usize {
        match self {
            RawFormat::F32Le => 4,
            RawFormat::S16Le => 2,
        }
    }
}

impl<R: Read + Send> RawPcmDevice<R> {
    pub fn new(reader: R, sample_rate: f64, format: RawFormat) -> Self {
        Self { reader, sample_rate, format, pending: Vec::new() }
    }
}

impl<R: Read + Send> CaptureDevice for RawPcmDevice<R> {
    fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    fn read(&mut self, buf: &mut [f64]) -> io::Result<usize> {
        let width = self.format.width();
        let mut bytes = vec![0u8; buf.len() * width];
        loop {
            let got = self.reader.read(&mut bytes[..buf.len() * width - self.pending.len()])?;
            if got == 0 {
                return Ok(0);
            }
            self.pending.extend_from_slice(&bytes[..got]);
            let whole = self.pending.len() / width;
            if whole == 0 {
                continue;
            }
            for (i, chunk) in self.pending[..whole * width].chunks_exact(width).enumerate() {
                buf[i] = match self.format {
                    RawFormat::F32Le => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64,
                    RawFormat::S16Le => i16::from_le_bytes([chunk[0], chunk[1]]) as f64 / 32768.0,
                };
            }
            self.pending.drain(..whole * width);
            return Ok(whole);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub frames_emitted: u64,
    pub frames_gated: u64,
    pub overruns: u64,
}

/// Running capture: frames arrive on [`CaptureHandle::frames`].
pub struct CaptureHandle {
    stop: Arc<AtomicBool>,
    queue: Arc<BoundedQueue<Audioframe>>,
    worker: Option<JoinHandle<Result<CaptureStats>>>,
}

impl CaptureHandle {
    pub fn frames(&self) -> Arc<BoundedQueue<Audioframe>> {
        Arc::clone(&self.queue)
    }

    /// Signals the producer to stop after its current block.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Stops the producer and returns its statistics.
    pub fn stop(mut self) -> Result<CaptureStats> {
        self.request_stop();
        self.join_worker()
    }

    /// Waits for the device to reach end of stream.
    pub fn wait(mut self) -> Result<CaptureStats> {
        self.join_worker()
    }

    /// Stops the producer without waiting for it, for devices whose
    /// reads may block indefinitely.
    pub fn detach(mut self) {
        self.request_stop();
        self.worker.take();
    }

    fn join_worker(&mut self) -> Result<CaptureStats> {
        let worker = self.worker.take().expect("joined once");
        worker.join().map_err(|_| Error::Environment("capture thread panicked".into()))?
    }
}

impl Drop for CaptureHandle {
    fn drop(&mut self) {
        if self.worker.is_some() {
            self.request_stop();
            let _ = self.join_worker();
        }
    }
}

/// Starts pulling audio from `device` on a background thread.
pub fn live_capture<D: CaptureDevice + 'static>(cfg: FrameConfig, device: D, capacity: usize) -> Result<CaptureHandle> {
    cfg.validate()?;
    if (device.sample_rate() - cfg.sample_rate).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "device runs at {} Hz, follower configured for {} Hz",
            device.sample_rate(),
            cfg.sample_rate
        )));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let queue = BoundedQueue::new(capacity);
    let worker = {
        let stop = Arc::clone(&stop);
        let queue = Arc::clone(&queue);
        let mut device = device;
        std::thread::Builder::new()
            .name("capture".into())
            .spawn(move || {
                let mut slicer = FrameSlicer::new(cfg);
                let mut buf = vec![0.0; cfg.hop_length.clamp(256, 4096)];
                let mut stats = CaptureStats::default();
                let result = loop {
                    if stop.load(Ordering::SeqCst) {
                        break Ok(());
                    }
                    match device.read(&mut buf) {
                        Ok(0) => break Ok(()),
                        Ok(n) => {
                            for frame in slicer.push(&buf[..n]) {
                                stats.frames_emitted += 1;
                                if queue.push_drop_oldest(frame) {
                                    stats.overruns += 1;
                                }
                            }
                        }
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e) => break Err(Error::Io(e)),
                    }
                };
                stats.frames_gated = slicer.gated() as u64;
                queue.close();
                result.map(|_| stats)
            })
            .map_err(Error::Io)?
    };
    Ok(CaptureHandle { stop, queue, worker: Some(worker) })
}
