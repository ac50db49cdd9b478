use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use super::engine::{MetricEngine, MetricError, MetricReading, MonitoringRepository};
use super::statement::MonitoringMetric;
use super::{kind, EventSource, MonitoringEvent};
use crate::clock::Clock;

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmitError {
    #[error("event queue full; event dropped")]
    QueueFull,
    #[error("event type '{0}' is neither predefined nor custom.*")]
    InvalidType(String),
}

enum BusMsg {
    Event(MonitoringEvent),
    Tick(u64),
    Stop,
}

struct Intake {
    tx: Option<SyncSender<BusMsg>>,
    last_drop_report: Option<u64>,
}

struct Shared {
    clock: Arc<dyn Clock>,
    intake: Mutex<Intake>,
    sent: AtomicU64,
    processed: Mutex<u64>,
    processed_cv: Condvar,
    dropped: AtomicU64,
    engine: Mutex<MetricEngine>,
    repo: Arc<MonitoringRepository>,
    subscribers: Mutex<Vec<Sender<MonitoringEvent>>>,
    log: Mutex<Option<Vec<MonitoringEvent>>>,
}

/// The consolidated monitoring stream.
///
/// `emit` stamps the event with the bus clock and enqueues it into a
/// bounded buffer; a single dispatcher thread feeds the metric engine,
/// appends to the in-memory log and fans out to subscribers.
#[derive(Clone)]
pub struct EventBus {
    shared: Arc<Shared>,
    worker: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl std::fmt::Debug for EventBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventBus")
            .field("sent", &self.shared.sent.load(Ordering::Relaxed))
            .field("dropped", &self.shared.dropped.load(Ordering::Relaxed))
            .finish()
    }
}

pub struct EventSubscription {
    rx: Receiver<MonitoringEvent>,
}

impl EventSubscription {
    pub fn recv_timeout(&self, timeout: Duration) -> Option<MonitoringEvent> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<MonitoringEvent> {
        self.rx.try_recv().ok()
    }

    pub fn drain(&self) -> Vec<MonitoringEvent> {
        self.rx.try_iter().collect()
    }
}

impl EventBus {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_capacity(clock, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(clock: Arc<dyn Clock>, capacity: usize) -> Self {
        let (tx, rx) = mpsc::sync_channel(capacity);
        let repo = Arc::new(MonitoringRepository::new());
        let shared = Arc::new(Shared {
            clock,
            intake: Mutex::new(Intake {
                tx: Some(tx),
                last_drop_report: None,
            }),
            sent: AtomicU64::new(0),
            processed: Mutex::new(0),
            processed_cv: Condvar::new(),
            dropped: AtomicU64::new(0),
            engine: Mutex::new(MetricEngine::new(repo.clone())),
            repo,
            subscribers: Mutex::new(Vec::new()),
            log: Mutex::new(Some(Vec::new())),
        });
        let s = shared.clone();
        let worker = std::thread::Builder::new()
            .name("event-bus".into())
            .spawn(move || dispatch(s, rx))
            .expect("spawn event bus thread");
        Self {
            shared,
            worker: Arc::new(Mutex::new(Some(worker))),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.shared.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.shared.clock.now_ms()
    }

    /// Stamps `e` with the bus clock and enqueues it.
    pub fn emit(&self, mut e: MonitoringEvent) -> Result<(), EmitError> {
        if !e.is_well_formed() {
            return Err(EmitError::InvalidType(e.event_type));
        }
        let mut intake = self.shared.intake.lock().unwrap();
        let Some(tx) = intake.tx.clone() else {
            return Ok(());
        };
        let now = self.shared.clock.now_ms();
        e.timestamp = now;
        match tx.try_send(BusMsg::Event(e)) {
            Ok(()) => {
                self.shared.sent.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(TrySendError::Full(_)) => {
                let dropped = self.shared.dropped.fetch_add(1, Ordering::SeqCst) + 1;
                let due = intake.last_drop_report.is_none_or(|t| now >= t + 1000);
                if due {
                    let meta = MonitoringEvent::new(kind::DROP_EVENT, EventSource::Manager)
                        .with("dropped", dropped as i64)
                        .at(now);
                    if tx.try_send(BusMsg::Event(meta)).is_ok() {
                        self.shared.sent.fetch_add(1, Ordering::SeqCst);
                        intake.last_drop_report = Some(now);
                    }
                }
                Err(EmitError::QueueFull)
            }
            Err(TrySendError::Disconnected(_)) => Ok(()),
        }
    }

    /// Emits, ignoring overflow (already counted by the bus).
    pub fn publish(&self, e: MonitoringEvent) {
        if let Err(EmitError::InvalidType(t)) = self.emit(e) {
            log::warn!("dropping malformed event type {t}");
        }
    }

    /// Advances the engine clock to the current bus time, closing any
    /// time-batch windows that ended. Blocks while the queue is full.
    pub fn tick(&self) {
        let intake = self.shared.intake.lock().unwrap();
        if let Some(tx) = intake.tx.clone() {
            let now = self.shared.clock.now_ms();
            if tx.send(BusMsg::Tick(now)).is_ok() {
                self.shared.sent.fetch_add(1, Ordering::SeqCst);
            }
        }
    }

    /// Waits until everything enqueued so far has been dispatched.
    pub fn flush(&self) {
        let target = self.shared.sent.load(Ordering::SeqCst);
        let mut done = self.shared.processed.lock().unwrap();
        while *done < target {
            done = self.shared.processed_cv.wait(done).unwrap();
        }
    }

    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::SeqCst)
    }

    pub fn subscribe(&self) -> EventSubscription {
        let (tx, rx) = mpsc::channel();
        self.shared.subscribers.lock().unwrap().push(tx);
        EventSubscription { rx }
    }

    pub fn register_metric(&self, metric: MonitoringMetric) -> Result<(), MetricError> {
        let now = self.now_ms();
        self.shared.engine.lock().unwrap().register(metric, now)
    }

    pub fn enable_utilization(&self, window_ms: u64) -> Result<(), MetricError> {
        let now = self.now_ms();
        self.shared.engine.lock().unwrap().enable_utilization(window_ms, now)
    }

    pub fn query_metric(&self, name: &str) -> Result<Option<MetricReading>, MetricError> {
        self.shared.repo.query(name)
    }

    pub fn repository(&self) -> &Arc<MonitoringRepository> {
        &self.shared.repo
    }

    pub fn skipped(&self, metric: &str) -> Option<u64> {
        self.shared.engine.lock().unwrap().skipped(metric)
    }

    /// Copy of every dispatched event, in dispatch order.
    pub fn events(&self) -> Vec<MonitoringEvent> {
        self.shared.log.lock().unwrap().clone().unwrap_or_default()
    }

    pub fn events_of(&self, event_type: &str) -> Vec<MonitoringEvent> {
        self.events()
            .into_iter()
            .filter(|e| e.event_type == event_type)
            .collect()
    }

    /// Stops recording the in-memory log.
    pub fn disable_log(&self) {
        *self.shared.log.lock().unwrap() = None;
    }

    /// Polls the log until `pred` holds for some event or `timeout` passes.
    pub fn wait_for(
        &self,
        timeout: Duration,
        pred: impl Fn(&MonitoringEvent) -> bool,
    ) -> Option<MonitoringEvent> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            self.flush();
            if let Some(e) = self
                .shared
                .log
                .lock()
                .unwrap()
                .as_ref()
                .and_then(|l| l.iter().find(|e| pred(e)).cloned())
            {
                return Some(e);
            }
            if std::time::Instant::now() >= deadline {
                return None;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn shutdown(&self) {
        let tx = self.shared.intake.lock().unwrap().tx.take();
        if let Some(tx) = tx {
            let _ = tx.send(BusMsg::Stop);
        }
        if let Some(h) = self.worker.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

fn dispatch(shared: Arc<Shared>, rx: Receiver<BusMsg>) {
    while let Ok(msg) = rx.recv() {
        match msg {
            BusMsg::Stop => break,
            BusMsg::Tick(now) => shared.engine.lock().unwrap().advance_to(now),
            BusMsg::Event(e) => {
                shared.engine.lock().unwrap().on_event(&e);
                shared
                    .subscribers
                    .lock()
                    .unwrap()
                    .retain(|s| s.send(e.clone()).is_ok());
                if let Some(log) = shared.log.lock().unwrap().as_mut() {
                    log.push(e);
                }
            }
        }
        let mut done = shared.processed.lock().unwrap();
        *done += 1;
        shared.processed_cv.notify_all();
    }
    // Release anyone waiting on a flush.
    let mut done = shared.processed.lock().unwrap();
    *done = u64::MAX;
    shared.processed_cv.notify_all();
}
