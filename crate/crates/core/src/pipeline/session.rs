//! A running pipeline on its own thread.
//!
//! The worker thread is the only writer of the [`RunState`]. Other threads
//! send [`Command`]s over a channel and read immutable [`Snapshot`]s that the
//! worker republishes after every change.

use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{AnnotationTask, HumanLabelOutcome, Pipeline, PipelineError, RoundMetrics, RunState, Status, StopReason};
use crate::annotator::Cost;
use crate::corpus::Label;

const IDLE_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub run_id: String,
    pub round: usize,
    pub status: Status,
    pub stop_reason: Option<StopReason>,
    pub metrics: Vec<RoundMetrics>,
    pub cost: Cost,
    pub queue_size: usize,
    #[serde(skip)]
    pub tasks: Vec<AnnotationTask>,
    /// Set when the worker stopped on an error.
    pub error: Option<String>,
}

impl Snapshot {
    fn of(pipeline: &Pipeline, state: &RunState, error: Option<String>) -> Self {
        let tasks = pipeline.tasks(state);
        Snapshot {
            run_id: state.run_id.clone(),
            round: state.round,
            status: state.status,
            stop_reason: state.stop_reason,
            metrics: state.metrics().into_iter().cloned().collect(),
            cost: state.ledger.cost(),
            queue_size: tasks.len(),
            tasks,
            error,
        }
    }
}

pub enum Command {
    /// Begin (or resume) advancing the run.
    Start,
    Label {
        record_id: String,
        label: Label,
        annotator: String,
        reply: mpsc::Sender<Result<HumanLabelOutcome, PipelineError>>,
    },
    Shutdown,
}

#[derive(Debug, Clone)]
pub struct SessionOptions {
    /// Start advancing immediately instead of waiting for [`Command::Start`].
    pub autostart: bool,
    /// Save the state here after every stage.
    pub state_path: Option<PathBuf>,
    /// Abandon an open review queue after this long.
    pub human_timeout: Option<Duration>,
}

/// Cheap, cloneable access to a running session.
#[derive(Clone)]
pub struct SessionHandle {
    tx: mpsc::Sender<Command>,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
}

impl SessionHandle {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn start(&self) {
        let _ = self.tx.send(Command::Start);
    }

    /// Sends a label through the command queue and waits for the result.
    pub fn submit_label(&self, record_id: &str, label: Label, annotator: &str) -> Result<HumanLabelOutcome, PipelineError> {
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(Command::Label {
                record_id: record_id.to_string(),
                label,
                annotator: annotator.to_string(),
                reply,
            })
            .map_err(|_| PipelineError::Internal("session has shut down".into()))?;
        rx.recv()
            .map_err(|_| PipelineError::Internal("session has shut down".into()))?
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Command::Shutdown);
    }
}

pub struct Session {
    handle: SessionHandle,
    worker: JoinHandle<(RunState, Option<PipelineError>)>,
}

impl Session {
    pub fn spawn(pipeline: Pipeline, state: RunState, options: SessionOptions) -> Self {
        let (tx, rx) = mpsc::channel();
        let snapshot = Arc::new(RwLock::new(Arc::new(Snapshot::of(&pipeline, &state, None))));
        let shared = snapshot.clone();
        let worker = std::thread::spawn(move || Worker {
            pipeline,
            state,
            options,
            snapshot: shared,
            error: None,
            waiting_since: None,
        }
        .run(rx));
        Session {
            handle: SessionHandle { tx, snapshot },
            worker,
        }
    }

    pub fn handle(&self) -> SessionHandle {
        self.handle.clone()
    }

    /// Blocks until the worker stops, after which the final state (and the
    /// error that halted it, if any) is returned.
    pub fn join(self) -> (RunState, Option<PipelineError>) {
        drop(self.handle);
        self.worker.join().expect("session worker panicked")
    }
}

struct Worker {
    pipeline: Pipeline,
    state: RunState,
    options: SessionOptions,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
    error: Option<PipelineError>,
    waiting_since: Option<Instant>,
}

impl Worker {
    fn publish(&self) {
        let snap = Snapshot::of(&self.pipeline, &self.state, self.error.as_ref().map(|e| e.to_string()));
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snap);
    }

    fn runnable(&self, started: bool) -> bool {
        started && self.error.is_none() && !matches!(self.state.status, Status::Done | Status::AwaitingHuman)
    }

    fn save(&mut self) {
        if let Some(p) = &self.options.state_path {
            if let Err(e) = self.state.save(p) {
                self.error = Some(e);
            }
        }
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) -> (RunState, Option<PipelineError>) {
        let mut started = self.options.autostart;
        loop {
            let next = if self.runnable(started) {
                rx.try_recv().map_err(|e| match e {
                    mpsc::TryRecvError::Empty => RecvTimeoutError::Timeout,
                    mpsc::TryRecvError::Disconnected => RecvTimeoutError::Disconnected,
                })
            } else {
                rx.recv_timeout(IDLE_POLL)
            };
            match next {
                Ok(Command::Start) => started = true,
                Ok(Command::Label {
                    record_id,
                    label,
                    annotator,
                    reply,
                }) => {
                    let result = self
                        .pipeline
                        .apply_human_label(&mut self.state, &record_id, label, &annotator);
                    if matches!(result, Ok(HumanLabelOutcome { applied: true, .. })) {
                        self.save();
                        self.publish();
                    }
                    let _ = reply.send(result);
                }
                Ok(Command::Shutdown) => break,
                Err(RecvTimeoutError::Disconnected) if !self.runnable(started) => break,
                Err(_) => {}
            }

            if self.state.status == Status::AwaitingHuman {
                let since = *self.waiting_since.get_or_insert_with(Instant::now);
                if self.options.human_timeout.is_some_and(|t| since.elapsed() >= t) {
                    tracing::warn!(round = self.state.round + 1, "human review timed out");
                    self.pipeline.abandon_human_queue(&mut self.state);
                    self.save();
                    self.publish();
                }
            } else {
                self.waiting_since = None;
            }

            if self.runnable(started) {
                if let Err(e) = self.pipeline.advance(&mut self.state) {
                    tracing::error!(error = %e, "run halted");
                    self.error = Some(e);
                }
                self.save();
                self.publish();
            }
        }
        (self.state, self.error)
    }
}
