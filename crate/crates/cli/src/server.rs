//! Local TCP editing service.
//!
//! One session per process. State-changing requests (edits, undo, save,
//! fit completion) go through a single worker thread in arrival order.
//! Read-only requests run on the connection's own thread against the
//! snapshot published after the last mutation, so renders of different
//! frames proceed in parallel across connections.

use std::io::{BufReader, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use serde::Serialize;
use serde_json::{json, Value};
use splatrig::optimize::FitOutcome;
use splatrig::{CameraSpec, EditCommand, FitConfig, SessionState, Stage};

use crate::commands::{apply_fit, check_fit_inputs, fit_document_with_progress, resolve_config, write_document};
use crate::protocol::{
    error_response, ok_response, parse_request, read_line, write_message, ErrorCode, Event, Greeting, Request,
    ServiceError, View, PROTOCOL_VERSION, SERVICE_NAME,
};

type Reply = Sender<Result<Value, ServiceError>>;

enum Job {
    Edit(EditCommand, Reply),
    Undo(Reply),
    Save(Option<PathBuf>, Reply),
    StartFit(Stage, Option<FitConfig>, Reply),
    FitFinished(FitConfig, Result<FitOutcome, ServiceError>),
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitState {
    Idle,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitProgress {
    pub state: FitState,
    pub stage: Option<Stage>,
    pub step: usize,
    pub steps: usize,
    pub loss: Option<f64>,
    /// Report summary of the last finished fit.
    pub summary: Option<Value>,
    pub message: Option<String>,
}

impl Default for FitProgress {
    fn default() -> Self {
        Self {
            state: FitState::Idle,
            stage: None,
            step: 0,
            steps: 0,
            loss: None,
            summary: None,
            message: None,
        }
    }
}

struct Shared {
    snapshot: RwLock<Arc<SessionState>>,
    subscribers: Mutex<Vec<Sender<Event>>>,
    fit: Mutex<FitProgress>,
    connections: Mutex<Vec<TcpStream>>,
    document_path: Option<PathBuf>,
    stop: AtomicBool,
}

impl Shared {
    fn snapshot(&self) -> Arc<SessionState> {
        self.snapshot.read().unwrap().clone()
    }

    fn publish(&self, state: &SessionState) {
        *self.snapshot.write().unwrap() = Arc::new(state.clone());
    }

    fn broadcast(&self, event: Event) {
        self.subscribers
            .lock()
            .unwrap()
            .retain(|s| s.send(event.clone()).is_ok());
    }

    fn fit_running(&self) -> bool {
        self.fit.lock().unwrap().state == FitState::Running
    }
}

/// A running service.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    jobs: Sender<Job>,
    acceptor: Option<JoinHandle<()>>,
    worker: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the service stops.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }

    /// Stops accepting, closes open connections and ends the worker.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = self.jobs.send(Job::Stop);
        let _ = TcpStream::connect(self.addr);
        for c in self.shared.connections.lock().unwrap().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() || self.worker.is_some() {
            self.stop();
        }
    }
}

/// Starts serving `session` on `addr`. `document_path` is the default
/// target of `save`.
pub fn spawn(session: SessionState, document_path: Option<PathBuf>, addr: impl ToSocketAddrs) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        snapshot: RwLock::new(Arc::new(session.clone())),
        subscribers: Mutex::new(Vec::new()),
        fit: Mutex::new(FitProgress::default()),
        connections: Mutex::new(Vec::new()),
        document_path,
        stop: AtomicBool::new(false),
    });
    let (tx, rx) = mpsc::channel();
    let worker = {
        let shared = shared.clone();
        let tx = tx.clone();
        std::thread::Builder::new()
            .name("splatrig-worker".into())
            .spawn(move || worker(shared, session, rx, tx))?
    };
    let acceptor = {
        let shared = shared.clone();
        let tx = tx.clone();
        std::thread::Builder::new()
            .name("splatrig-accept".into())
            .spawn(move || accept_loop(listener, shared, tx))?
    };
    Ok(ServerHandle {
        addr,
        shared,
        jobs: tx,
        acceptor: Some(acceptor),
        worker: Some(worker),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, jobs: Sender<Job>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        if let Ok(c) = stream.try_clone() {
            shared.connections.lock().unwrap().push(c);
        }
        let shared = shared.clone();
        let jobs = jobs.clone();
        let peer = stream.peer_addr().ok();
        log::info!("connection from {peer:?}");
        let spawned = std::thread::Builder::new()
            .name("splatrig-conn".into())
            .spawn(move || {
                if let Err(e) = connection(stream, &shared, &jobs) {
                    log::debug!("connection {peer:?} ended: {e}");
                }
            });
        if let Err(e) = spawned {
            log::warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn worker(shared: Arc<Shared>, mut state: SessionState, rx: Receiver<Job>, tx: Sender<Job>) {
    let busy = || ServiceError::new(ErrorCode::Busy, "a fit is in progress");
    for job in rx {
        match job {
            Job::Edit(cmd, reply) => {
                let r = if shared.fit_running() {
                    Err(busy())
                } else {
                    state.apply_edit(cmd).map_err(ServiceError::from).map(|frames| {
                        shared.publish(&state);
                        shared.broadcast(Event::invalidated(frames.clone(), state.undo_depth(), "edit"));
                        json!({ "affected_frames": frames, "undo_depth": state.undo_depth() })
                    })
                };
                let _ = reply.send(r);
            }
            Job::Undo(reply) => {
                let r = if shared.fit_running() {
                    Err(busy())
                } else {
                    let frames = state.undo();
                    if let Some(f) = &frames {
                        shared.publish(&state);
                        shared.broadcast(Event::invalidated(f.clone(), state.undo_depth(), "undo"));
                    }
                    Ok(json!({
                        "undone": frames.is_some(),
                        "affected_frames": frames.unwrap_or_default(),
                        "undo_depth": state.undo_depth(),
                    }))
                };
                let _ = reply.send(r);
            }
            Job::Save(path, reply) => {
                let r = match path.or_else(|| shared.document_path.clone()) {
                    None => Err(ServiceError::new(
                        ErrorCode::InvalidArgument,
                        "no path given and the session has no document file",
                    )),
                    Some(p) => write_document(&p, &state.document())
                        .map_err(ServiceError::from)
                        .map(|()| {
                            state.mark_saved();
                            shared.publish(&state);
                            json!({ "path": p, "bytes": std::fs::metadata(&p).map(|m| m.len()).unwrap_or(0) })
                        }),
                };
                let _ = reply.send(r);
            }
            Job::StartFit(stage, config, reply) => {
                let r = start_fit(&shared, &state, stage, config, &tx);
                let _ = reply.send(r);
            }
            Job::FitFinished(config, result) => finish_fit(&shared, &mut state, &config, result),
            Job::Stop => break,
        }
    }
}

fn start_fit(
    shared: &Arc<Shared>,
    state: &SessionState,
    stage: Stage,
    config: Option<FitConfig>,
    tx: &Sender<Job>,
) -> Result<Value, ServiceError> {
    if shared.fit_running() {
        return Err(ServiceError::new(ErrorCode::Busy, "a fit is already running"));
    }
    let doc = state.document();
    check_fit_inputs(&doc, stage)?;
    let config = resolve_config(&doc, stage, config);
    config.validate()?;
    let steps = config.effective_steps();
    *shared.fit.lock().unwrap() = FitProgress {
        state: FitState::Running,
        stage: Some(stage),
        steps,
        ..FitProgress::default()
    };
    let shared = shared.clone();
    let tx = tx.clone();
    std::thread::Builder::new()
        .name("splatrig-fit".into())
        .spawn(move || {
            let result = fit_document_with_progress(&doc, &config, |rec| {
                let mut p = shared.fit.lock().unwrap();
                p.step = rec.step + 1;
                p.loss = Some(rec.loss);
                if shared.stop.load(Ordering::SeqCst) {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .map_err(ServiceError::from);
            let _ = tx.send(Job::FitFinished(config, result));
        })
        .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
    Ok(json!({ "started": true, "stage": stage, "steps": steps }))
}

fn finish_fit(shared: &Shared, state: &mut SessionState, config: &FitConfig, result: Result<FitOutcome, ServiceError>) {
    let outcome = result.and_then(|out| {
        let mut doc = state.document();
        let report = apply_fit(&mut doc, config, out);
        let mut next = SessionState::new(doc)?;
        next.mark_modified();
        Ok((next, report))
    });
    let mut p = shared.fit.lock().unwrap();
    match outcome {
        Ok((next, report)) => {
            *state = next;
            shared.publish(state);
            p.state = FitState::Succeeded;
            p.loss = Some(report.final_loss.total);
            p.summary = Some(report.summary());
            drop(p);
            let all = (0..state.frame_count()).collect();
            shared.broadcast(Event::invalidated(all, state.undo_depth(), "fit"));
        }
        Err(e) => {
            p.state = FitState::Failed;
            p.message = Some(e.message);
        }
    }
}

fn resolve_view(s: &SessionState, view: &View) -> Result<CameraSpec, ServiceError> {
    let cam = match view {
        View::Camera(c) => c.clone(),
        View::Orbit(o) => {
            let sum = s.summary();
            o.camera(sum.bounds_min, sum.bounds_max)?
        }
    };
    cam.validate()?;
    Ok(cam)
}

fn check_frame(s: &SessionState, t: usize) -> Result<(), ServiceError> {
    if t >= s.frame_count() {
        return Err(ServiceError::new(
            ErrorCode::OutOfRange,
            format!("frame {t} is out of range [0, {}]", s.frame_count() - 1),
        ));
    }
    Ok(())
}

fn submit(jobs: &Sender<Job>, make: impl FnOnce(Reply) -> Job) -> Result<Value, ServiceError> {
    let (tx, rx) = mpsc::channel();
    let stopped = || ServiceError::new(ErrorCode::Internal, "service is shutting down");
    jobs.send(make(tx)).map_err(|_| stopped())?;
    rx.recv().map_err(|_| stopped())?
}

type Handled = Result<(Value, Option<Vec<u8>>), ServiceError>;

struct Connection<'a> {
    shared: &'a Arc<Shared>,
    jobs: &'a Sender<Job>,
    writer: Arc<Mutex<TcpStream>>,
    greeted: bool,
    subscribed: bool,
}

impl Connection<'_> {
    fn handle(&mut self, request: Request) -> Handled {
        if !self.greeted && !matches!(request, Request::Hello { .. }) {
            return Err(ServiceError::new(
                ErrorCode::HandshakeRequired,
                "send {\"op\":\"hello\",\"version\":1} first",
            ));
        }
        let plain = |v: Value| Ok((v, None));
        match request {
            Request::Hello { version } => {
                if version != PROTOCOL_VERSION {
                    return Err(ServiceError::new(
                        ErrorCode::VersionMismatch,
                        format!("server speaks version {PROTOCOL_VERSION}, client asked for {version}"),
                    ));
                }
                self.greeted = true;
                plain(json!({ "service": SERVICE_NAME, "version": PROTOCOL_VERSION }))
            }
            Request::GetSceneSummary => plain(serde_json::to_value(self.shared.snapshot().summary()).expect("summary")),
            Request::GetFrameRender { frame, view } => {
                let s = self.shared.snapshot();
                check_frame(&s, frame)?;
                let cam = resolve_view(&s, &view)?;
                let png = s.render_frame(frame, &cam)?.encode_png()?;
                Ok((
                    json!({ "frame": frame, "format": "png", "width": cam.width, "height": cam.height }),
                    Some(png),
                ))
            }
            Request::GetJointProjection { frame, view, rest } => {
                let s = self.shared.snapshot();
                check_frame(&s, frame)?;
                let cam = resolve_view(&s, &view)?;
                let pixels = if rest {
                    let proj = cam.projection()?;
                    s.scene()
                        .skeleton
                        .joints
                        .iter()
                        .map(|p| proj.project(p).map(|v| [v.x, v.y]))
                        .collect()
                } else {
                    s.joint_projection(frame, &cam)?
                };
                plain(json!({ "frame": frame, "rest": rest, "width": cam.width, "height": cam.height, "pixels": pixels }))
            }
            Request::GetPosedJoints { frame } => {
                let s = self.shared.snapshot();
                check_frame(&s, frame)?;
                let positions: Vec<[f64; 3]> = s.posed_joints(frame)?.iter().map(|&p| p.into()).collect();
                plain(json!({ "frame": frame, "positions": positions }))
            }
            Request::ApplyEdit { command } => plain(submit(self.jobs, |r| Job::Edit(command, r))?),
            Request::Undo => plain(submit(self.jobs, Job::Undo)?),
            Request::Save { path } => plain(submit(self.jobs, |r| Job::Save(path, r))?),
            Request::ExportBvh { fps, path } => {
                let s = self.shared.snapshot();
                let text = s.export_bvh(fps)?;
                let frames = s.frame_count();
                match path {
                    Some(p) => {
                        std::fs::write(&p, &text).map_err(|e| ServiceError::new(ErrorCode::IoError, format!("{}: {e}", p.display())))?;
                        plain(json!({ "path": p, "frames": frames, "bytes": text.len() }))
                    }
                    None => Ok((json!({ "format": "bvh", "frames": frames }), Some(text.into_bytes()))),
                }
            }
            Request::StartFit { stage, config } => plain(submit(self.jobs, |r| Job::StartFit(stage, config, r))?),
            Request::FitStatus => plain(serde_json::to_value(self.shared.fit.lock().unwrap().clone()).expect("progress")),
            Request::Subscribe => {
                if !self.subscribed {
                    self.subscribe();
                }
                plain(json!({ "subscribed": true }))
            }
        }
    }

    fn subscribe(&mut self) {
        let (tx, rx) = mpsc::channel::<Event>();
        self.shared.subscribers.lock().unwrap().push(tx);
        self.subscribed = true;
        let writer = self.writer.clone();
        let _ = std::thread::Builder::new().name("splatrig-events".into()).spawn(move || {
            for ev in rx {
                let v = serde_json::to_value(&ev).expect("event");
                if write_message(&mut *writer.lock().unwrap(), &v, None).is_err() {
                    break;
                }
            }
        });
    }
}

fn connection(stream: TcpStream, shared: &Arc<Shared>, jobs: &Sender<Job>) -> std::io::Result<()> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let greeting = serde_json::to_value(Greeting::current()).expect("greeting");
    write_message(&mut *writer.lock().unwrap(), &greeting, None)?;
    let mut conn = Connection {
        shared,
        jobs,
        writer: writer.clone(),
        greeted: false,
        subscribed: false,
    };
    let mut reader = BufReader::new(stream);
    loop {
        let line = match read_line(&mut reader) {
            Ok(Some(l)) => l,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == ErrorKind::InvalidData => {
                let err = ServiceError::new(ErrorCode::MalformedRequest, e.to_string());
                write_message(&mut *writer.lock().unwrap(), &error_response(&Value::Null, &err), None)?;
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if line.trim().is_empty() {
            continue;
        }
        let (header, payload) = match parse_request(&line) {
            Err((id, err)) => (error_response(&id, &err), None),
            Ok(env) => match conn.handle(env.request) {
                Ok((result, payload)) => (ok_response(&env.id, result), payload),
                Err(err) => (error_response(&env.id, &err), None),
            },
        };
        write_message(&mut *writer.lock().unwrap(), &header, payload.as_deref())?;
    }
}
