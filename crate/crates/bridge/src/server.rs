//! WebSocket front end. A paced simulation thread and the connection tasks
//! talk only through two bounded queues: commands in, telemetry out.

use crate::protocol::{Command, Outbound, Role};
use crate::sim::{BridgeConfig, BridgeSim};
use futures_util::{SinkExt, StreamExt};
use hoverlab::policy::Policy;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{broadcast, oneshot};
use tokio_tungstenite::tungstenite::Message;

/// How long the paused simulation waits for a command before rechecking shutdown.
const IDLE_POLL: Duration = Duration::from_millis(50);

struct Shared {
    commands: SyncSender<Command>,
    telemetry: broadcast::Sender<Outbound>,
    operator_present: AtomicBool,
    hello: Outbound,
}

pub struct BridgeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shutdown: Option<oneshot::Sender<()>>,
    sim_thread: Option<JoinHandle<()>>,
    accept_task: Option<tokio::task::JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) {
        self.stop_all();
        if let Some(task) = self.accept_task.take() {
            let _ = task.await;
        }
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.sim_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Binds `addr` and starts serving. The simulation runs while an operator is
/// connected and not paused; it pauses when the operator disconnects.
pub async fn serve(policy: Policy, cfg: BridgeConfig, addr: impl ToSocketAddrs) -> std::io::Result<BridgeHandle> {
    let sim = BridgeSim::new(policy, &cfg).map_err(std::io::Error::other)?;
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let (cmd_tx, cmd_rx) = mpsc::sync_channel(cfg.command_capacity);
    let (tel_tx, _) = broadcast::channel(cfg.telemetry_capacity);
    let stop = Arc::new(AtomicBool::new(false));

    let sim_thread = {
        let tel_tx = tel_tx.clone();
        let stop = stop.clone();
        std::thread::Builder::new().name("hoverlab-sim".into()).spawn(move || run_sim(sim, cmd_rx, tel_tx, stop))?
    };

    let shared = Arc::new(Shared {
        commands: cmd_tx,
        telemetry: tel_tx,
        operator_present: AtomicBool::new(false),
        hello: Outbound::Hello {
            role: Role::Operator,
            rate_hz: cfg.rate_hz,
            control_dt: cfg.env.control_dt(),
            target: cfg.env.reward.target_position,
            push_force_n: cfg.eval.push_force_n,
            push_duration_s: cfg.eval.push_duration_s,
        },
    });
    let (shutdown_tx, mut shutdown_rx) = oneshot::channel();
    let accept_task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = &mut shutdown_rx => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let shared = shared.clone();
                        tokio::spawn(async move {
                            if let Err(e) = handle_connection(stream, shared).await {
                                log::info!("connection {peer} ended: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                },
            }
        }
    });
    log::info!("bridge listening on ws://{local}");
    Ok(BridgeHandle {
        addr: local,
        stop,
        shutdown: Some(shutdown_tx),
        sim_thread: Some(sim_thread),
        accept_task: Some(accept_task),
    })
}

fn run_sim(
    mut sim: BridgeSim,
    commands: mpsc::Receiver<Command>,
    telemetry: broadcast::Sender<Outbound>,
    stop: Arc<AtomicBool>,
) {
    let mut next_tick = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let wait = if sim.paused() { IDLE_POLL } else { next_tick.saturating_duration_since(Instant::now()) };
        match commands.recv_timeout(wait) {
            Ok(cmd) => {
                let was_paused = sim.paused();
                if let Err(e) = sim.handle(cmd) {
                    let _ = telemetry.send(Outbound::Error { message: e.to_string() });
                }
                if was_paused || matches!(cmd, Command::SetRate { .. }) {
                    next_tick = Instant::now();
                }
                continue;
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if sim.paused() || Instant::now() < next_tick {
            continue;
        }
        match sim.tick() {
            Ok(Some(frame)) => {
                let _ = telemetry.send(Outbound::State(frame));
            }
            Ok(None) => {}
            Err(e) => {
                let _ = telemetry.send(Outbound::Error { message: e.to_string() });
                let _ = sim.handle(Command::Pause);
            }
        }
        let period = Duration::from_secs_f64(1.0 / sim.rate_hz());
        next_tick += period;
        // Do not try to catch up after a long stall.
        let now = Instant::now();
        if next_tick + period * 4 < now {
            next_tick = now;
        }
    }
}

async fn handle_connection(
    stream: TcpStream,
    shared: Arc<Shared>,
) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut sink, mut source) = ws.split();
    let role = if shared.operator_present.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok() {
        Role::Operator
    } else {
        Role::Observer
    };
    let mut telemetry = shared.telemetry.subscribe();
    let hello = match &shared.hello {
        Outbound::Hello { rate_hz, control_dt, target, push_force_n, push_duration_s, .. } => Outbound::Hello {
            role,
            rate_hz: *rate_hz,
            control_dt: *control_dt,
            target: *target,
            push_force_n: *push_force_n,
            push_duration_s: *push_duration_s,
        },
        other => other.clone(),
    };
    let result = async {
        sink.send(Message::text(hello.to_json())).await?;
        if role == Role::Operator {
            submit(&shared.commands, Command::Resume);
        }
        loop {
            tokio::select! {
                out = telemetry.recv() => match out {
                    Ok(msg) => sink.send(Message::text(msg.to_json())).await?,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        let msg = Outbound::Error { message: format!("telemetry lagged, {n} frames dropped") };
                        sink.send(Message::text(msg.to_json())).await?;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                inbound = source.next() => match inbound {
                    None | Some(Err(_)) => break,
                    Some(Ok(Message::Close(_))) => break,
                    Some(Ok(Message::Text(text))) => {
                        let reply = match Command::parse(text.as_str()) {
                            Ok(_) if role == Role::Observer => Some("observers are read-only".to_string()),
                            Ok(cmd) => match shared.commands.try_send(cmd) {
                                Ok(()) => None,
                                Err(TrySendError::Full(_)) => Some("command queue full, retry".to_string()),
                                Err(TrySendError::Disconnected(_)) => break,
                            },
                            Err(e) => Some(e),
                        };
                        if let Some(message) = reply {
                            sink.send(Message::text(Outbound::Error { message }.to_json())).await?;
                        }
                    }
                    Some(Ok(Message::Binary(_))) => {
                        let message = "binary frames are not supported".to_string();
                        sink.send(Message::text(Outbound::Error { message }.to_json())).await?;
                    }
                    Some(Ok(_)) => {}
                },
            }
        }
        Ok(())
    }
    .await;
    if role == Role::Operator {
        let commands = shared.commands.clone();
        let _ = tokio::task::spawn_blocking(move || commands.send(Command::Pause)).await;
        shared.operator_present.store(false, Ordering::SeqCst);
    }
    result
}

/// Queues a command without blocking the async runtime.
fn submit(commands: &SyncSender<Command>, cmd: Command) {
    if let Err(e) = commands.try_send(cmd) {
        log::warn!("dropping {cmd:?}: {e}");
    }
}
