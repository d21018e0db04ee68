//! WebSocket transport for a tele-operation [`Session`].
//!
//! One task owns the session and its tick clock. Connection tasks forward
//! client frames to it; replies go back to the sender only, state updates
//! go to every client.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use crowdnav_core::neuralnet::NetworkParams;
use crowdnav_core::simworld::{ScenarioSpec, SimError};
use crowdnav_core::teleop::{Session, TICK_RATE_HZ};
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot start session: {0}")]
    Session(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: String,
    pub scenario: ScenarioSpec,
    pub params: Option<NetworkParams<f32>>,
    pub record_dir: PathBuf,
    /// Wall-clock time between ticks. The simulated step is fixed.
    pub tick_interval: Duration,
}

impl ServerConfig {
    pub fn new(addr: impl Into<String>, scenario: ScenarioSpec, record_dir: impl Into<PathBuf>) -> Self {
        Self {
            addr: addr.into(),
            scenario,
            params: None,
            record_dir: record_dir.into(),
            tick_interval: Duration::from_secs_f64(1.0 / TICK_RATE_HZ),
        }
    }
}

type ClientId = u64;

enum Event {
    Joined(ClientId, mpsc::UnboundedSender<String>),
    Text(ClientId, String),
    Left(ClientId),
}

pub struct Server {
    listener: TcpListener,
    session: Session,
    tick_interval: Duration,
}

impl Server {
    /// Creates the session and binds the listener. Nothing ticks until [`Server::run`].
    pub async fn bind(cfg: ServerConfig) -> Result<Self, ServerError> {
        let session = Session::new(cfg.scenario, cfg.params, cfg.record_dir)?;
        let listener = TcpListener::bind(&cfg.addr)
            .await
            .map_err(|source| ServerError::Bind { addr: cfg.addr.clone(), source })?;
        Ok(Self { listener, session, tick_interval: cfg.tick_interval })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves. An active recording is flushed
    /// before returning.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> Result<(), ServerError> {
        let Server { listener, mut session, tick_interval } = self;
        let (events_tx, mut events) = mpsc::unbounded_channel();
        let mut clients: HashMap<ClientId, mpsc::UnboundedSender<String>> = HashMap::new();
        let mut next_id: ClientId = 0;
        let mut clock = tokio::time::interval(tick_interval);
        clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tokio::pin!(shutdown);

        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                accepted = listener.accept() => {
                    let Ok((stream, _)) = accepted else { continue };
                    tokio::spawn(serve_connection(stream, next_id, events_tx.clone()));
                    next_id += 1;
                }
                Some(event) = events.recv() => match event {
                    Event::Joined(id, tx) => {
                        let _ = tx.send(session.state_message().to_json());
                        clients.insert(id, tx);
                    }
                    Event::Text(id, text) => {
                        let replies = session.apply_text(&text);
                        if let Some(tx) = clients.get(&id) {
                            for r in replies {
                                let _ = tx.send(r.to_json());
                            }
                        }
                    }
                    Event::Left(id) => {
                        clients.remove(&id);
                        if clients.is_empty() {
                            session.on_disconnect();
                        }
                    }
                },
                _ = clock.tick() => {
                    let state = session.tick().to_json();
                    clients.retain(|_, tx| tx.send(state.clone()).is_ok());
                }
            }
        }
        session.on_disconnect();
        Ok(())
    }
}

async fn serve_connection(stream: TcpStream, id: ClientId, events: mpsc::UnboundedSender<Event>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else { return };
    let (mut sink, mut source) = ws.split();
    let (tx, mut outbox) = mpsc::unbounded_channel::<String>();
    if events.send(Event::Joined(id, tx)).is_err() {
        return;
    }
    let writer = async {
        while let Some(text) = outbox.recv().await {
            if sink.send(Message::text(text)).await.is_err() {
                break;
            }
        }
    };
    let reader = async {
        while let Some(Ok(msg)) = source.next().await {
            match msg {
                Message::Text(t) => {
                    if events.send(Event::Text(id, t.as_str().to_owned())).is_err() {
                        break;
                    }
                }
                // Binary frames are not part of the protocol; the empty text
                // earns the sender a malformed-message error.
                Message::Binary(_) => {
                    let _ = events.send(Event::Text(id, String::new()));
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    };
    tokio::select! {
        _ = writer => {}
        _ = reader => {}
    }
    let _ = events.send(Event::Left(id));
}
