use std::time::Duration;

use crowdnav_core::mapping::read_dataset;
use crowdnav_core::simworld::ScenarioSpec;
use crowdnav_server::{Server, ServerConfig, ServerError};
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Running {
    url: String,
    stop: oneshot::Sender<()>,
    handle: tokio::task::JoinHandle<Result<(), ServerError>>,
}

async fn start(dir: &std::path::Path) -> Running {
    let mut cfg = ServerConfig::new("127.0.0.1:0", ScenarioSpec::clear(1), dir);
    cfg.tick_interval = Duration::from_millis(5);
    let server = Server::bind(cfg).await.unwrap();
    let url = format!("ws://{}", server.local_addr().unwrap());
    let (stop, rx) = oneshot::channel();
    let handle = tokio::spawn(server.run(async {
        let _ = rx.await;
    }));
    Running { url, stop, handle }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

async fn next_json(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server went quiet")
            .unwrap()
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn next_of_type(ws: &mut Ws, ty: &str) -> Value {
    loop {
        let v = next_json(ws).await;
        if v["type"] == ty {
            return v;
        }
        assert_ne!(v["type"], "error", "unexpected error: {v}");
    }
}

async fn wait_states(ws: &mut Ws, n: usize) {
    for _ in 0..n {
        next_of_type(ws, "state").await;
    }
}

#[tokio::test]
async fn recorded_session_matches_acknowledged_count() {
    let dir = tempfile::tempdir().unwrap();
    let srv = start(dir.path()).await;
    let (mut ws, _) = connect_async(&srv.url).await.unwrap();
    let first = next_of_type(&mut ws, "state").await;
    assert_eq!(first["mode"], "teleop");
    assert_eq!(first["walls"].as_array().unwrap().len(), 4);

    send(&mut ws, serde_json::json!({"type": "reset", "scenario": "sparse", "seed": 9})).await;
    send(&mut ws, serde_json::json!({"type": "record", "action": "start"})).await;
    for i in 0..50 {
        let rotation = if i % 10 < 5 { 4.0 } else { -4.0 };
        send(&mut ws, serde_json::json!({"type": "command", "speed": 40.0, "rotation": rotation})).await;
        wait_states(&mut ws, 1).await;
    }
    let s = next_of_type(&mut ws, "state").await;
    assert_eq!(s["recording"], true);
    send(&mut ws, serde_json::json!({"type": "record", "action": "stop"})).await;
    let ack = next_of_type(&mut ws, "ack").await;
    assert_eq!(ack["what"], "record_stop");
    let acked = ack["records"].as_u64().unwrap() as usize;
    assert!(acked >= 20, "{ack}");

    let file = dir.path().join("teleop-0000.crwd");
    let records = read_dataset(&file).unwrap();
    assert_eq!(records.len(), acked);
    assert!(records.iter().any(|r| r.speed == 40.0 && r.rotation == 4.0));

    let _ = srv.stop.send(());
    srv.handle.await.unwrap().unwrap();
}

#[tokio::test]
async fn errors_go_to_the_sender_only() {
    let dir = tempfile::tempdir().unwrap();
    let srv = start(dir.path()).await;
    let (mut a, _) = connect_async(&srv.url).await.unwrap();
    let (mut b, _) = connect_async(&srv.url).await.unwrap();
    wait_states(&mut a, 1).await;
    wait_states(&mut b, 1).await;

    a.send(Message::text("{\"type\":\"warp\"}")).await.unwrap();
    let reply = loop {
        let v = next_json(&mut a).await;
        if v["type"] != "state" {
            break v;
        }
    };
    assert_eq!(reply["type"], "error");
    assert!(reply["detail"].as_str().unwrap().contains("malformed"));

    // b keeps receiving states and nothing else.
    for _ in 0..20 {
        assert_eq!(next_json(&mut b).await["type"], "state");
    }
    send(&mut a, serde_json::json!({"type": "mode", "value": "policy"})).await;
    let reply = loop {
        let v = next_json(&mut a).await;
        if v["type"] != "state" {
            break v;
        }
    };
    assert!(reply["detail"].as_str().unwrap().contains("no network"));
    let _ = srv.stop.send(());
    srv.handle.await.unwrap().unwrap();
}

#[tokio::test]
async fn last_disconnect_flushes_recording() {
    let dir = tempfile::tempdir().unwrap();
    let srv = start(dir.path()).await;
    let (mut ws, _) = connect_async(&srv.url).await.unwrap();
    send(&mut ws, serde_json::json!({"type": "record", "action": "start"})).await;
    send(&mut ws, serde_json::json!({"type": "command", "speed": 30.0, "rotation": 0.0})).await;
    wait_states(&mut ws, 10).await;
    ws.close(None).await.unwrap();
    drop(ws);

    let file = dir.path().join("teleop-0000.crwd");
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while !file.exists() {
        assert!(tokio::time::Instant::now() < deadline, "recording was not flushed");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    // The write may still be in progress when the file appears.
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(!read_dataset(&file).unwrap().is_empty());
    let _ = srv.stop.send(());
    srv.handle.await.unwrap().unwrap();
}

#[tokio::test]
async fn bind_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let err = Server::bind(ServerConfig::new(addr.clone(), ScenarioSpec::clear(1), dir.path()))
        .await
        .err()
        .expect("port is taken");
    assert!(matches!(err, ServerError::Bind { .. }));
    assert!(err.to_string().contains(&addr));
}
