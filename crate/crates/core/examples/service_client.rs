//! Starts the session service in-process, drives one session over HTTP and
//! prints the event stream.

use std::sync::Arc;

use futures::StreamExt;
use ropeweaver::registration::RegistrationParams;
use ropeweaver::service::{serve, ServiceState};
use ropeweaver::sim::SimConfig;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let state = Arc::new(ServiceState::new(SimConfig::default(), RegistrationParams::default(), None)?);
    let (tx, rx) = tokio::sync::oneshot::channel();
    tokio::spawn(serve(state, "127.0.0.1:0".parse()?, move |a| {
        let _ = tx.send(a);
    }));
    let addr = rx.await?;
    let http = reqwest::Client::new();
    let base = format!("http://{addr}");

    let s: Value = http.post(format!("{base}/session")).send().await?.json().await?;
    let id = s["id"].as_str().unwrap_or_default().to_string();
    println!("session {id}, {} nodes", s["nodes"].as_array().map_or(0, Vec::len));
    let r: Value = http
        .post(format!("{base}/session/{id}/action"))
        .json(&json!({"pick": [39.0, 32.0], "theta": 4.71, "length": 12.0}))
        .send()
        .await?
        .json()
        .await?;
    println!("after action: {} crossings", r["crossings"]);
    let k: Value = http.post(format!("{base}/session/{id}/keyframe")).send().await?.json().await?;
    println!("keyframe {k}");
    let bad = http.post(format!("{base}/session/{id}/action")).json(&json!({"pick": [1.0], "theta": 0, "length": 2})).send().await?;
    println!("malformed action -> {} {}", bad.status(), bad.text().await?);
    let r = http.post(format!("{base}/session/{id}/imitate")).send().await?;
    println!("imitate without a model -> {}", r.status());

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session/{id}/events?since=0")).await?;
    for _ in 0..2 {
        if let Some(Ok(m)) = ws.next().await {
            let e: Value = serde_json::from_str(m.to_text()?)?;
            println!("event {} {} cause={}", e["seq"], e["type"], e["payload"]["cause"]);
        }
    }
    http.delete(format!("{base}/session/{id}")).send().await?;
    Ok(())
}
