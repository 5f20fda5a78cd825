//! Start the inference service with one toy model on 127.0.0.1:8088, send it an
//! /analyze request, print the answer and shut down.
//!
//! Pass `--forever` to keep it running for the UI.

use std::sync::Arc;

use base64::Engine;
use pathprobe::cohort::FineLabel;
use pathprobe::encoder::{attach_head, toy_encoder, Classifier, Condition, NUM_CLASSES};
use pathprobe::serve::{router, AnalyzeResponse, AppState};
use pathprobe::synthetic::SyntheticStore;

#[tokio::main]
async fn main() {
    let state = Arc::new(AppState::new(None, 16 * 1024 * 1024));
    let model = Classifier::new(
        Box::new(toy_encoder(8, 1).expect("encoder")),
        attach_head(8, NUM_CLASSES, 1).expect("head"),
    )
    .expect("classifier");
    state.insert("toy(LP)", model, Condition::Lp);

    let listener = tokio::net::TcpListener::bind("127.0.0.1:8088").await.expect("bind");
    let app = router(state);
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    if std::env::args().any(|a| a == "--forever") {
        println!("listening on http://127.0.0.1:8088");
        let _ = server.await;
        return;
    }

    let tile = SyntheticStore::new(640, 2).render(FineLabel::L, "demo", "t0");
    let mut png = std::io::Cursor::new(Vec::new());
    tile.write_to(&mut png, image::ImageFormat::Png).expect("encode");
    let body = serde_json::json!({
        "image": base64::engine::general_purpose::STANDARD.encode(png.into_inner()),
        "microns_per_pixel": 0.5,
        "model_id": "toy(LP)",
        "want_saliency": true,
    });

    // A bare HTTP/1.1 exchange keeps the example free of a client dependency.
    let payload = body.to_string();
    let raw = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut conn = std::net::TcpStream::connect("127.0.0.1:8088").expect("connect");
        write!(
            conn,
            "POST /analyze HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
            payload.len()
        )
        .expect("send");
        let mut raw = Vec::new();
        conn.read_to_end(&mut raw).expect("read");
        raw
    })
    .await
    .expect("client thread");
    let text = String::from_utf8_lossy(&raw);
    let (status, json) = text.split_once("\r\n\r\n").expect("http response");
    println!("{}", status.lines().next().unwrap_or_default());
    let resp: AnalyzeResponse = serde_json::from_str(json).expect("json body");
    println!("fine   {:?}", resp.fine_probs.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    println!("coarse {:?}", resp.coarse_probs.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    println!("predicted {}, {:.1} ms, saliency png {} bytes", resp.predicted, resp.latency_ms, resp.saliency.map_or(0, |s| s.len()));
    server.abort();
}
