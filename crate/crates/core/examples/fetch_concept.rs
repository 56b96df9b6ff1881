//! Builds a concept bundle from an embedding service. A toy encoder is served
//! in-process so the example runs offline.
//!
//!     cargo run --example fetch_concept -- [concept] [k]

use axum::routing::post;
use axum::{Json, Router};
use lora_eraser::concept::{fetch_concept_bundle, load_concept_spec, EmbeddingClient};
use serde_json::{json, Value};

/// 4 tokens × 8 features derived from the text bytes.
fn toy_embedding(text: &str) -> Vec<Vec<f64>> {
    let h = text.bytes().fold(0.3f64, |acc, b| (acc * 31.0 + b as f64) % 1.0e3);
    (0..4).map(|t| (0..8).map(|f| ((h + t as f64) * (f as f64 + 1.0)).sin()).collect()).collect()
}

async fn expand(Json(body): Json<Value>) -> Json<Value> {
    let concept = body["concept"].as_str().unwrap_or_default();
    let k = body["k"].as_u64().unwrap_or(1) as usize;
    let synonyms: Vec<String> = (0..k).map(|i| format!("{concept} variant {i}")).collect();
    // one antonym short, so the last slot falls back to the empty prompt
    let antonyms: Vec<String> = (0..k.saturating_sub(1)).map(|i| format!("not {concept} {i}")).collect();
    Json(json!({ "synonyms": synonyms, "antonyms": antonyms }))
}

async fn embed(Json(body): Json<Value>) -> Json<Value> {
    let texts = body["texts"].as_array().cloned().unwrap_or_default();
    let embeddings: Vec<_> = texts.iter().map(|t| toy_embedding(t.as_str().unwrap_or_default())).collect();
    Json(json!({ "embeddings": embeddings, "shape": [4, 8] }))
}

fn main() -> lora_eraser::Result<()> {
    let mut args = std::env::args().skip(1);
    let concept = args.next().unwrap_or_else(|| "nudity".to_string());
    let k = args.next().map_or(3, |k| k.parse().expect("integer k"));

    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    let app = Router::new().route("/v1/expand", post(expand)).route("/v1/embed", post(embed));
    runtime.spawn(async move { axum::serve(listener, app).await });

    let dir = tempfile::tempdir()?;
    let out = dir.path().join("concept.safetensors");
    let client = EmbeddingClient::new(format!("http://{addr}")).with_encoder_id("toy-encoder");
    let spec = fetch_concept_bundle(&client, &concept, k, Some(&out))?;
    println!("concept `{}`: K = {}, embeddings {:?}", spec.concept_label, spec.k(), spec.embedding_shape());
    for i in 0..spec.k() {
        let anchor = if spec.antonyms[i].is_some() { "antonym" } else { "neutral" };
        println!("  pair {i}: anchor = {anchor}");
    }
    let reloaded = load_concept_spec(&out)?;
    let stored_error = reloaded
        .synonyms
        .iter()
        .zip(&spec.synonyms)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    println!("bundle written to {} as {:?}; reload differs by at most {stored_error:.1e}", out.display(), reloaded.dtype);
    Ok(())
}
