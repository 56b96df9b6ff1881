//! Starts the editing service on an ephemeral port, submits the fixture,
//! polls the job and downloads both artifacts.
//!
//!     cargo run --example edit_service

use std::collections::BTreeMap;
use std::time::Duration;

use lora_eraser::adapter::LoraAdapter;
use lora_eraser::container::read_container;
use lora_eraser::diagnostics::EditReport;
use lora_eraser::service::{spawn, ServiceConfig};
use lora_eraser::synthetic::{build, SyntheticConfig};
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::Client;
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let paths = build(&SyntheticConfig { layers: 4, ..SyntheticConfig::default() }).write_to(dir.path())?;
    let service = spawn(ServiceConfig {
        bind: "127.0.0.1:0".parse()?,
        spool_dir: dir.path().join("spool"),
        bases: BTreeMap::from([("sd-demo".to_string(), paths.base.clone())]),
        ..ServiceConfig::default()
    })?;
    let url = service.url();
    let http = Client::new();
    println!("bases: {}", http.get(format!("{url}/v1/bases")).send()?.text()?);

    let part = |p: &std::path::Path| -> std::io::Result<Part> { Ok(Part::bytes(std::fs::read(p)?).file_name("upload.safetensors")) };
    let form = Form::new()
        .part("adapter", part(&paths.adapter)?)
        .part("concept", part(&paths.concept)?)
        .part("probes", part(&paths.probes)?)
        .text("config", json!({"base": "sd-demo", "steps": 10, "seed": 1}).to_string());
    let accepted: Value = http.post(format!("{url}/v1/edits")).multipart(form).send()?.json()?;
    let id = accepted["job_id"].as_str().ok_or("no job id")?.to_string();
    println!("submitted {id}");

    let job = loop {
        let job: Value = http.get(format!("{url}/v1/edits/{id}")).send()?.json()?;
        println!("  state {}", job["state"]);
        if job["state"] == "succeeded" || job["state"] == "failed" {
            break job;
        }
        std::thread::sleep(Duration::from_millis(100));
    };
    if job["state"] != "succeeded" {
        return Err(format!("job failed: {}", job["failure"]).into());
    }

    let adapter_bytes = http.get(format!("{url}/v1/edits/{id}/artifacts/adapter")).send()?.bytes()?;
    let adapter = LoraAdapter::from_tensor_map(&read_container(&adapter_bytes)?)?;
    let report = EditReport::from_json(&http.get(format!("{url}/v1/edits/{id}/artifacts/report")).send()?.text()?)?;
    println!(
        "edited {} layers, {} bytes, mean projection shift {:.3}",
        adapter.layers.len(),
        adapter_bytes.len(),
        report.projection_shift_mean
    );
    service.stop()?;
    Ok(())
}
