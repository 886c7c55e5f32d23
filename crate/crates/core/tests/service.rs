mod common;

use std::sync::Arc;

use lumen::codec::ImageTensor;
use lumen::config::ServeConfig;
use lumen::instruct::HeuristicDescriber;
use lumen::service::{AttentionResponse, EnhanceResponse, Server};
use serde_json::{json, Value};

struct Fixture {
    server: Option<Server>,
    base: String,
    hash: String,
    client: reqwest::blocking::Client,
}

impl Fixture {
    fn start() -> Self {
        let bundle = common::tiny_bundle();
        let hash = bundle.checkpoint_hash();
        let cfg = ServeConfig {
            bind: "127.0.0.1:0".into(),
            queue_depth: 2,
            max_side: 32,
        };
        let server = Server::start(bundle, Arc::new(HeuristicDescriber), &cfg).unwrap();
        Self {
            base: format!("http://{}", server.addr),
            server: Some(server),
            hash,
            client: reqwest::blocking::Client::new(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(body).send().unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().unwrap();
        (r.status().as_u16(), r.json().unwrap())
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        if let Some(s) = self.server.take() {
            s.stop().unwrap();
        }
    }
}

fn image_b64(w: usize, h: usize) -> String {
    ImageTensor::from_fn(w, h, |c, y, x| 0.05 + 0.01 * ((c + y + x) % 7) as f32)
        .to_png_b64()
        .unwrap()
}

#[test]
fn health_reports_checkpoint() {
    let f = Fixture::start();
    let (status, body) = f.get("/health");
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["checkpoint_hash"], f.hash.as_str());
}

#[test]
fn enhance_two_passes_then_attention() {
    let f = Fixture::start();
    let (status, body) = f.post(
        "/enhance",
        &json!({ "image_b64": image_b64(16, 16), "instruction": "soft light from the left.", "k": 2, "seed": 3 }),
    );
    assert_eq!(status, 200, "{body}");
    let resp: EnhanceResponse = serde_json::from_value(body).unwrap();
    assert_eq!(resp.iterations.len(), 2);
    assert_eq!(resp.iterations[0].instruction_used, "soft light from the left.");
    assert!(!resp.iterations[1].instruction_used.is_empty());
    assert_eq!(resp.checkpoint_hash, f.hash);
    assert_eq!(resp.seed, 3);
    assert!(resp.warning.is_none());
    for it in &resp.iterations {
        let img = ImageTensor::from_png_b64(&it.image_b64).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
        assert!(it.psnr_proxy_stats.mean_luma.is_finite());
    }

    // Same request, same seed: same pixels.
    let (_, again) = f.post(
        "/enhance",
        &json!({ "image_b64": image_b64(16, 16), "instruction": "soft light from the left.", "k": 2, "seed": 3 }),
    );
    let again: EnhanceResponse = serde_json::from_value(again).unwrap();
    assert_ne!(again.job_id, resp.job_id);
    assert_eq!(again.iterations[1].image_b64, resp.iterations[1].image_b64);

    for iteration in [1, 2] {
        let (status, body) = f.get(&format!("/attention/{}/{iteration}", resp.job_id));
        assert_eq!(status, 200, "{body}");
        let att: AttentionResponse = serde_json::from_value(body).unwrap();
        assert_eq!(att.iteration, iteration);
        assert!(!att.tokens.is_empty());
        assert!(!att.maps.is_empty());
        for m in &att.maps {
            assert_eq!(m.rows.len(), att.tokens.len());
            for row in &m.rows {
                assert_eq!(row.len(), m.height * m.width);
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-3, "row sums to {s}");
            }
            let heat = ImageTensor::from_png_b64(&m.heatmap_b64).unwrap();
            assert_eq!((heat.width(), heat.height()), (16, 16));
        }
    }
}

#[test]
fn errors_have_status_and_message() {
    let f = Fixture::start();
    let r = f
        .client
        .post(format!("{}/enhance", f.base))
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let body: Value = r.json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("malformed"));

    let (status, _) = f.post("/enhance", &json!({ "image_b64": image_b64(16, 16), "instruction": "", "bogus": 1 }));
    assert_eq!(status, 400);
    let (status, _) = f.post("/enhance", &json!({ "image_b64": "!!!", "instruction": "" }));
    assert_eq!(status, 400);
    let (status, _) = f.post("/enhance", &json!({ "image_b64": image_b64(16, 16), "instruction": "", "k": 0 }));
    assert_eq!(status, 400);
    let (status, body) = f.post("/enhance", &json!({ "image_b64": image_b64(3, 3), "instruction": "" }));
    assert_eq!(status, 400, "{body}");

    let (status, body) = f.get("/attention/job-999999/1");
    assert_eq!(status, 404);
    assert!(body["error"].is_string());
}

#[test]
fn oversized_and_unaligned_inputs_are_cropped() {
    let f = Fixture::start();
    let (status, body) = f.post("/enhance", &json!({ "image_b64": image_b64(50, 21), "instruction": "", "k": 1 }));
    assert_eq!(status, 200, "{body}");
    let resp: EnhanceResponse = serde_json::from_value(body).unwrap();
    assert!(resp.warning.as_deref().unwrap().contains("center-cropped to 32x16"));
    let img = ImageTensor::from_png_b64(&resp.iterations[0].image_b64).unwrap();
    assert_eq!((img.width(), img.height()), (32, 16));
}

#[test]
fn instructions_endpoint_describes_image() {
    let f = Fixture::start();
    let (status, body) = f.post("/instructions", &json!({ "image_b64": image_b64(16, 16) }));
    assert_eq!(status, 200, "{body}");
    assert!(!body["instruction"].as_str().unwrap().is_empty());
    assert_eq!(body["source"], "heuristic");
}
