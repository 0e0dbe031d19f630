use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use topoguide::diffusion::{DenoiserConfig, DenoiserWeights, DiffusionModel, NoiseSchedule, ScheduleConfig};
use topoguide::field_model::{SirenConfig, SirenWeights};
use topoguide::guidance::Models;
use topoguide::latent_fit::LatentStats;
use topoguide::rng::stream_rng;
use topoguide::run_dir::RunDirectory;
use topoguide_cli::service::{resolve_port, router, AppState, DEFAULT_PORT};

fn tiny_models(poison: bool) -> Models {
    let mut rng = stream_rng(7, 0);
    let siren = SirenWeights::init(
        SirenConfig {
            hidden_width: 16,
            hidden_layers: 2,
            latent_dim: 4,
            omega0: 30.0,
        },
        &mut rng,
    )
    .unwrap();
    let mut den = DenoiserWeights::init(
        DenoiserConfig {
            latent_dim: 4,
            width: 16,
            blocks: 1,
            time_dim: 8,
            dropout: 0.0,
        },
        &mut rng,
    )
    .unwrap();
    if poison {
        let idx = den.tensors().iter().position(|(name, _, _)| name == "out.bias").unwrap();
        den.tensors_mut()[idx].iter_mut().for_each(|v| *v = f64::NAN);
    }
    let schedule = NoiseSchedule::new(ScheduleConfig {
        steps: 20,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let stats = LatentStats {
        mean: vec![0.1; 4],
        std: vec![0.5; 4],
    };
    Models::new(siren, DiffusionModel::new(den, schedule, stats).unwrap()).unwrap()
}

async fn call(state: AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn call_raw(state: AppState, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_ok() {
    let tmp = tempfile::tempdir().unwrap();
    let state = AppState::from_run(&RunDirectory::new(tmp.path()));
    let (s, v) = call(state, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));
}

#[tokio::test]
async fn model_endpoints_conflict_on_incomplete_run() {
    let tmp = tempfile::tempdir().unwrap();
    let state = AppState::from_run(&RunDirectory::new(tmp.path()));
    let (s, v) = call(state.clone(), "GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("field network"));
    let (s, _) = call(state, "POST", "/api/sample", Some(json!({"points": []}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn model_info_describes_loaded_models() {
    let (s, v) = call(AppState::new(tiny_models(false)), "GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["latent_dim"], 4);
    assert_eq!(v["schedule"]["steps"], 20);
    assert_eq!(v["siren"]["hidden_width"], 16);
}

#[tokio::test]
async fn sample_rejects_bad_requests_with_field_messages() {
    let state = AppState::new(tiny_models(false));
    let (s, v) = call_raw(state.clone(), "/api/sample", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("malformed"));

    let body = json!({"points": [{"x": 1.5, "y": 0.0}], "t_start": 10});
    let (s, v) = call(state.clone(), "POST", "/api/sample", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("points[0].x"), "{v}");

    let body = json!({"points": [], "count": 0});
    let (s, v) = call(state.clone(), "POST", "/api/sample", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("count"));

    let body = json!({"points": [], "bogus": 1});
    let (s, _) = call(state.clone(), "POST", "/api/sample", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // Guidance window longer than the schedule.
    let body = json!({"points": [{"x": 0.2, "y": 0.1}], "t_start": 600});
    let (s, _) = call(state, "POST", "/api/sample", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn guided_sample_is_deterministic_and_well_formed() {
    let state = AppState::new(tiny_models(false));
    let body = json!({
        "points": [{"x": 0.2, "y": -0.3, "type": "sink", "stability": "stable"}],
        "omega": 1.5, "t_start": 10, "seed": 5, "count": 2, "resolution": 8
    });
    let (s1, v1) = call(state.clone(), "POST", "/api/sample", Some(body.clone())).await;
    let (s2, v2) = call(state, "POST", "/api/sample", Some(body)).await;
    assert_eq!(s1, StatusCode::OK, "{v1}");
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(v1, v2);
    let samples = v1["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0]["seed"], 5);
    assert_eq!(samples[1]["seed"], 6);
    let field = &samples[0]["field"];
    assert_eq!(field["width"], 8);
    assert_eq!(field["height"], 8);
    assert_eq!(field["values"].as_array().unwrap().len(), 8 * 8 * 2);
    assert!(samples[0]["critical_points"].is_array());
    assert_eq!(v1["guidance"]["omega"], 1.5);
}

#[tokio::test]
async fn non_finite_sampling_reports_the_step() {
    let state = AppState::new(tiny_models(true));
    let (s, v) = call(state, "POST", "/api/sample", Some(json!({"points": []}))).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(v["error"].as_str().unwrap().contains("t = 20"), "{v}");
}

#[tokio::test]
async fn extract_finds_the_zero_of_a_linear_field() {
    // v = (x - 0.25, -(y + 0.5)) sampled at cell centres: a saddle.
    let n = 16;
    let mut values = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let x = -1.0 + (c as f64 + 0.5) * 2.0 / n as f64;
            let y = -1.0 + (r as f64 + 0.5) * 2.0 / n as f64;
            values.push(x - 0.25);
            values.push(-(y + 0.5));
        }
    }
    let state = AppState::new(tiny_models(false));
    let body = json!({"field": {"width": n, "height": n, "values": values}});
    let (s, v) = call(state.clone(), "POST", "/api/extract", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let cps = v["critical_points"].as_array().unwrap();
    assert!(!cps.is_empty());
    for cp in cps {
        let (x, y) = (cp["x"].as_f64().unwrap(), cp["y"].as_f64().unwrap());
        assert!((x - 0.25).abs() < 0.01 && (y + 0.5).abs() < 0.01, "{cp}");
        assert_eq!(cp["kind"], "saddle");
    }

    let body = json!({"field": {"width": 4, "height": 4, "values": [0.0, 1.0]}});
    let (s, v) = call(state, "POST", "/api/extract", Some(body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().starts_with("field"));
}

#[test]
fn port_precedence() {
    assert_eq!(resolve_port(Some(9000), Some("7000")).unwrap(), 9000);
    assert_eq!(resolve_port(None, Some("7000")).unwrap(), 7000);
    assert_eq!(resolve_port(None, None).unwrap(), DEFAULT_PORT);
    assert!(resolve_port(None, Some("port")).is_err());
}
