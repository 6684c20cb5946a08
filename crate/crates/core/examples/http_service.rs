//! Drive the HTTP API in-process: ingest, fetch a task, review it, search.
//! Pass `--listen` to serve on 127.0.0.1:8080 instead.

use axum::body::Body;
use axum::http::{Request, StatusCode};
use hitl3d::service::http::{self, AppState, MODERATOR_HEADER};
use hitl3d::simulation::{self, RunConfig, SimClock};
use http_body_util::BodyExt;
use tower::ServiceExt;

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.expect("infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = simulation::generate_corpus(5, 30, 30);
    let population = simulation::mixed(0.2, 0.8);
    let mut clock = SimClock::default();
    let system = simulation::build_system(&corpus, &population, &RunConfig::default(), &mut clock)?;
    let state = AppState::new(system);
    if std::env::args().any(|a| a == "--listen") {
        http::serve(state, ([127, 0, 0, 1], 8080).into()).await?;
        return Ok(());
    }
    let app = http::router(state);

    let doc = r#"{"id":"new-1","title":"nude figure study","description":"boudoir pose","tags":["figurine"]}"#;
    let (status, body) = call(&app, Request::post("/things").body(Body::from(doc))?).await;
    println!("POST /things -> {status} {body}");

    let (status, body) =
        call(&app, Request::get("/moderation/next").header(MODERATOR_HEADER, "s1").body(Body::empty())?).await;
    println!("GET /moderation/next -> {status} task {}", body["task"]["task_id"]);
    if status == StatusCode::OK {
        let task_id = body["task"]["task_id"].as_str().expect("task id");
        let decision = serde_json::json!({
            "task_id": task_id,
            "moderator_id": "s1",
            "case": "agree_finalize",
            "selected_categories": ["sexual_suggestive"],
        });
        let req = Request::post(format!("/moderation/{task_id}/review"))
            .header(MODERATOR_HEADER, "s1")
            .body(Body::from(decision.to_string()))?;
        let (status, body) = call(&app, req).await;
        println!("POST review -> {status} {} examples", body["examples_emitted"]);
    }

    let (status, body) = call(&app, Request::get("/search?q=figure&threshold=0.9").body(Body::empty())?).await;
    println!("GET /search -> {status} total {}", body["total"]);
    let (status, body) = call(&app, Request::get("/examples?threshold=0.5&n=3&seed=1").body(Body::empty())?).await;
    println!("GET /examples -> {status} qualifying {}", body["qualifying"]);
    let (status, body) = call(&app, Request::get("/things/new-1/explanation").body(Body::empty())?).await;
    println!("GET explanation -> {status} flags {}", body["flags"]);
    let (status, _) = call(&app, Request::get("/examples?threshold=2").body(Body::empty())?).await;
    println!("GET /examples?threshold=2 -> {status}");
    Ok(())
}
