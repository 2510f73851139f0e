use std::collections::HashSet;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use serde::de::DeserializeOwned;
use slidecurate_core::api::{Health, Heatmap, QueryAccepted, QueryRequest, QueryState, QueryStatus, SlideList, SlideMeta};
use slidecurate_core::catalog::{tiles_by_slide, Catalog, MaskParams, TileParams, TileRef};
use slidecurate_core::pipeline::ingest_tiles;
use slidecurate_core::retrieval::{
    build_store, cosine, query_topn, roi_vectors, EmbeddingStore, FeatureEmbedder, QueryOptions, QueryRoi,
    SlideEmbeddings,
};
use slidecurate_core::synth::{generate, SynthParams};
use slidecurate_service::{router, serve, AppState, ServiceConfig};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    catalog: Catalog,
    store: EmbeddingStore,
    tiles: Vec<TileRef>,
    queries: Vec<QueryRoi>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams { slides: 8, diagnoses: 2, labs: 2, width: 768, height: 768, ihc_every: 0, queries_per_diagnosis: 1, ..Default::default() };
    let corpus = generate(&params, dir.path()).unwrap();
    let tiles = ingest_tiles(&corpus.catalog, &MaskParams::default(), &TileParams::default()).unwrap();
    let held: HashSet<String> = corpus.query_rois.iter().map(|q| q.slide_id.clone()).collect();
    let store = build_store(&corpus.catalog, &tiles_by_slide(&tiles), &FeatureEmbedder::default(), &held).unwrap();
    Fixture { _dir: dir, catalog: corpus.catalog, store, tiles, queries: corpus.query_rois }
}

fn config() -> ServiceConfig {
    ServiceConfig::new("unused", "unused")
}

fn state(f: &Fixture, cfg: &ServiceConfig) -> AppState {
    AppState::new(f.catalog.clone(), f.store.clone(), &f.tiles, Box::new(FeatureEmbedder::default()), cfg).unwrap()
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let resp = app.clone().oneshot(req.body(body.map_or_else(Body::empty, Body::from)).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get_json<T: DeserializeOwned>(app: &axum::Router, uri: &str) -> T {
    let (status, body) = call(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn request_body(q: &QueryRoi, k: usize) -> String {
    serde_json::to_string(&QueryRequest { k, ..QueryRequest::new(q.clone()) }).unwrap()
}

fn error_message(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_and_listing() {
    let f = fixture();
    let app = router(state(&f, &config()));
    let (status, body) = call(&app, Method::GET, "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(body).unwrap(), r#"{"status":"ok","slides":8}"#);

    let list: SlideList = get_json(&app, "/api/slides").await;
    assert_eq!(list.slides.len(), 8);
    assert!(list.slides.iter().all(|s| s.diagnosis.is_some()));

    let hidden = router(state(&f, &ServiceConfig { hide_query_diagnoses: true, ..config() }));
    let list: SlideList = get_json(&hidden, "/api/slides").await;
    for s in &list.slides {
        assert_eq!(s.diagnosis.is_none(), !s.in_store, "{}", s.slide_id);
    }
    assert_eq!(list.slides.iter().filter(|s| !s.in_store).count(), f.queries.len());

    let meta: SlideMeta = get_json(&app, "/api/slides/S0000/meta").await;
    assert_eq!((meta.width, meta.height, meta.tile_size), (768, 768, 256));
    assert!(!meta.tiles.is_empty());
    let (status, body) = call(&app, Method::GET, "/api/slides/nope/meta", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(error_message(&body).contains("nope"));
    let (status, _) = call(&app, Method::GET, "/api/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tiles_and_thumbnails_are_png() {
    let f = fixture();
    let app = router(state(&f, &config()));
    let (status, body) = call(&app, Method::GET, "/api/slides/S0001/tiles/256/256", None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory(&body).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));
    let (status, body) = call(&app, Method::GET, "/api/slides/S0001/thumbnail", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(image::load_from_memory(&body).unwrap().width() <= 1024);
    let (status, _) = call(&app, Method::GET, "/api/slides/S0001/tiles/4096/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, Method::GET, "/api/slides/S0001/tiles/a/0", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    error_message(&body);
}

#[tokio::test]
async fn query_errors() {
    let f = fixture();
    let app = router(state(&f, &config()));
    let empty = r#"{"slide_id":"S0000","roi":[]}"#.to_string();
    let (status, body) = call(&app, Method::POST, "/api/queries", Some(empty)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_message(&body).contains("ROI"));

    let unknown = r#"{"slide_id":"nope","roi":[{"x":0,"y":0}]}"#.to_string();
    let (status, _) = call(&app, Method::POST, "/api/queries", Some(unknown)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let outside = r#"{"slide_id":"S0002","roi":[{"x":9999,"y":0}]}"#.to_string();
    let (status, body) = call(&app, Method::POST, "/api/queries", Some(outside)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_message(&body).contains("grid"));

    let (status, body) = call(&app, Method::POST, "/api/queries", Some("{".into())).await;
    assert!(status.is_client_error());
    error_message(&body);

    let (status, _) = call(&app, Method::GET, "/api/queries/ffff", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn query_matches_engine_and_heatmap() {
    let f = fixture();
    let app = router(state(&f, &config()));
    let q = &f.queries[0];
    let (status, body) = call(&app, Method::POST, "/api/queries", Some(request_body(q, 5))).await;
    assert_eq!(status, StatusCode::OK);
    let accepted: QueryAccepted = serde_json::from_slice(&body).unwrap();
    assert_eq!(accepted.status, QueryState::Done);
    let status: QueryStatus = get_json(&app, &format!("/api/queries/{}", accepted.query_id)).await;
    let result = status.result.unwrap();

    let by_slide = tiles_by_slide(&f.tiles);
    let embedder = FeatureEmbedder::default();
    let v = roi_vectors(&f.store, q, Some((&f.catalog, &by_slide, &embedder))).unwrap();
    let opts = QueryOptions { with_maps: true, ..Default::default() };
    assert_eq!(result, query_topn(&f.store, &q.slide_id, &v, &opts).unwrap());
    assert!(result.entries.iter().all(|e| e.slide_id != q.slide_id));

    let top = &result.entries[0].slide_id;
    let hm: Heatmap = get_json(&app, &format!("/api/queries/{}/heatmap/{top}", accepted.query_id)).await;
    assert_eq!((hm.cols, hm.rows), (3, 3));
    let slide = f.store.get(top).unwrap();
    let (x, y) = slide.coords[0];
    let expect = (0..v.len() / 36)
        .map(|i| cosine(&v[i * 36..(i + 1) * 36], &slide.vectors_f64()[..36]))
        .fold(f64::NEG_INFINITY, f64::max);
    let got = hm.grid[(y / 256) as usize][(x / 256) as usize].unwrap();
    assert!((got - expect).abs() < 1e-12);
    let (status, _) = call(&app, Method::GET, &format!("/api/queries/{}/heatmap/nope", accepted.query_id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn duplicate_slide_ranks_first() {
    let f = fixture();
    let source = f.store.slides()[0].clone();
    let mut slides = f.store.slides().to_vec();
    slides.push(SlideEmbeddings { slide_id: "DUP".into(), ..source.clone() });
    let store = EmbeddingStore::new(f.store.dim(), slides).unwrap();
    let mut records = f.catalog.records().to_vec();
    let mut dup = f.catalog.get(&source.slide_id).unwrap().clone();
    dup.slide_id = "DUP".into();
    records.push(dup);
    let catalog = Catalog::new(records, f.catalog.base_dir()).unwrap();
    let st = AppState::new(catalog, store, &f.tiles, Box::new(FeatureEmbedder::default()), &config()).unwrap();
    let app = router(st);
    let (x, y) = source.coords[0];
    let body = format!(r#"{{"slide_id":"{}","roi":[{{"x":{x},"y":{y}}}],"k":1}}"#, source.slide_id);
    let (_, body) = call(&app, Method::POST, "/api/queries", Some(body)).await;
    let accepted: QueryAccepted = serde_json::from_slice(&body).unwrap();
    let status: QueryStatus = get_json(&app, &format!("/api/queries/{}", accepted.query_id)).await;
    let top = &status.result.unwrap().entries[0];
    assert_eq!((top.slide_id.as_str(), top.score), ("DUP", 1.0));
}

#[tokio::test]
async fn background_queries_are_polled() {
    let f = fixture();
    let app = router(state(&f, &ServiceConfig { sync_tile_limit: 0, ..config() }));
    let (status, body) = call(&app, Method::POST, "/api/queries", Some(request_body(&f.queries[0], 5))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let accepted: QueryAccepted = serde_json::from_slice(&body).unwrap();
    assert_eq!(accepted.status, QueryState::Pending);
    for _ in 0..500 {
        let s: QueryStatus = get_json(&app, &format!("/api/queries/{}", accepted.query_id)).await;
        if s.status == QueryState::Done {
            assert_eq!(s.result.unwrap().entries.len(), f.store.len());
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("query never finished");
}

async fn replay(f: &Fixture, log: &[(Method, String, Option<String>)]) -> Vec<(StatusCode, Vec<u8>)> {
    let app = router(state(f, &config()));
    let mut out = Vec::new();
    for (m, uri, body) in log {
        out.push(call(&app, m.clone(), uri, body.clone()).await);
    }
    out
}

#[tokio::test]
async fn replayed_requests_give_identical_bodies() {
    let f = fixture();
    let mut log = vec![
        (Method::GET, "/api/health".to_string(), None),
        (Method::GET, "/api/slides".to_string(), None),
        (Method::POST, "/api/queries".to_string(), Some(r#"{"slide_id":"S0000","roi":[]}"#.to_string())),
    ];
    for q in &f.queries {
        log.push((Method::POST, "/api/queries".into(), Some(request_body(q, 3))));
    }
    let first = replay(&f, &log).await;
    for (_, body) in first.iter().skip(3) {
        let id = serde_json::from_slice::<QueryAccepted>(body).unwrap().query_id;
        log.push((Method::GET, format!("/api/queries/{id}"), None));
        log.push((Method::GET, format!("/api/queries/{id}/heatmap/{}", f.store.slides()[0].slide_id), None));
    }
    let a = replay(&f, &log).await;
    let b = replay(&f, &log).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn concurrent_identical_queries_agree() {
    let f = fixture();
    let app = router(state(&f, &config()));
    let body = request_body(&f.queries[1], 2);
    let calls = (0..8).map(|_| {
        let app = app.clone();
        let body = body.clone();
        tokio::spawn(async move { call(&app, Method::POST, "/api/queries", Some(body)).await })
    });
    let mut ids = HashSet::new();
    for c in calls {
        let (status, body) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        ids.insert(serde_json::from_slice::<QueryAccepted>(&body).unwrap().query_id);
    }
    assert_eq!(ids.len(), 1);
}

#[tokio::test]
async fn client_over_a_socket() {
    let f = fixture();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(state(&f, &config()), listener, async {
        let _ = rx.await;
    }));
    let client = slidecurate_client::Client::new(format!("http://{addr}/"));
    let health: Health = client.health().await.unwrap();
    assert_eq!((health.status.as_str(), health.slides), ("ok", 8));
    assert_eq!(client.slides().await.unwrap().slides.len(), 8);
    assert!(!client.tile("S0000", 256, 256).await.unwrap().is_empty());
    let done = client.run_query(&QueryRequest::new(f.queries[0].clone()), Duration::from_secs(10)).await.unwrap();
    let result = done.result.unwrap();
    let hm = client.heatmap(&done.query_id, &result.entries[0].slide_id).await.unwrap();
    assert_eq!(hm.slide_id, result.entries[0].slide_id);
    let err = client.slide_meta("nope").await.unwrap_err();
    assert_eq!(err.status(), Some(reqwest::StatusCode::NOT_FOUND));
    assert!(err.to_string().contains("nope"));
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
