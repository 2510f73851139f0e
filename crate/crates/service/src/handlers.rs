use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};
use slidecurate_core::api::{
    Health, Heatmap, QueryAccepted, QueryRequest, QueryState, QueryStatus, SlideList, SlideMeta, SlideSummary,
};
use slidecurate_core::catalog::{crop_tile, SlideRecord, TileRef};
use slidecurate_core::retrieval::{query_topn, roi_vectors, similarity_map, QueryOptions, RoiTile};

use crate::error::ApiError;
use crate::state::{AppState, Entry, Inner, Outcome};
use crate::THUMBNAIL_MAX;

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn record<'a>(inner: &'a Inner, id: &str) -> ApiResult<&'a SlideRecord> {
    inner.catalog.get(id).ok_or_else(|| ApiError::not_found(format!("unknown slide {id}")))
}

fn summary(inner: &Inner, r: &SlideRecord) -> SlideSummary {
    let stored = inner.store.get(&r.slide_id);
    let in_store = stored.is_some();
    SlideSummary {
        slide_id: r.slide_id.clone(),
        case_id: r.case_id.clone(),
        lab: r.lab.clone(),
        tissue_type: r.tissue_type.clone(),
        staining: r.staining.clone(),
        staining_category: r.stain_category(),
        diagnosis: if inner.hide_query_diagnoses && !in_store { None } else { r.diagnosis.clone() },
        in_store,
        tile_count: stored.map_or_else(|| inner.tiles.get(&r.slide_id).map_or(0, Vec::len), |s| s.tile_count()),
    }
}

fn grid_of(inner: &Inner, slide_id: &str) -> Vec<RoiTile> {
    match inner.store.get(slide_id) {
        Some(s) => s.coords.iter().map(|&(x, y)| RoiTile { x, y }).collect(),
        None => inner
            .tiles
            .get(slide_id)
            .map(|ts| ts.iter().map(|t| RoiTile { x: t.x, y: t.y }).collect())
            .unwrap_or_default(),
    }
}

fn image_dims(inner: &Inner, r: &SlideRecord) -> ApiResult<(u32, u32)> {
    let path = inner.catalog.image_path(r);
    image::image_dimensions(&path)
        .map_err(|e| ApiError::internal(format!("cannot read {}: {e}", path.display())))
}

fn png(img: &RgbImage) -> ApiResult<Response> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("PNG encoding failed: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(buf.into_inner())).into_response())
}

pub async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok".into(), slides: state.slide_count() })
}

pub async fn not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub async fn list_slides(State(state): State<AppState>) -> Json<SlideList> {
    let inner = &state.inner;
    Json(SlideList { slides: inner.catalog.records().iter().map(|r| summary(inner, r)).collect() })
}

pub async fn slide_meta(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SlideMeta>> {
    blocking(move || {
        let inner = &state.inner;
        let r = record(inner, &id)?;
        let (width, height) = image_dims(inner, r)?;
        Ok(Json(SlideMeta {
            summary: summary(inner, r),
            scanner: r.scanner.clone(),
            prep: r.prep,
            mpp: r.mpp,
            width,
            height,
            tile_size: inner.tile_size,
            tiles: grid_of(inner, &id),
        }))
    })
    .await
}

fn parse_coord(s: &str) -> ApiResult<u32> {
    s.parse().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid tile coordinate {s:?}")))
}

pub async fn tile(
    State(state): State<AppState>,
    Path((id, x, y)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let (x, y) = (parse_coord(&x)?, parse_coord(&y)?);
    blocking(move || {
        let inner = &state.inner;
        record(inner, &id)?;
        let image = inner.catalog.load_image(&id)?;
        let t = TileRef { slide_id: id.clone(), x, y, size: inner.tile_size };
        let px = crop_tile(&image, &t)
            .map_err(|_| ApiError::not_found(format!("tile ({x}, {y}) is outside slide {id}")))?;
        png(&px)
    })
    .await
}

pub async fn thumbnail(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    blocking(move || {
        let inner = &state.inner;
        record(inner, &id)?;
        let image = inner.catalog.load_image(&id)?;
        let (w, h) = image.dimensions();
        let longest = w.max(h);
        if longest <= THUMBNAIL_MAX {
            return png(&image);
        }
        let scale = THUMBNAIL_MAX as f64 / longest as f64;
        let (tw, th) = (((w as f64 * scale).round() as u32).max(1), ((h as f64 * scale).round() as u32).max(1));
        png(&image::imageops::resize(&image, tw, th, FilterType::Triangle))
    })
    .await
}

/// Content hash of the request: identical requests share an id.
pub fn query_id(req: &QueryRequest) -> String {
    let bytes = serde_json::to_vec(req).expect("request serializes");
    Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn run_query(inner: &Inner, req: &QueryRequest, roi: Vec<f64>) -> Outcome {
    let opts = QueryOptions { k: req.k, top_n: req.top_n, include_self: false, with_maps: true };
    match query_topn(&inner.store, &req.slide_id, &roi, &opts) {
        Ok(result) => Outcome::Done { result: Arc::new(result), roi: Arc::new(roi) },
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

fn accepted(id: String, entry: &Entry) -> Response {
    let (code, status) = match entry.outcome {
        Outcome::Pending => (StatusCode::ACCEPTED, QueryState::Pending),
        Outcome::Done { .. } => (StatusCode::OK, QueryState::Done),
        Outcome::Failed(_) => (StatusCode::OK, QueryState::Failed),
    };
    (code, Json(QueryAccepted { query_id: id, status })).into_response()
}

pub async fn submit_query(
    State(state): State<AppState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
    if req.roi.is_empty() {
        return Err(ApiError::unprocessable("ROI must contain at least one tile"));
    }
    if req.k == 0 || req.top_n == 0 {
        return Err(ApiError::unprocessable("k and top_n must be >= 1"));
    }
    let id = query_id(&req);
    if let Some(entry) = state.inner.queries.lock().expect("cache lock").get(&id) {
        return Ok(accepted(id, entry));
    }
    let st = state.clone();
    let r = req.clone();
    let roi = blocking(move || {
        let inner = &st.inner;
        if inner.store.get(&r.slide_id).is_none() && inner.catalog.get(&r.slide_id).is_none() {
            return Err(ApiError::not_found(format!("unknown slide {}", r.slide_id)));
        }
        let source = (&inner.catalog, &inner.tiles, inner.embedder.as_ref());
        Ok(roi_vectors(&inner.store, &r.query_roi(), Some(source))?)
    })
    .await?;

    let inner = &state.inner;
    let candidate_tiles = inner.store.total_tiles() - inner.store.get(&req.slide_id).map_or(0, |s| s.tile_count());
    if candidate_tiles <= inner.sync_tile_limit {
        let st = state.clone();
        let r = req.clone();
        let outcome = blocking(move || Ok(run_query(&st.inner, &r, roi))).await?;
        let entry = Entry { request: req, outcome };
        let resp = accepted(id.clone(), &entry);
        inner.queries.lock().expect("cache lock").insert(id, entry);
        return Ok(resp);
    }

    let entry = Entry { request: req.clone(), outcome: Outcome::Pending };
    let resp = accepted(id.clone(), &entry);
    inner.queries.lock().expect("cache lock").insert(id.clone(), entry);
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = run_query(&st.inner, &req, roi);
        st.inner.queries.lock().expect("cache lock").set_outcome(&id, outcome);
    });
    Ok(resp)
}

pub async fn get_query(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<QueryStatus>> {
    let cache = state.inner.queries.lock().expect("cache lock");
    let entry = cache.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown query {id}")))?;
    Ok(Json(entry.status(&id)))
}

pub async fn heatmap(
    State(state): State<AppState>,
    Path((id, slide_id)): Path<(String, String)>,
) -> ApiResult<Json<Heatmap>> {
    let roi = {
        let cache = state.inner.queries.lock().expect("cache lock");
        let entry = cache.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown query {id}")))?;
        match &entry.outcome {
            Outcome::Done { roi, .. } => roi.clone(),
            Outcome::Pending => return Err(ApiError::new(StatusCode::CONFLICT, format!("query {id} is still running"))),
            Outcome::Failed(e) => return Err(ApiError::new(StatusCode::CONFLICT, format!("query {id} failed: {e}"))),
        }
    };
    blocking(move || {
        let inner = &state.inner;
        let slide = inner
            .store
            .get(&slide_id)
            .ok_or_else(|| ApiError::not_found(format!("slide {slide_id} is not in the store")))?;
        let map = similarity_map(&roi, slide, inner.store.dim())?;
        let ts = inner.tile_size;
        let (w, h) = image_dims(inner, record(inner, &slide_id)?)?;
        let (cols, rows) = (w.div_ceil(ts), h.div_ceil(ts));
        let mut grid = vec![vec![None; cols as usize]; rows as usize];
        for cell in &map.tiles {
            let (c, r) = ((cell.x / ts) as usize, (cell.y / ts) as usize);
            if r < grid.len() && c < grid[r].len() {
                grid[r][c] = Some(cell.similarity);
            }
        }
        Ok(Json(Heatmap { query_id: id, slide_id, tile_size: ts, cols, rows, grid }))
    })
    .await
}
