#![allow(dead_code)]

use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use kalchas::dataset::{render_page, sample_from_image, GlyphAtlas, RenderStyle, RenderedPage};
use kalchas::imaging::{otsu_binarize, segment_lines, DEFAULT_MIN_GAP, DEFAULT_MIN_HEIGHT};
use kalchas::model::{ArchConfig, CrnnModel};
use kalchas::train::{evaluate, train, TrainConfig};
use kalchas::{Charset, GrayImage, LineBox};
use kalchas_service::{router, AppState, ServiceConfig, SharedState};
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const FIXTURE_LINES: [&str; 4] = ["γνῶθι σεαυτόν.", "μηδὲν ἄγαν.", "χαλεπὰ τὰ καλά.", "ἀρχὴ ἥμισυ παντός."];

pub struct TestApp {
    pub dir: TempDir,
    pub state: SharedState,
    pub router: Router,
}

pub fn config_in(dir: &std::path::Path) -> ServiceConfig {
    ServiceConfig {
        store_dir: dir.join("store"),
        registry_dir: dir.join("models"),
        ..ServiceConfig::default()
    }
}

pub fn app_with(edit: impl FnOnce(&mut ServiceConfig)) -> TestApp {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_in(dir.path());
    edit(&mut cfg);
    let state = AppState::new(cfg).unwrap();
    TestApp {
        router: router(state.clone()),
        state,
        dir,
    }
}

pub fn app() -> TestApp {
    app_with(|_| {})
}

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

impl TestApp {
    pub async fn send(&self, req: Request<Body>) -> Reply {
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, bytes }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let mut b = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                b = b.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        self.send(b.body(body).unwrap()).await
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.call(Method::GET, uri, None).await
    }

    pub async fn upload(&self, filename: &str, bytes: &[u8]) -> Reply {
        self.send(multipart_request(filename, bytes, None)).await
    }

    /// Uploads `img` as PNG and returns `(document_id, page_id)`.
    pub async fn upload_page(&self, img: &GrayImage) -> (String, String) {
        let r = self.upload("page.png", &img.encode_png().unwrap()).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
        let doc_id = r.json()["document_id"].as_str().unwrap().to_string();
        let doc = self.get(&format!("/api/documents/{doc_id}")).await.json();
        let page_id = doc["page_ids"][0].as_str().unwrap().to_string();
        (doc_id, page_id)
    }

    pub async fn segment(&self, page_id: &str, body: Option<Value>) -> Reply {
        self.call(Method::POST, &format!("/api/pages/{page_id}/segment"), body).await
    }

    pub async fn correct(&self, line_id: &str, text: &str) -> Reply {
        self.call(Method::PUT, &format!("/api/lines/{line_id}/text"), Some(serde_json::json!({ "text": text })))
            .await
    }

    pub fn publish(&self, name: &str, model: &CrnnModel<f32>) {
        self.state.registry().publish(name, model).unwrap();
    }
}

pub fn multipart_request(filename: &str, bytes: &[u8], token: Option<&str>) -> Request<Body> {
    let boundary = "kalchas-test-boundary";
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{filename}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let mut b = Request::builder()
        .method(Method::POST)
        .uri("/api/documents")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"));
    if let Some(t) = token {
        b = b.header("authorization", format!("Bearer {t}"));
    }
    b.body(Body::from(body)).unwrap()
}

pub fn fixture_page() -> &'static RenderedPage {
    static PAGE: OnceLock<RenderedPage> = OnceLock::new();
    PAGE.get_or_init(|| render_page(&GlyphAtlas::polytonic(), &FIXTURE_LINES, &RenderStyle::default(), 3, 12).unwrap())
}

/// The boxes automatic segmentation finds on the fixture page.
pub fn fixture_boxes() -> Vec<LineBox> {
    segment_lines(&otsu_binarize(&fixture_page().image), DEFAULT_MIN_GAP, DEFAULT_MIN_HEIGHT)
}

/// A small model overfit on the fixture page's segmented lines.
pub fn overfit_model() -> &'static CrnnModel<f32> {
    static MODEL: OnceLock<CrnnModel<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cs = Charset::polytonic();
        let model = CrnnModel::<f32>::build(ArchConfig::small(cs.size()), cs.clone(), 0).unwrap();
        let page = &fixture_page().image;
        let boxes = fixture_boxes();
        assert_eq!(boxes.len(), FIXTURE_LINES.len());
        let samples: Vec<_> = boxes
            .iter()
            .zip(FIXTURE_LINES)
            .enumerate()
            .map(|(i, (b, t))| {
                sample_from_image(&format!("line{i}"), &page.crop(b).unwrap(), t, &cs, model.timesteps()).unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 2,
            learning_rate: 2e-3,
            eval_every: 50,
            ..TrainConfig::default()
        };
        let out = train(model, &samples, &[], &cfg, &mut |_| {}).unwrap();
        let (_, cer, hyps) = evaluate(&out.model, &samples).unwrap();
        assert_eq!(cer, 0.0, "fixture model did not overfit: {hyps:?}");
        out.model
    })
}

/// A freshly initialized small model over the polytonic charset.
pub fn untrained_model() -> CrnnModel<f32> {
    let cs = Charset::polytonic();
    CrnnModel::build(ArchConfig::small(cs.size()), cs, 7).unwrap()
}

pub fn line_ids(lines: &Value) -> Vec<String> {
    lines
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["id"].as_str().unwrap().to_string())
        .collect()
}
