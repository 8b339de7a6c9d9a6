mod common;

use std::io::Cursor;

use axum::http::{Method, StatusCode};
use common::*;
use image::codecs::jpeg::JpegEncoder;
use kalchas::GrayImage;
use lopdf::{dictionary, Document, Object, Stream};
use serde_json::json;

/// A page-sized gray image whose pixel at (x, y) encodes `tag`.
fn tagged_image(width: usize, height: usize, tag: u8) -> GrayImage {
    let mut img = GrayImage::filled(width, height, 255);
    for x in 0..width / 2 {
        img.set(x, height / 2, tag);
    }
    img
}

fn gray_stream(img: &GrayImage) -> Stream {
    let mut s = Stream::new(
        dictionary! {
            "Type" => "XObject",
            "Subtype" => "Image",
            "Width" => img.width() as i64,
            "Height" => img.height() as i64,
            "ColorSpace" => "DeviceGray",
            "BitsPerComponent" => 8,
        },
        img.data().to_vec(),
    );
    s.compress().unwrap();
    s
}

fn rgb_stream(img: &GrayImage) -> Stream {
    let data: Vec<u8> = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    Stream::new(
        dictionary! {
            "Type" => "XObject",
            "Subtype" => "Image",
            "Width" => img.width() as i64,
            "Height" => img.height() as i64,
            "ColorSpace" => "DeviceRGB",
            "BitsPerComponent" => 8,
        },
        data,
    )
}

fn jpeg_stream(img: &GrayImage) -> Stream {
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut bytes), 100)
        .encode(img.data(), img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
        .unwrap();
    Stream::new(
        dictionary! {
            "Type" => "XObject",
            "Subtype" => "Image",
            "Width" => img.width() as i64,
            "Height" => img.height() as i64,
            "ColorSpace" => "DeviceGray",
            "BitsPerComponent" => 8,
            "Filter" => "DCTDecode",
        },
        bytes,
    )
}

/// Builds a PDF with one page per entry: an optional image XObject plus a
/// content stream.
fn build_pdf(pages: Vec<Option<Stream>>) -> Vec<u8> {
    let mut doc = Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let mut kids = Vec::new();
    for image in pages {
        let (resources, content) = match image {
            Some(img) => {
                let id = doc.add_object(img);
                (dictionary! { "XObject" => dictionary! { "Im0" => id } }, b"q 100 0 0 100 0 0 cm /Im0 Do Q".to_vec())
            }
            None => (dictionary! {}, b"0 0 m 100 100 l S".to_vec()),
        };
        let content_id = doc.add_object(Stream::new(dictionary! {}, content));
        let page_id = doc.add_object(dictionary! {
            "Type" => "Page",
            "Parent" => pages_id,
            "MediaBox" => vec![0.into(), 0.into(), 100.into(), 100.into()],
            "Contents" => content_id,
            "Resources" => resources,
        });
        kids.push(Object::Reference(page_id));
    }
    let count = kids.len() as i64;
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! { "Type" => "Pages", "Kids" => kids, "Count" => count }),
    );
    let catalog = doc.add_object(dictionary! { "Type" => "Catalog", "Pages" => pages_id });
    doc.trailer.set("Root", catalog);
    let mut out = Vec::new();
    doc.save_to(&mut out).unwrap();
    out
}

async fn page_images(app: &TestApp, doc_id: &str) -> Vec<GrayImage> {
    let doc = app.get(&format!("/api/documents/{doc_id}")).await.json();
    let mut out = Vec::new();
    for pid in doc["page_ids"].as_array().unwrap() {
        let r = app.get(&format!("/api/pages/{}/image", pid.as_str().unwrap())).await;
        assert_eq!(r.status, StatusCode::OK);
        out.push(kalchas::imaging::decode_gray(&r.bytes).unwrap());
    }
    out
}

#[tokio::test]
async fn single_png_is_one_page() {
    let app = app();
    let img = tagged_image(120, 60, 0);
    let r = app.upload("scan.png", &img.encode_png().unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let body = r.json();
    assert_eq!(body["n_pages"], 1);
    let doc_id = body["document_id"].as_str().unwrap();
    let doc = app.get(&format!("/api/documents/{doc_id}")).await.json();
    assert_eq!(doc["filename"], "scan.png");
    assert_eq!(doc["media_type"], "image/png");
    assert!(doc["created_at"].as_str().unwrap().ends_with('Z'));
    assert_eq!(page_images(&app, doc_id).await, vec![img]);
}

#[tokio::test]
async fn jpeg_and_tiff_uploads_are_accepted() {
    let app = app();
    let img = tagged_image(64, 32, 0);
    let mut tiff = Vec::new();
    img.to_image().write_to(&mut Cursor::new(&mut tiff), image::ImageFormat::Tiff).unwrap();
    let r = app.upload("scan.tif", &tiff).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let doc_id = r.json()["document_id"].as_str().unwrap().to_string();
    assert_eq!(page_images(&app, &doc_id).await, vec![img.clone()]);
    let mut jpeg = Vec::new();
    img.to_image().write_to(&mut Cursor::new(&mut jpeg), image::ImageFormat::Jpeg).unwrap();
    let r = app.upload("scan.jpg", &jpeg).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let doc = app.get(&format!("/api/documents/{}", r.json()["document_id"].as_str().unwrap())).await.json();
    assert_eq!(doc["media_type"], "image/jpeg");
}

#[tokio::test]
async fn pdf_with_three_scans_yields_three_pages_in_order() {
    let app = app();
    let imgs = [tagged_image(90, 40, 0), tagged_image(70, 50, 64), tagged_image(50, 30, 0)];
    let pdf = build_pdf(vec![Some(gray_stream(&imgs[0])), Some(jpeg_stream(&imgs[1])), Some(rgb_stream(&imgs[2]))]);
    let r = app.upload("book.pdf", &pdf).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    assert_eq!(r.json()["n_pages"], 3);
    let got = page_images(&app, r.json()["document_id"].as_str().unwrap()).await;
    let dims: Vec<_> = got.iter().map(|g| (g.width(), g.height())).collect();
    assert_eq!(dims, vec![(90, 40), (70, 50), (50, 30)]);
    assert_eq!(got[0], imgs[0]);
    assert_eq!(got[2], imgs[2]);
    // The JPEG page is lossy; its marked row must still be dark.
    assert!(got[1].get(10, 25) < 110 && got[1].get(60, 5) > 200);
}

#[tokio::test]
async fn vector_only_pdf_is_rejected_with_explanation() {
    let app = app();
    let r = app.upload("vector.pdf", &build_pdf(vec![None, None])).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let msg = r.json()["error"].as_str().unwrap().to_string();
    assert!(msg.contains("raster"), "{msg}");
}

#[tokio::test]
async fn unsupported_media_is_415() {
    let app = app();
    let r = app.upload("notes.txt", b"just some text").await;
    assert_eq!(r.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let gif = b"GIF89a\x01\x00\x01\x00\x00\x00\x00;";
    assert_eq!(app.upload("a.gif", gif).await.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn oversized_upload_is_413() {
    let app = app_with(|c| c.upload_limit_bytes = 2048);
    let big = tagged_image(400, 400, 0);
    let mut noisy = big.clone();
    for (i, v) in noisy.data_mut().iter_mut().enumerate() {
        *v = (i * 7919 % 251) as u8;
    }
    let r = app.upload("big.png", &noisy.encode_png().unwrap()).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    let small = tagged_image(10, 10, 0);
    assert_eq!(app.upload("small.png", &small.encode_png().unwrap()).await.status, StatusCode::CREATED);
}

#[tokio::test]
async fn missing_records_are_404() {
    let app = app();
    assert_eq!(app.get("/api/documents/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.get("/api/pages/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.get("/api/lines/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.get("/api/jobs/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.segment("nope", None).await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.correct("nope", "α").await.status, StatusCode::NOT_FOUND);
    let r = app.call(Method::POST, "/api/lines/nope/ocr", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(app.get("/api/export?document=nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.get("/api/unknown").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn token_gates_mutating_endpoints_only() {
    let app = app_with(|c| c.token = Some("s3cret".into()));
    let png = tagged_image(20, 20, 0).encode_png().unwrap();
    assert_eq!(app.upload("a.png", &png).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(
        app.send(multipart_request("a.png", &png, Some("wrong"))).await.status,
        StatusCode::UNAUTHORIZED
    );
    let r = app.send(multipart_request("a.png", &png, Some("s3cret"))).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let doc_id = r.json()["document_id"].as_str().unwrap().to_string();
    assert_eq!(app.get(&format!("/api/documents/{doc_id}")).await.status, StatusCode::OK);
    assert_eq!(app.get("/api/models").await.status, StatusCode::OK);
    let r = app
        .call(Method::POST, "/api/jobs/finetune", Some(json!({ "base_model": "x", "documents": [] })))
        .await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn records_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path());
    let png = fixture_page().image.encode_png().unwrap();
    let (doc_id, lines) = {
        let state = kalchas_service::AppState::new(cfg.clone()).unwrap();
        let app = TestApp {
            router: kalchas_service::router(state.clone()),
            state,
            dir: tempfile::tempdir().unwrap(),
        };
        let r = app.upload("page.png", &png).await;
        let doc_id = r.json()["document_id"].as_str().unwrap().to_string();
        let doc = app.get(&format!("/api/documents/{doc_id}")).await.json();
        let page_id = doc["page_ids"][0].as_str().unwrap().to_string();
        let lines = app.segment(&page_id, None).await.json();
        let first = lines[0]["id"].as_str().unwrap();
        assert_eq!(app.correct(first, "γνῶθι σεαυτόν.").await.status, StatusCode::OK);
        let lines = app.get(&format!("/api/pages/{page_id}")).await.json()["lines"].clone();
        (doc_id, lines)
    };
    let state = kalchas_service::AppState::new(cfg).unwrap();
    let app = TestApp {
        router: kalchas_service::router(state.clone()),
        state,
        dir: tempfile::tempdir().unwrap(),
    };
    let doc = app.get(&format!("/api/documents/{doc_id}")).await.json();
    let page = app.get(&format!("/api/pages/{}", doc["page_ids"][0].as_str().unwrap())).await.json();
    assert_eq!(page["lines"], lines);
    assert_eq!(page["lines"][0]["status"], "corrected");
}
