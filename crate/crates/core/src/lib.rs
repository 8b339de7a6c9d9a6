//! Kalchas: a self-contained OCR engine for polytonic Greek text lines.
//!
//! The recognizer is a convolutional-recurrent network (conv stack with
//! GroupNorm, bidirectional LSTM, linear projection) trained under CTC loss
//! with RMSProp. Everything from page binarization to the backward passes is
//! implemented in this crate; the only numeric dependency is a GEMM kernel.
//!
//! ```no_run
//! use kalchas::model::registry::Registry;
//!
//! let registry = Registry::open("models").unwrap();
//! println!("{:?}", registry.list_available_models().unwrap());
//! let model = registry.load_ocr_model("Kalchas").unwrap();
//! let page = kalchas::imaging::load_gray("images/010000.bin.png").unwrap();
//! let line = kalchas::imaging::prepare_whole(&page);
//! let text = model.ocr(&[line]);
//! ```

pub mod charset;
pub mod ctc;
pub mod dataset;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod verify;
pub mod train;

pub use charset::{Charset, LabelSeq};
pub use imaging::{BinaryImage, GrayImage, LineBox, LineImage};
pub use model::{ArchConfig, CrnnModel};
pub use nn::Real;
