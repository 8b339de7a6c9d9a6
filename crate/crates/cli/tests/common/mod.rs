#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kalchas::GrayImage;

/// Eight short polytonic lines used as a training corpus.
pub const CORPUS_LINES: [&str; 8] = [
    "γνῶθι σεαυτόν.",
    "μηδὲν ἄγαν.",
    "χαλεπὰ τὰ καλά.",
    "ἀρχὴ ἥμισυ παντός.",
    "ἡ ψυχὴ τοῦ ἀνθρώπου ἀθάνατος.",
    "πάντα ῥεῖ καὶ οὐδὲν μένει.",
    "ἓν οἶδα ὅτι οὐδὲν οἶδα.",
    "ὁ βίος βραχύς, ἡ δὲ τέχνη μακρή.",
];

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(&self) -> &Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

pub fn kalchas() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kalchas"));
    c.env_remove("RUST_LOG");
    c
}

pub fn run<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    kalchas().args(args).output().expect("spawn kalchas").into()
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Renders `lines` with `kalchas synth` into `dir` and returns the manifest path.
pub fn synth_corpus(dir: &Path, lines: &[&str]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let texts = dir.join("texts.txt");
    std::fs::write(&texts, lines.join("\n")).unwrap();
    let out = dir.join("corpus");
    let r = run(["synth", "--texts", &s(&texts), "--out", &s(&out), "--seed", "1"]);
    r.ok();
    PathBuf::from(r.stdout.trim())
}

/// Line images of a manifest, in manifest order.
pub fn manifest_images(manifest: &Path) -> Vec<PathBuf> {
    kalchas::dataset::load_manifest(manifest)
        .unwrap()
        .entries
        .into_iter()
        .map(|e| e.image)
        .collect()
}

/// A white page with two solid black bands.
pub fn two_band_page() -> GrayImage {
    let mut img = GrayImage::filled(200, 100, 255);
    for y in (20..32).chain(60..75) {
        for x in 30..170 {
            img.set(x, y, 0);
        }
    }
    img
}
