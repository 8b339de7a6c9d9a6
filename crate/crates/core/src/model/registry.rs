//! A directory of `<name>.klch` model files, addressed by name.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::warn;

use super::io::{load_model, save_model, ModelIoError, MODEL_EXTENSION, MODEL_MAGIC};
use super::CrnnModel;
use crate::nn::Real;

#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl Registry {
    /// Opens an existing directory.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ModelIoError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(ModelIoError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("model registry {} is not a directory", dir.display()),
            )));
        }
        Ok(Registry { dir })
    }

    /// Opens `dir`, creating it if needed.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, ModelIoError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Registry { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.{MODEL_EXTENSION}"))
    }

    /// Sorted names of files that carry the model magic. Anything else is
    /// skipped with a warning.
    pub fn list_available_models(&self) -> Result<Vec<String>, ModelIoError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if !path.is_file() {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let is_model_ext = path.extension().and_then(|e| e.to_str()) == Some(MODEL_EXTENSION);
            if stem.starts_with('.') {
                continue;
            }
            if !is_model_ext || !has_model_magic(&path) {
                warn!("skipping non-model file {}", path.display());
                continue;
            }
            names.push(stem.to_string());
        }
        names.sort();
        Ok(names)
    }

    pub fn contains(&self, name: &str) -> bool {
        valid_name(name) && self.path_for(name).is_file()
    }

    pub fn load_ocr_model(&self, name: &str) -> Result<CrnnModel<f32>, ModelIoError> {
        if !valid_name(name) {
            return Err(ModelIoError::Format(format!("invalid model name {name:?}")));
        }
        let mut m = load_model(self.path_for(name))?;
        m.metadata.name = name.to_string();
        Ok(m)
    }

    /// Atomically publishes `model` under `name`, replacing any previous file.
    pub fn publish<R: Real>(&self, name: &str, model: &CrnnModel<R>) -> Result<PathBuf, ModelIoError> {
        if !valid_name(name) {
            return Err(ModelIoError::Format(format!("invalid model name {name:?}")));
        }
        let mut named = model.clone();
        named.metadata.name = name.to_string();
        let path = self.path_for(name);
        save_model(&named, &path)?;
        Ok(path)
    }
}

fn has_model_magic(path: &Path) -> bool {
    let mut buf = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .map(|_| &buf == MODEL_MAGIC)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::Charset;
    use crate::model::ArchConfig;

    #[test]
    fn listing() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert!(reg.list_available_models().unwrap().is_empty());
        let cs = Charset::from_chars("ab".chars()).unwrap();
        let m = CrnnModel::<f32>::build(ArchConfig::small(cs.size()), cs, 1).unwrap();
        reg.publish("Polyton-DB", &m).unwrap();
        reg.publish("Kalchas", &m).unwrap();
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        fs::write(dir.path().join("fake.klch"), "not a model").unwrap();
        assert_eq!(reg.list_available_models().unwrap(), vec!["Kalchas", "Polyton-DB"]);
        assert_eq!(reg.load_ocr_model("Kalchas").unwrap().name(), "Kalchas");
        assert!(reg.load_ocr_model("../x").is_err());
    }

    #[test]
    fn missing_dir() {
        assert!(Registry::open("/nonexistent/registry").is_err());
    }
}
