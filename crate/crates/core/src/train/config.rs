//! Run configuration read from TOML.
//!
//! ```toml
//! architecture = "lenet_t"      # lenet_t | vgg7_t | resmini_t
//! mode = "sttn_2_2"             # float | sttn_2_2 | sttn_2_32 | twn_baseline
//! width = 1.0                   # optional, per-architecture default
//! classes = 10
//! grad_mode = "consistent"      # consistent | paper_literal
//! lr = 0.005
//! weight_decay = 1e-6
//! epochs = 20
//! batch = 64
//! seed = 0
//! threads = 0
//!
//! [dataset]
//! kind = "mnist_idx"            # mnist_idx | cifar10_bin
//! path = "../data/mnist"        # relative to the config file
//! pad_crop = false
//! flip = false
//! train_limit = 60000           # optional: first N training items
//! test_limit = 10000            # optional
//!
//! [output]
//! dir = "../runs/lenet"         # optional, relative to the config file
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::data::{Augment, DatasetKind};
use super::optim::{DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelConfig, QuantMode};
use crate::quant::GradMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub path: PathBuf,
    pub augment: Augment,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// 0 = deterministic single-thread.
    pub threads: usize,
    pub dataset: DataConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for a model/dataset pair: batch 64, 20 epochs.
    pub fn new(model: ModelConfig, dataset: DataConfig) -> Self {
        RunConfig {
            model,
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: 20,
            batch: 64,
            seed: 0,
            threads: 0,
            dataset,
            out_dir: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parse config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<document>".into(),
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        let r = Reader { text, table: &table };
        r.only_keys(
            None,
            &[
                "architecture", "mode", "width", "classes", "grad_mode", "lr", "weight_decay",
                "epochs", "batch", "seed", "threads", "dataset", "output",
            ],
        )?;
        r.only_keys(
            Some("dataset"),
            &["kind", "path", "pad_crop", "flip", "train_limit", "test_limit"],
        )?;
        r.only_keys(Some("output"), &["dir"])?;

        let architecture: Architecture = r.enumerated("architecture", true)?.expect("required");
        let mode: QuantMode = r.enumerated("mode", true)?.expect("required");
        let mut model = ModelConfig::new(architecture, mode);
        if let Some(w) = r.float("width")? {
            model.width = w;
        }
        if let Some(c) = r.count("classes")? {
            model.classes = c;
        }
        if let Some(g) = r.enumerated::<GradMode>("grad_mode", false)? {
            model.grad_mode = g;
        }
        model.validate().map_err(|e| r.error("width", e.to_string()))?;

        let kind: DatasetKind = r.enumerated("dataset.kind", true)?.expect("required");
        let path = r.string("dataset.path")?.ok_or_else(|| r.error("dataset.path", "missing dataset path"))?;
        let dataset = DataConfig {
            kind,
            path: base.join(path),
            augment: Augment {
                pad_crop: r.boolean("dataset.pad_crop")?.unwrap_or(false),
                flip: r.boolean("dataset.flip")?.unwrap_or(false),
            },
            train_limit: r.count("dataset.train_limit")?,
            test_limit: r.count("dataset.test_limit")?,
        };
        if kind.image_shape() != architecture.input_shape() {
            return Err(r.error(
                "dataset.kind",
                format!("{kind:?} images do not fit {}", architecture.id()),
            ));
        }

        let mut cfg = RunConfig::new(model, dataset);
        if let Some(lr) = r.float("lr")? {
            if lr <= 0.0 {
                return Err(r.error("lr", "must be positive"));
            }
            cfg.lr = lr;
        }
        if let Some(wd) = r.float("weight_decay")? {
            if wd < 0.0 {
                return Err(r.error("weight_decay", "must be non-negative"));
            }
            cfg.weight_decay = wd;
        }
        if let Some(e) = r.count("epochs")? {
            cfg.epochs = e;
        }
        if let Some(b) = r.count("batch")? {
            if b == 0 {
                return Err(r.error("batch", "must be at least 1"));
            }
            cfg.batch = b;
        }
        if let Some(s) = r.count("seed")? {
            cfg.seed = s as u64;
        }
        if let Some(t) = r.count("threads")? {
            cfg.threads = t;
        }
        cfg.out_dir = r.string("output.dir")?.map(|d| base.join(d));
        Ok(cfg)
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` (dotted, at most one table level), if it appears.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (Some(s), n),
        None => (None, key),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            let header = header.trim_end_matches(']').trim().to_string();
            if section.is_none() && header == key {
                return Some(i + 1);
            }
            current = Some(header);
            continue;
        }
        if current.as_deref() == section {
            if let Some(rest) = line.strip_prefix(name) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Reader<'a> {
    text: &'a str,
    table: &'a Table,
}

impl Reader<'_> {
    fn error(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            key: key.to_string(),
            line: line_of(self.text, key),
            message: message.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&Value> {
        match key.split_once('.') {
            Some((s, n)) => self.table.get(s)?.as_table()?.get(n),
            None => self.table.get(key),
        }
    }

    fn only_keys(&self, section: Option<&str>, allowed: &[&str]) -> Result<()> {
        let table = match section {
            None => self.table,
            Some(s) => match self.table.get(s) {
                None => return Ok(()),
                Some(Value::Table(t)) => t,
                Some(_) => return Err(self.error(s, "expected a table")),
            },
        };
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                let full = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.clone(),
                };
                return Err(self.error(&full, "unknown key"));
            }
        }
        Ok(())
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(self.error(key, format!("expected a string, found {}", v.type_str()))),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(self.error(key, format!("expected a number, found {}", v.type_str()))),
        }
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(v) => Err(self.error(key, format!("expected a non-negative integer, found {v}"))),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => Err(self.error(key, format!("expected true or false, found {}", v.type_str()))),
        }
    }

    /// A string naming a serde enum variant.
    fn enumerated<T: serde::de::DeserializeOwned>(&self, key: &str, required: bool) -> Result<Option<T>> {
        let Some(s) = self.string(key)? else {
            return if required {
                Err(self.error(key, "missing required key"))
            } else {
                Ok(None)
            };
        };
        serde_json::from_value(serde_json::Value::String(s.clone()))
            .map(Some)
            .map_err(|_| self.error(key, format!("unknown value \"{s}\"")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
architecture = "lenet_t"
mode = "sttn_2_32"
epochs = 3
seed = 11

[dataset]
kind = "mnist_idx"
path = "mnist"
train_limit = 500
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = RunConfig::parse(GOOD, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.model.mode, QuantMode::Sttn232);
        assert_eq!(cfg.model.width, 1.0);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.lr, 0.005);
        assert_eq!(cfg.dataset.path, PathBuf::from("/cfg/mnist"));
        assert_eq!(cfg.dataset.train_limit, Some(500));
        assert_eq!(cfg.out_dir, None);
    }

    #[test]
    fn missing_dataset_path_names_key() {
        let text = GOOD.replace("path = \"mnist\"\n", "");
        match RunConfig::parse(&text, Path::new("")) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "dataset.path"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_key_and_line() {
        let text = GOOD.replace("epochs = 3", "epochs = \"three\"");
        match RunConfig::parse(&text, Path::new("")) {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "epochs");
                assert_eq!(line, Some(4));
            }
            other => panic!("{other:?}"),
        }
        let text = GOOD.replace("mode = \"sttn_2_32\"", "mode = \"sttn_3_3\"");
        let err = RunConfig::parse(&text, Path::new("")).unwrap_err().to_string();
        assert!(err.contains("`mode` (line 3)"), "{err}");
    }

    #[test]
    fn unknown_key_and_syntax_errors() {
        let text = GOOD.replace("train_limit", "trian_limit");
        match RunConfig::parse(&text, Path::new("")) {
            Err(Error::Config { key, line, .. }) => {
                assert_eq!(key, "dataset.trian_limit");
                assert_eq!(line, Some(10));
            }
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("epochs = = 3\n", Path::new("")) {
            Err(Error::Config { line, .. }) => assert_eq!(line, Some(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_must_fit_architecture() {
        let text = GOOD.replace("mnist_idx", "cifar10_bin");
        assert!(matches!(
            RunConfig::parse(&text, Path::new("")),
            Err(Error::Config { key, .. }) if key == "dataset.kind"
        ));
    }
}
