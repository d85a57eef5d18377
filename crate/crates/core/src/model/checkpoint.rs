//! Plain-text parameter dump.
//!
//! ```text
//! meir-checkpoint 1
//! model.hidden_dim=32
//! ...
//! tensor balance.image.weight 32 96
//! <row 0 values>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! reading a checkpoint back gives bit-identical parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::nn::ParamSet;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &str = "meir-checkpoint 1";

/// A model plus free-form run metadata (keys outside `model.`).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        for (k, v) in self.model.config.to_pairs().iter().chain(&self.meta) {
            let _ = writeln!(s, "{k}={v}");
        }
        for t in self.model.params.tensors() {
            let _ = writeln!(s, "tensor {} {} {}", t.name, t.shape[0], t.shape[1]);
            for row in t.data.chunks(t.shape[1].max(1)) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::format(path, line, msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(err(1, "missing checkpoint header".into())),
        }
        let mut config = ModelConfig::default();
        let mut meta = BTreeMap::new();
        let mut pending = None;
        for (n, line) in lines.by_ref() {
            if line.starts_with("tensor ") {
                pending = Some((n, line));
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected key=value, got `{line}`")))?;
            match k.strip_prefix("model.") {
                Some(key) => config.set(key, v).map_err(|e| err(n, e.to_string()))?,
                None => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let mut model = Model::new(config).map_err(|e| err(1, e.to_string()))?;
        let expected: Vec<(String, [usize; 2])> = model.params.tensors().iter().map(|t| (t.name.clone(), t.shape)).collect();
        let mut slots = model.params.tensors_mut();
        for (ti, (name, shape)) in expected.iter().enumerate() {
            let (n, header) = match pending.take() {
                Some(h) => h,
                None => lines.next().ok_or_else(|| err(0, format!("missing tensor {name}")))?,
            };
            let want = format!("tensor {name} {} {}", shape[0], shape[1]);
            if header != want {
                return Err(err(n, format!("expected `{want}`, got `{header}`")));
            }
            let slot = &mut slots[ti];
            let mut filled = 0;
            for _ in 0..shape[0] {
                let (n, row) = lines.next().ok_or_else(|| err(n, format!("truncated tensor {name}")))?;
                let values = row
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(n, e.to_string()))?;
                if values.len() != shape[1] {
                    return Err(err(n, format!("row has {} values, expected {}", values.len(), shape[1])));
                }
                slot[filled..filled + shape[1]].copy_from_slice(&values);
                filled += shape[1];
            }
        }
        drop(slots);
        match lines.next() {
            Some((_, "end")) => {}
            Some((n, l)) => return Err(err(n, format!("expected `end`, got `{l}`"))),
            None => return Err(err(0, "missing `end`".into())),
        }
        if !model.params.all_finite() {
            return Err(err(0, "non-finite parameter".into()));
        }
        Ok(Checkpoint { model, meta })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, ckpt.to_text().as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::parse(&read_to_string(path)?, path)
}
