//! Plain-text checkpoint of named tensors.
//!
//! ```text
//! drsmt-checkpoint 1 <kind>
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffkernel::{ParamSet, Tensor2};
use crate::error::{Error, Result};

const MAGIC: &str = "drsmt-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((name.to_string(), t.clone()));
        }
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor2) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor2> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `params` from the tensor of the same name.
    pub fn load_params_into(&self, params: &mut ParamSet) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let src = self
                .tensor(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != params.value(id).shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION} {}\n", self.kind);
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").expect("write to string");
        }
        for (name, t) in &self.tensors {
            writeln!(out, "tensor {name} {} {}", t.rows(), t.cols()).expect("write to string");
            for r in 0..t.rows() {
                let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        match parts.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(VERSION) => {}
            other => return Err(bad(format!("unsupported version {other:?}"))),
        }
        let mut ckpt = Checkpoint::new(parts.next().unwrap_or_default());
        let mut finished = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                finished = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = fields[..] else {
                    return Err(bad(format!("malformed tensor header {line:?}")));
                };
                let rows: usize = rows.parse().map_err(|_| bad(format!("bad row count in {line:?}")))?;
                let cols: usize = cols.parse().map_err(|_| bad(format!("bad column count in {line:?}")))?;
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = lines
                        .next()
                        .ok_or_else(|| bad(format!("tensor {name} truncated at row {r}")))?;
                    for cell in row.split_whitespace() {
                        let v: f64 = cell
                            .parse()
                            .map_err(|_| bad(format!("tensor {name} row {r}: bad value {cell:?}")))?;
                        data.push(v);
                    }
                }
                let t = Tensor2::from_vec(rows, cols, data)
                    .map_err(|_| bad(format!("tensor {name}: wrong number of values")))?;
                ckpt.tensors.push((name.to_string(), t));
            } else {
                return Err(bad(format!("unexpected line {line:?}")));
            }
        }
        if !finished {
            return Err(bad("missing end marker".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
