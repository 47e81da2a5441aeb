//! Text checkpoint format.
//!
//! ```text
//! tmd-checkpoint 1
//! meta <key> <value...>
//! param <name> <d0>x<d1>... <v0> <v1> ...
//! ```
//!
//! One record per line. `meta` values run to the end of the line; `param`
//! values are whitespace-separated decimal `f64`s in Rust's shortest
//! round-trip formatting, row-major. Lines starting with `#` are comments.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "tmd-checkpoint 1";

/// Parameters plus ordered string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_values<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &ckpt.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (_, name, t) in ckpt.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(w, "param {name} {}", dims.join("x"))?;
            for v in t.data() {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(parse_err(1, format!("missing header {MAGIC:?}"))),
    }
    let mut ckpt = Checkpoint::default();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            ckpt.meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("param ") {
            let mut fields = rest.split_ascii_whitespace();
            let name = fields
                .next()
                .ok_or_else(|| parse_err(n, "param without name".into()))?;
            let dims = fields
                .next()
                .ok_or_else(|| parse_err(n, format!("param {name} without shape")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(n, format!("bad shape {dims:?}: {e}")))?;
            let data = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(n, format!("bad value in {name}: {e}")))?;
            let t = Tensor::new(shape, data).map_err(|e| parse_err(n, e.to_string()))?;
            ckpt.params
                .add(name, t)
                .map_err(|e| parse_err(n, e.to_string()))?;
        } else {
            return Err(parse_err(n, format!("unrecognized record {line:?}")));
        }
    }
    Ok(ckpt)
}
