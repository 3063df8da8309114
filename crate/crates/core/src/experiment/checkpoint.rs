//! Plain-text module pool checkpoints.
//!
//! ```text
//! fedmn-checkpoint 1
//! architecture 1x2x2
//! dims <input> <encoder_out> <hidden or 0> <block_out> <classes>
//! hypernet <feature_dim> <label_dim>      (or `hypernet none`)
//! version <rounds aggregated>
//! param <layer>.<block>.<slot> <extent> [<extent> ...]
//! <values separated by spaces>
//! ...
//! ```
//!
//! Parameters are keyed by `(layer, block, slot)` with layer 0 for the
//! hypernetwork and layer 1 for encoders. Values are written with
//! round-trip precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::arch::{ArchitectureSpec, HypernetSpec, LayerWidths};
use crate::error::{Error, Result};
use crate::param::{ParamId, Slot};
use crate::pool::ModulePool;
use crate::tensor::Tensor;

const MAGIC: &str = "fedmn-checkpoint 1";

pub fn encode_checkpoint(pool: &ModulePool) -> String {
    let spec = pool.spec();
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "architecture {}", spec.widths());
    let _ = writeln!(
        s,
        "dims {} {} {} {} {}",
        spec.input_dim,
        spec.encoder_out_dim,
        spec.block_hidden_dim.unwrap_or(0),
        spec.block_out_dim,
        spec.num_classes
    );
    match pool.hypernet() {
        Some(h) => {
            let _ = writeln!(s, "hypernet {} {}", h.feature_dim, h.label_dim);
        }
        None => s.push_str("hypernet none\n"),
    }
    let _ = writeln!(s, "version {}", pool.version);
    for p in pool.params() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "param {} {}", p.id, dims.join(" "));
        let values: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", values.join(" "));
    }
    s
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing `{key}` line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Checkpoint(format!(
            "expected `{key}`, found `{line}`"
        )));
    }
    Ok(parts.collect())
}

fn number<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad {what} `{s}`")))
}

pub fn decode_checkpoint(text: &str) -> Result<ModulePool> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a fedmn checkpoint".into()));
    }
    let arch = field(lines.next(), "architecture")?;
    let widths: LayerWidths = arch
        .first()
        .ok_or_else(|| Error::Checkpoint("empty architecture".into()))?
        .parse()?;
    let dims = field(lines.next(), "dims")?;
    if dims.len() != 5 {
        return Err(Error::Checkpoint("dims needs five values".into()));
    }
    let d: Vec<usize> = dims
        .iter()
        .map(|s| number(s, "dimension"))
        .collect::<Result<_>>()?;
    let spec = ArchitectureSpec::new(widths.0, d[0], d[1], (d[2] > 0).then_some(d[2]), d[3], d[4])?;
    let hyper = field(lines.next(), "hypernet")?;
    let hypernet = match hyper.as_slice() {
        ["none"] => None,
        [f, l] => Some(HypernetSpec {
            feature_dim: number(f, "hypernet width")?,
            label_dim: number(l, "hypernet width")?,
        }),
        _ => return Err(Error::Checkpoint("bad hypernet line".into())),
    };
    let version: u64 = number(
        field(lines.next(), "version")?
            .first()
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?,
        "version",
    )?;

    let mut values = BTreeMap::new();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let head = field(Some(line), "param")?;
        let (key, shape) = head
            .split_first()
            .ok_or_else(|| Error::Checkpoint("param line without a key".into()))?;
        let id = parse_id(key)?;
        let shape: Vec<usize> = shape
            .iter()
            .map(|s| number(s, "extent"))
            .collect::<Result<_>>()?;
        let data: Vec<f64> = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("values of {id} are missing")))?
            .split_whitespace()
            .map(|s| number(s, "value"))
            .collect::<Result<_>>()?;
        let tensor =
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{id}: {e}")))?;
        if values.insert(id, tensor).is_some() {
            return Err(Error::Checkpoint(format!("{id} appears twice")));
        }
    }
    let mut pool = ModulePool::from_values(spec, hypernet, values)?;
    pool.version = version;
    Ok(pool)
}

fn parse_id(key: &str) -> Result<ParamId> {
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        [layer, block, slot] => Ok(ParamId::new(
            number(layer, "layer")?,
            number(block, "block")?,
            slot.parse::<Slot>()?,
        )),
        _ => Err(Error::Checkpoint(format!("bad parameter key `{key}`"))),
    }
}

pub fn save_checkpoint(pool: &ModulePool, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(pool)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModulePool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text)
}
