//! Single-file checkpoints.
//!
//! Layout: a header line `POET-CHECKPOINT <version> manifest-bytes=<n>`, then `n`
//! bytes of UTF-8 manifest with one `key = value` per line, then the parameter
//! blobs as concatenated little-endian `f32` values. Each `tensor.<name>` line gives
//! the byte offset into the blob region, the element count, the shape, the
//! parameter group and the freeze state. Configuration is stored as dotted TOML
//! keys under `config.`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{rng_for, ContinualState, STREAM_INIT};
use crate::data::SkeletonTopology;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyHistory, SessionReport};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "POET-CHECKPOINT";
const VERSION: u32 = 1;

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |v| format!("{v:?}"))
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Serialises a state into checkpoint bytes. Deterministic: equal states give
/// equal bytes.
pub fn checkpoint_bytes(state: &ContinualState) -> Result<Vec<u8>> {
    let mut m = String::new();
    let mut line = |k: &str, v: &str| {
        let _ = writeln!(m, "{k} = {v}");
    };
    line("format", &VERSION.to_string());
    line("session", &state.session.to_string());
    line("time_steps", &state.time_steps.to_string());
    line("joints", &state.topology.joint_count().to_string());
    line("topology.edges", &join(state.topology.edges().iter().map(|(a, b)| format!("{a}-{b}")), ","));
    for (t, classes) in state.session_classes.iter().enumerate() {
        line(&format!("classes.{t}"), &join(classes, ","));
    }
    let tail = state.codebook.as_ref().and_then(|c| c.forced_tail());
    line("forced_tail", &tail.map_or_else(|| "none".to_string(), |r| format!("{}..{}", r.start, r.end)));

    let config = toml::Value::try_from(&state.config).map_err(|e| Error::config("config", e.to_string()))?;
    let mut flat = Vec::new();
    flatten_toml("", &config, &mut flat);
    for (k, v) in flat {
        line(&format!("config.{k}"), &v);
    }

    for (l, row) in state.history.rows().iter().enumerate() {
        line(&format!("history.{}", l + 1), &join(row.iter().map(|v| format!("{v:?}")), ","));
    }
    for r in &state.reports {
        let p = format!("report.{}", r.session);
        line(&format!("{p}.avg"), &format!("{:?}", r.avg));
        line(&format!("{p}.old"), &opt(r.old));
        line(&format!("{p}.new"), &format!("{:?}", r.new));
        line(&format!("{p}.a_hm"), &opt(r.a_hm));
        line(&format!("{p}.bwf"), &opt(r.bwf));
        line(&format!("{p}.wall_seconds"), &format!("{:?}", r.wall_seconds));
        line(&format!("{p}.classes"), &join(&r.classes, ","));
        line(&format!("{p}.per_class"), &join(r.per_class.iter().map(|(c, v)| format!("{c}:{v:?}")), ","));
        line(&format!("{p}.confusion"), &join(r.confusion.iter().map(|row| join(row, ",")), ";"));
    }

    let mut blobs = Vec::with_capacity(state.store.total_elements() * 4);
    for (_, p) in state.store.iter() {
        let rows = if p.frozen_rows.is_empty() {
            "-".to_string()
        } else {
            p.frozen_rows.iter().map(|&f| if f { '1' } else { '0' }).collect()
        };
        line(
            &format!("tensor.{}", p.name),
            &format!(
                "offset={} len={} shape={}x{} group={} frozen={} frozen_rows={}",
                blobs.len(),
                p.value.len(),
                p.value.rows(),
                p.value.cols(),
                p.group,
                u8::from(p.frozen),
                rows
            ),
        );
        for &v in p.value.data() {
            blobs.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    line("blob_bytes", &blobs.len().to_string());

    let mut out = format!("{CHECKPOINT_MAGIC} {VERSION} manifest-bytes={}\n", m.len()).into_bytes();
    out.extend_from_slice(m.as_bytes());
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn save_checkpoint(state: &ContinualState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ContinualState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
    rows: usize,
    cols: usize,
    group: ParamGroup,
    frozen: bool,
    frozen_rows: Vec<bool>,
}

fn parse_tensor(name: &str, value: &str) -> Result<TensorEntry> {
    let bad = |what: &str| integrity(format!("tensor {name}: {what}"));
    let mut fields = BTreeMap::new();
    for part in value.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(&format!("malformed field `{part}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(&format!("bad `{k}`")));
    let (rows, cols) = get("shape")?
        .split_once('x')
        .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
        .ok_or_else(|| bad("bad shape"))?;
    let frozen_rows = match get("frozen_rows")? {
        "-" => Vec::new(),
        s => s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad("bad frozen_rows")),
            })
            .collect::<Result<_>>()?,
    };
    Ok(TensorEntry {
        name: name.to_string(),
        offset: num("offset")?,
        len: num("len")?,
        rows,
        cols,
        group: get("group")?.parse().map_err(|e: String| bad(&e))?,
        frozen: get("frozen")? == "1",
        frozen_rows,
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| integrity(format!("{key}: bad entry `{x}`"))))
        .collect()
}

fn parse_opt(key: &str, s: &str) -> Result<Option<f64>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| integrity(format!("{key}: bad value `{s}`")))
    }
}

/// Rebuilds a state from checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ContinualState> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| integrity("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| integrity("header is not UTF-8"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(integrity("not a checkpoint file"));
    }
    if parts.next() != Some(&VERSION.to_string()) {
        return Err(integrity(format!("unsupported checkpoint version in `{header}`")));
    }
    let manifest_len: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("manifest-bytes="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| integrity("header lacks manifest-bytes"))?;
    let body = &bytes[nl + 1..];
    if body.len() < manifest_len {
        return Err(integrity("file ends inside the manifest"));
    }
    let manifest = std::str::from_utf8(&body[..manifest_len]).map_err(|_| integrity("manifest is not UTF-8"))?;
    let blobs = &body[manifest_len..];

    let mut kv: Vec<(&str, &str)> = Vec::new();
    for l in manifest.lines() {
        let (k, v) = l.split_once(" = ").ok_or_else(|| integrity(format!("malformed manifest line `{l}`")))?;
        kv.push((k, v));
    }
    let get = |k: &str| kv.iter().find(|(key, _)| *key == k).map(|(_, v)| *v).ok_or_else(|| integrity(format!("manifest lacks `{k}`")));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| integrity(format!("`{k}` is not an integer")));

    let session = num("session")?;
    let time_steps = num("time_steps")?;
    let joints = num("joints")?;
    let edges = get("topology.edges")?;
    let edges: Vec<(usize, usize)> = if edges.is_empty() {
        Vec::new()
    } else {
        edges
            .split(',')
            .map(|e| {
                e.split_once('-')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| integrity(format!("bad edge `{e}`")))
            })
            .collect::<Result<_>>()?
    };
    let topology = SkeletonTopology::new(joints, edges)?;

    let config_text: String = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
        .collect();
    let config: super::TrainConfig = toml::from_str(&config_text).map_err(|e| Error::config("config", e.message().to_string()))?;

    let mut session_classes = Vec::new();
    while let Some(v) = kv.iter().find(|(k, _)| *k == format!("classes.{}", session_classes.len())).map(|(_, v)| *v) {
        session_classes.push(parse_list::<usize>("classes", v)?);
    }
    if session_classes.len() != session + 1 {
        return Err(integrity(format!("{} class lists for session {session}", session_classes.len())));
    }

    let mut rng = rng_for(config.seed, STREAM_INIT, 0);
    let mut state = ContinualState::assemble(&config, &topology, time_steps, session_classes[0].len(), &mut rng)?;
    if config.method.uses_prompts() {
        state.attach_codebook(&mut rng)?;
    }
    state.session = session;
    state.session_classes = session_classes;

    let entries: Vec<TensorEntry> = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("tensor.").map(|name| parse_tensor(name, v)))
        .collect::<Result<_>>()?;
    if entries.len() != state.store.len() {
        return Err(integrity(format!("{} tensors stored, model has {}", entries.len(), state.store.len())));
    }
    let mut expected_offset = 0;
    for (e, (id, _)) in entries.iter().zip(state.store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>()) {
        let p = state.store.get_mut(id);
        if p.name != e.name {
            return Err(integrity(format!("tensor {}: expected `{}` at this position", e.name, p.name)));
        }
        if p.group != e.group {
            return Err(integrity(format!("tensor {}: group {} does not match {}", e.name, e.group, p.group)));
        }
        if e.len != e.rows * e.cols || e.offset != expected_offset {
            return Err(integrity(format!("tensor {}: length or offset disagrees with the manifest layout", e.name)));
        }
        let end = e.offset + 4 * e.len;
        if end > blobs.len() {
            return Err(integrity(format!("tensor {}: blob ends at byte {end}, file holds {}", e.name, blobs.len())));
        }
        if !e.frozen_rows.is_empty() && e.frozen_rows.len() != e.rows {
            return Err(integrity(format!("tensor {}: frozen row mask has {} entries for {} rows", e.name, e.frozen_rows.len(), e.rows)));
        }
        let data = blobs[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        p.value = Tensor::from_vec(e.rows, e.cols, data);
        p.frozen = e.frozen;
        p.frozen_rows = e.frozen_rows.clone();
        expected_offset = end;
    }
    let declared = num("blob_bytes")?;
    if declared != expected_offset || blobs.len() != expected_offset {
        let last = entries.last().map_or("<none>", |e| e.name.as_str());
        return Err(integrity(format!(
            "blob region holds {} bytes, manifest declares {declared} ending with tensor {last}",
            blobs.len()
        )));
    }

    match get("forced_tail")? {
        "none" => {}
        s => {
            let (a, b) = s
                .split_once("..")
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| integrity(format!("bad forced_tail `{s}`")))?;
            let cb = state.codebook.as_mut().ok_or_else(|| integrity("forced_tail without a prompt pool"))?;
            cb.set_forced_tail(Some(a..b));
        }
    }

    let mut history = AccuracyHistory::new();
    for l in 1.. {
        let Ok(v) = get(&format!("history.{l}")) else { break };
        history.push_row(parse_list("history", v)?).map_err(|e| integrity(e.to_string()))?;
    }
    state.history = history;

    for t in 0..=session {
        let p = format!("report.{t}");
        let Ok(avg) = get(&format!("{p}.avg")) else { break };
        let f = |k: &str| -> Result<f64> {
            let key = format!("{p}.{k}");
            get(&key)?.parse().map_err(|_| integrity(format!("`{key}` is not a number")))
        };
        let o = |k: &str| -> Result<Option<f64>> {
            let key = format!("{p}.{k}");
            parse_opt(&key, get(&key)?)
        };
        let per_class = get(&format!("{p}.per_class"))?;
        let per_class: BTreeMap<usize, f64> = if per_class.is_empty() {
            BTreeMap::new()
        } else {
            per_class
                .split(',')
                .map(|e| {
                    e.split_once(':')
                        .and_then(|(c, v)| Some((c.parse().ok()?, v.parse().ok()?)))
                        .ok_or_else(|| integrity(format!("bad per-class entry `{e}`")))
                })
                .collect::<Result<_>>()?
        };
        let confusion = get(&format!("{p}.confusion"))?;
        let confusion: Vec<Vec<u64>> = if confusion.is_empty() {
            Vec::new()
        } else {
            confusion.split(';').map(|r| parse_list("confusion", r)).collect::<Result<_>>()?
        };
        state.reports.push(SessionReport {
            session: t,
            avg: avg.parse().map_err(|_| integrity(format!("`{p}.avg` is not a number")))?,
            old: o("old")?,
            new: f("new")?,
            a_hm: o("a_hm")?,
            bwf: o("bwf")?,
            per_class,
            classes: parse_list("classes", get(&format!("{p}.classes"))?)?,
            confusion,
            wall_seconds: f("wall_seconds")?,
        });
    }
    Ok(state)
}
