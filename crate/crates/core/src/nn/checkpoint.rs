//! Single-file checkpoints: a UTF-8 manifest terminated by an `end` line,
//! followed by little-endian `f32` payloads in manifest order.
//!
//! ```text
//! PIXRL-CHECKPOINT
//! format_version 1
//! arch trunk=3,32,32,32,32 kernel=3 head_kernel=3 actions=28
//! meta <key> <value>            (zero or more, in insertion order)
//! tensor <name> <d0,d1,..> <offset> <len>
//! optimizer 0|1
//! adam <step> <lr> <beta1> <beta2> <eps>   (only when optimizer is 1)
//! end
//! ```
//!
//! Offsets count `f32` values from the start of the payload. With the
//! optimizer flag set, first moments for every tensor follow the parameters,
//! then second moments, each in manifest order.

use std::fs;
use std::path::Path;

use super::{AdamConfig, AdamState, Architecture, NetworkParams, NnError, Tensor};

pub const CHECKPOINT_MAGIC: &str = "PIXRL-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub optimizer: Option<AdamState>,
    /// Free-form provenance, e.g. the effective training config.
    pub meta: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: NetworkParams) -> Self {
        Self {
            params,
            optimizer: None,
            meta: Vec::new(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let params = &self.params;
        let mut manifest = String::new();
        manifest.push_str(CHECKPOINT_MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("format_version {CHECKPOINT_VERSION}\n"));
        manifest.push_str(&format!("arch {}\n", params.architecture()));
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("unencodable meta entry {k:?}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0;
        for (name, t) in params.names().iter().zip(params.tensors()) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.len()));
            offset += t.len();
        }
        match &self.optimizer {
            None => manifest.push_str("optimizer 0\n"),
            Some(s) => {
                let c = s.config;
                manifest.push_str("optimizer 1\n");
                manifest.push_str(&format!(
                    "adam {} {:?} {:?} {:?} {:?}\n",
                    s.step, c.lr, c.beta1, c.beta2, c.eps
                ));
            }
        }
        manifest.push_str("end\n");

        let mut out = manifest.into_bytes();
        let mut push = |vals: &[f64]| {
            for &v in vals {
                out.extend((v as f32).to_le_bytes());
            }
        };
        for t in params.tensors() {
            push(t.data());
        }
        if let Some(s) = &self.optimizer {
            for m in &s.m {
                push(m);
            }
            for v in &s.v {
                push(v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let end = find_manifest_end(bytes).ok_or_else(|| bad("manifest terminator not found"))?;
        let manifest = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[end..];
        let mut lines = manifest.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing magic line"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version "))
            .ok_or_else(|| bad("missing format_version"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let arch = parse_arch(
            lines
                .next()
                .and_then(|l| l.strip_prefix("arch "))
                .ok_or_else(|| bad("missing arch line"))?,
        )?;

        let mut meta = Vec::new();
        let mut entries = Vec::new();
        let mut optimizer_flag = None;
        let mut adam_line = None;
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, len] = f[..] else {
                        return Err(bad(format!("bad tensor line {line:?}")));
                    };
                    let shape = parse_usizes(dims)?;
                    let offset: usize = offset.parse().map_err(|_| bad("bad tensor offset"))?;
                    let len: usize = len.parse().map_err(|_| bad("bad tensor length"))?;
                    entries.push((name.to_string(), shape, offset, len));
                }
                "optimizer" => optimizer_flag = Some(rest == "1"),
                "adam" => adam_line = Some(rest.to_string()),
                "end" => {}
                other => return Err(bad(format!("unknown manifest record {other:?}"))),
            }
        }

        let read = |offset: usize, len: usize| -> Result<Vec<f64>, NnError> {
            let bytes = payload
                .get(offset * 4..(offset + len) * 4)
                .ok_or_else(|| bad("payload truncated"))?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let mut named = Vec::new();
        let mut total = 0;
        for (name, shape, offset, len) in &entries {
            if shape.iter().product::<usize>() != *len {
                return Err(bad(format!("tensor {name} length disagrees with shape")));
            }
            named.push((name.clone(), Tensor::new(shape.clone(), read(*offset, *len)?)?));
            total = total.max(offset + len);
        }
        let params = NetworkParams::from_named(arch, named)?;
        params.check_layout()?;

        let optimizer = match optimizer_flag.ok_or_else(|| bad("missing optimizer flag"))? {
            false => None,
            true => {
                let line = adam_line.ok_or_else(|| bad("optimizer flag set without adam line"))?;
                let f: Vec<&str> = line.split(' ').collect();
                let [step, lr, b1, b2, eps] = f[..] else {
                    return Err(bad("bad adam line"));
                };
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
                let config = AdamConfig {
                    lr: num(lr)?,
                    beta1: num(b1)?,
                    beta2: num(b2)?,
                    eps: num(eps)?,
                };
                let mut m = Vec::new();
                let mut v = Vec::new();
                let mut cursor = total;
                for t in params.tensors() {
                    m.push(read(cursor, t.len())?);
                    cursor += t.len();
                }
                for t in params.tensors() {
                    v.push(read(cursor, t.len())?);
                    cursor += t.len();
                }
                total = cursor;
                Some(AdamState {
                    config,
                    step: step.parse().map_err(|_| bad("bad adam step"))?,
                    m,
                    v,
                })
            }
        };
        if payload.len() != total * 4 {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                total * 4
            )));
        }
        Ok(Self {
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn find_manifest_end(bytes: &[u8]) -> Option<usize> {
    const TERM: &[u8] = b"\nend\n";
    bytes
        .windows(TERM.len())
        .position(|w| w == TERM)
        .map(|p| p + TERM.len())
}

fn parse_usizes(s: &str) -> Result<Vec<usize>, NnError> {
    s.split(',')
        .map(|d| d.parse().map_err(|_| bad(format!("bad integer list {s:?}"))))
        .collect()
}

fn parse_arch(s: &str) -> Result<Architecture, NnError> {
    let mut arch = Architecture {
        trunk: Vec::new(),
        kernel: 0,
        head_kernel: 0,
        actions: 0,
    };
    for field in s.split(' ') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad arch field {field:?}")))?;
        let one = || v.parse::<usize>().map_err(|_| bad(format!("bad arch value {v:?}")));
        match k {
            "trunk" => arch.trunk = parse_usizes(v)?,
            "kernel" => arch.kernel = one()?,
            "head_kernel" => arch.head_kernel = one()?,
            "actions" => arch.actions = one()?,
            _ => return Err(bad(format!("unknown arch field {k:?}"))),
        }
    }
    arch.validate()?;
    Ok(arch)
}
