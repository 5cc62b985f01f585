//! Model file:
//!
//! ```text
//! "DYKM"  u32 version  u32 section_count
//! section*: u32 name_len  name  u32 rank  u64 dims[rank]  f64 data[∏dims]
//! u64 block_len  key=value lines (config, seeds, vocabularies)
//! ```
//!
//! All integers and floats are little-endian; floats are stored bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::model::{Model, ModelParams};
use super::{AblationMode, ModelConfig};
use crate::attr::{AttributeVocabulary, EntityVocab};
use crate::error::{Error, Result};
use crate::graph::{EntityKind, EntityRef};
use crate::linalg::Params;

pub const MAGIC: &[u8; 4] = b"DYKM";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn config_block(model: &Model) -> String {
    let c = &model.config;
    let mut lines = vec![
        format!("mode={}", model.mode),
        format!("threshold={:?}", model.threshold),
        format!("seed={}", model.seed),
        format!("split={:?},{:?},{:?}", model.split.0, model.split.1, model.split.2),
        format!("entity_dim={}", c.entity_dim),
        format!("relation_dim={}", c.relation_dim),
        format!("attr_dim={}", c.attr_dim),
        format!("id_dim={}", c.id_dim),
        format!("layers={}", c.layers),
        format!("text_dim={}", c.text_dim),
        format!("text_seed={}", c.text_seed),
        format!("position_mode={}", c.position_mode),
        format!("fusion_dim={}", c.fusion_dim),
        format!("fusion_seed={}", c.fusion_seed),
        format!("hidden={}", c.hidden),
        format!("window_length={}", c.window_length),
        format!("observation_span={}", c.observation_span),
        format!("offline_dynamic={}", c.offline_dynamic),
        format!("membership={}", super::format_membership(&c.membership)),
    ];
    for (i, e) in model.entities.entities().iter().enumerate() {
        lines.push(format!("entity.{i}={}:{}", e.kind, e.id));
    }
    for (i, (n, v)) in model.attributes.pairs().iter().enumerate() {
        lines.push(format!("attribute.{i}={n}={v}"));
    }
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

pub(crate) fn to_bytes(model: &Model) -> Vec<u8> {
    let mut sections: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model
        .params
        .visit("", &mut |name, dims, d| sections.push((name, dims, d.to_vec())));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, dims, data) in &sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let block = config_block(model);
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out
}

pub(crate) fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing DYKM magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("section name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(bad(format!("duplicate section `{name}`")));
        }
    }
    let block_len = r.u64()? as usize;
    let block = std::str::from_utf8(r.take(block_len)?).map_err(|_| bad("config block is not UTF-8"))?;
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after config block"));
    }

    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    let mut entities: BTreeMap<usize, EntityRef> = BTreeMap::new();
    let mut attributes: BTreeMap<usize, (String, String)> = BTreeMap::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line `{line}`")))?;
        if let Some(i) = k.strip_prefix("entity.") {
            let i: usize = i.parse().map_err(|_| bad(format!("bad key `{k}`")))?;
            let (kind, id) = v.split_once(':').ok_or_else(|| bad(format!("bad entity `{v}`")))?;
            let kind: EntityKind = kind.parse().map_err(bad)?;
            entities.insert(i, EntityRef::new(kind, id)?);
        } else if let Some(i) = k.strip_prefix("attribute.") {
            let i: usize = i.parse().map_err(|_| bad(format!("bad key `{k}`")))?;
            let (n, val) = v.split_once('=').ok_or_else(|| bad(format!("bad attribute `{v}`")))?;
            attributes.insert(i, (n.to_string(), val.to_string()));
        } else {
            kv.insert(k, v);
        }
    }
    if entities.keys().copied().ne(0..entities.len()) || attributes.keys().copied().ne(0..attributes.len()) {
        return Err(bad("vocabulary indices are not dense"));
    }
    fn get<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
        kv.get(k)
            .ok_or_else(|| bad(format!("missing config key `{k}`")))?
            .parse()
            .map_err(|_| bad(format!("bad value for `{k}`")))
    }
    let mode: AblationMode = kv
        .get("mode")
        .ok_or_else(|| bad("missing config key `mode`"))?
        .parse()
        .map_err(bad)?;
    let position_mode = kv
        .get("position_mode")
        .ok_or_else(|| bad("missing config key `position_mode`"))?
        .parse()
        .map_err(bad)?;
    let config = ModelConfig {
        entity_dim: get(&kv, "entity_dim")?,
        relation_dim: get(&kv, "relation_dim")?,
        attr_dim: get(&kv, "attr_dim")?,
        id_dim: get(&kv, "id_dim")?,
        layers: get(&kv, "layers")?,
        text_dim: get(&kv, "text_dim")?,
        text_seed: get(&kv, "text_seed")?,
        position_mode,
        fusion_dim: get(&kv, "fusion_dim")?,
        fusion_seed: get(&kv, "fusion_seed")?,
        hidden: get(&kv, "hidden")?,
        window_length: get(&kv, "window_length")?,
        observation_span: get(&kv, "observation_span")?,
        offline_dynamic: get(&kv, "offline_dynamic")?,
        membership: super::parse_membership(kv.get("membership").ok_or_else(|| bad("missing config key `membership`"))?)
            .map_err(bad)?,
    };
    config.validate()?;
    let threshold: f64 = get(&kv, "threshold")?;
    let seed: u64 = get(&kv, "seed")?;

    let entities = EntityVocab::new(entities.into_values());
    let attributes = AttributeVocabulary::from_pairs(attributes.into_values());
    let mut params = ModelParams::init(&config, attributes.len(), entities.len(), 0);
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    params.visit("", &mut |name, dims, _| {
        shapes.insert(name, dims);
    });
    if shapes.len() != tensors.len() {
        return Err(bad(format!("expected {} tensors, found {}", shapes.len(), tensors.len())));
    }
    let mut err = None;
    params.visit_mut("", &mut |name, d| {
        match tensors.get(&name) {
            Some((dims, data)) if *dims == shapes[&name] && data.len() == d.len() => d.copy_from_slice(data),
            Some((dims, _)) => {
                err.get_or_insert(bad(format!("tensor `{name}` has shape {dims:?}, expected {:?}", shapes[&name])));
            }
            None => {
                err.get_or_insert(bad(format!("missing tensor `{name}`")));
            }
        };
    });
    if let Some(e) = err {
        return Err(e);
    }
    let split: Vec<f64> = kv
        .get("split")
        .ok_or_else(|| bad("missing config key `split`"))?
        .split(',')
        .map(|v| v.parse().map_err(|_| bad("bad value for `split`")))
        .collect::<Result<_>>()?;
    let [a, b, c] = split[..] else {
        return Err(bad("`split` needs three fractions"));
    };
    let mut model = Model::from_parts(config, mode, seed, threshold, params, entities, attributes)?;
    model.split = (a, b, c);
    Ok(model)
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_bytes(self)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Model> {
        from_bytes(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        from_bytes(&buf)
    }
}
