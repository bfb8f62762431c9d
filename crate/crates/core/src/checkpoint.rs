//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DNPC"                 magic
//! u16                    format version
//! u32 + bytes            header: UTF-8 `key=value` lines
//! u32                    array count
//! (u64 + f32 * n)*       arrays: online encoder, reference encoder (if
//!                        any), head; each in parameter registration order
//! u64                    FNV-1a 64 of every preceding byte
//! ```

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::prototype::{ProtoLossKind, PrototypeConfig};
use crate::recon::{ModelConfig, ModelState, VariantMode};
use crate::tensor::{Real, Tensor};
use crate::vit::EncoderConfig;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DNPC";
pub const VERSION: u16 = 1;

/// A loaded checkpoint: the model plus any extra header entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState<f32>,
    pub extra: BTreeMap<String, String>,
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn header<T: Real>(state: &ModelState<T>, extra: &BTreeMap<String, String>) -> Result<String> {
    let c = &state.config;
    let e = &c.encoder;
    let mut fields: Vec<(&str, String)> = vec![
        ("mode", state.mode.as_str().into()),
        ("image", format!("{}x{}x{}", e.height, e.width, e.channels)),
        ("patch", e.patch.to_string()),
        ("dim", e.dim.to_string()),
        ("depth", e.depth.to_string()),
        ("heads", e.heads.to_string()),
        ("mlp_ratio", e.mlp_ratio.to_string()),
        ("extract", join(&e.extract)),
        ("protos", c.prototypes.count.to_string()),
        ("proto_heads", c.prototypes.heads.to_string()),
        ("proto_mlp_ratio", c.prototypes.mlp_ratio.to_string()),
        ("decoder_depth", c.decoder_depth.to_string()),
        ("decoder_heads", c.decoder_heads.to_string()),
        ("decoder_mlp_ratio", c.mlp_ratio.to_string()),
        ("bottleneck_dropout", c.bottleneck_dropout.to_string()),
        ("beta", state.beta.to_string()),
        ("lambda", state.lambda.to_string()),
        ("proto_loss", state.proto_kind.as_str().into()),
        ("seed", state.seed.to_string()),
        ("step", state.step.to_string()),
        ("reference", (state.reference.is_some() as u8).to_string()),
    ];
    for (k, v) in extra {
        if fields.iter().any(|(f, _)| f == k) {
            return Err(Error::Checkpoint(format!(
                "extra key {k:?} shadows a model field"
            )));
        }
        fields.push((k.as_str(), v.clone()));
    }
    let mut out = String::new();
    for (k, v) in fields {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "header entry {k:?} is not representable"
            )));
        }
        out.push_str(&format!("{k}={v}\n"));
    }
    Ok(out)
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn push_set<T: Real>(out: &mut Vec<u8>, ps: &ParamSet<T>) {
    for t in ps.values() {
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
}

/// Serializes `state` with its values rounded to f32.
pub fn to_bytes<T: Real>(
    state: &ModelState<T>,
    extra: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let head = header(state, extra)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(head.as_bytes());
    let sets: Vec<&ParamSet<T>> = std::iter::once(&state.encoder.params)
        .chain(state.reference.as_ref())
        .chain(std::iter::once(&state.head.params))
        .collect();
    let count: usize = sets.iter().map(|s| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for s in sets {
        push_set(&mut out, s);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn get(&self, k: &str) -> Result<&str> {
        self.0
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {k:?}")))
    }

    fn num<U: std::str::FromStr>(&self, k: &str) -> Result<U> {
        let v = self.get(k)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("header field {k}={v:?} is malformed")))
    }

    fn list(&self, k: &str) -> Result<Vec<usize>> {
        self.get(k)?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Checkpoint(format!("header field {k} is malformed")))
            })
            .collect()
    }
}

const MODEL_KEYS: [&str; 21] = [
    "mode",
    "image",
    "patch",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "extract",
    "protos",
    "proto_heads",
    "proto_mlp_ratio",
    "decoder_depth",
    "decoder_heads",
    "decoder_mlp_ratio",
    "bottleneck_dropout",
    "beta",
    "lambda",
    "proto_loss",
    "seed",
    "step",
    "reference",
];

fn fill(ps: &mut ParamSet<f32>, r: &mut Reader<'_>) -> Result<()> {
    for k in 0..ps.len() {
        let n = r.u64()? as usize;
        let shape = ps.values()[k].shape().to_vec();
        let expected: usize = shape.iter().product();
        if n != expected {
            return Err(Error::Checkpoint(format!(
                "parameter {} holds {n} values, expected {expected}",
                ps.names()[k]
            )));
        }
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("oversized array".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ps.values_mut()[k] = Tensor::new(shape, data)?;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 + 2 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}; this build reads version {VERSION} only"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != checksum(body) {
        return Err(Error::Checkpoint(
            "checksum mismatch; file is corrupt".into(),
        ));
    }
    let r_end = body.len();
    let hlen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("header line {line:?} lacks '='")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let h = Header(map);
    let image: Vec<usize> = h
        .get("image")?
        .split('x')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Checkpoint("malformed image dims".into()))
        })
        .collect::<Result<_>>()?;
    let [height, width, channels] = image[..] else {
        return Err(Error::Checkpoint("image dims need three fields".into()));
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            height,
            width,
            channels,
            patch: h.num("patch")?,
            dim: h.num("dim")?,
            depth: h.num("depth")?,
            heads: h.num("heads")?,
            mlp_ratio: h.num("mlp_ratio")?,
            extract: h.list("extract")?,
        },
        prototypes: PrototypeConfig {
            count: h.num("protos")?,
            heads: h.num("proto_heads")?,
            mlp_ratio: h.num("proto_mlp_ratio")?,
        },
        decoder_depth: h.num("decoder_depth")?,
        decoder_heads: h.num("decoder_heads")?,
        mlp_ratio: h.num("decoder_mlp_ratio")?,
        bottleneck_dropout: h.num("bottleneck_dropout")?,
    };
    let mode = VariantMode::parse(h.get("mode")?).ok_or_else(|| {
        Error::Checkpoint(format!("unknown mode {:?}", h.get("mode").unwrap_or("")))
    })?;
    let proto_kind = ProtoLossKind::parse(h.get("proto_loss")?)
        .ok_or_else(|| Error::Checkpoint("unknown prototype loss".into()))?;
    let seed: u64 = h.num("seed")?;
    let has_reference = h.num::<u8>("reference")? == 1;
    if has_reference != mode.flags().dual_encoder {
        return Err(Error::Checkpoint(format!(
            "mode {mode} is inconsistent with reference={}",
            has_reference as u8
        )));
    }
    let mut state = ModelState::<f32>::init(&config, mode, seed)
        .map_err(|e| Error::Checkpoint(format!("header describes an invalid model: {e}")))?;
    state.beta = h.num("beta")?;
    state.lambda = h.num("lambda")?;
    state.proto_kind = proto_kind;
    state.step = h.num("step")?;
    let count = r.u32()? as usize;
    let expected = state.encoder.params.len()
        + state.reference.as_ref().map_or(0, |p| p.len())
        + state.head.params.len();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} arrays, the model needs {expected}"
        )));
    }
    let mut body_reader = Reader {
        bytes: &bytes[..r_end],
        pos: r.pos,
    };
    fill(&mut state.encoder.params, &mut body_reader)?;
    if let Some(reference) = state.reference.as_mut() {
        fill(reference, &mut body_reader)?;
    }
    fill(&mut state.head.params, &mut body_reader)?;
    if body_reader.pos != r_end {
        return Err(Error::Checkpoint(
            "trailing bytes after the parameter arrays".into(),
        ));
    }
    let extra =
        h.0.into_iter()
            .filter(|(k, _)| !MODEL_KEYS.contains(&k.as_str()))
            .collect();
    Ok(Checkpoint { state, extra })
}

pub fn save<T: Real>(
    path: &Path,
    state: &ModelState<T>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = to_bytes(state, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
