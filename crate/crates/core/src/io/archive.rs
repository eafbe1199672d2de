//! Binary model archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMOE" | version u32 | precision tag u8 | metadata len u32 | metadata (JSON)
//! blob count u32 | { name len u32 | name | ndims u32 | dims u32… | values } …
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Values are stored at the ensemble's native width; loading may widen
//! (f32 archive into an f64 ensemble) but never narrows.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::{ConfidenceHead, EnsembleConfig};
use crate::ensemble::{Ensemble, Expert, TrainState};
use crate::error::{Error, Result};
use crate::gating::GatingConfig;
use crate::nn::{LayerParams, LayerSpec, Network, Tensor};
use crate::partition::SuperclassMap;
use crate::scalar::{Precision, Scalar};

pub const MAGIC: &[u8; 4] = b"MMOE";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetMeta {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    frozen: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExpertMeta {
    classes: Vec<usize>,
    body: NetMeta,
    head_layer: usize,
    head: NetMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: EnsembleConfig,
    map: SuperclassMap,
    gating: GatingConfig,
    seed: u64,
    state: TrainState,
    shared: NetMeta,
    mediator: NetMeta,
    experts: Vec<ExpertMeta>,
}

fn net_meta<S: Scalar>(net: &Network<S>) -> NetMeta {
    NetMeta {
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().to_vec(),
        frozen: net.frozen_mask().to_vec(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| {
        Error::InvalidArgument(format!("{v} does not fit the archive's u32 fields"))
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[S]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for &v in values {
        v.write_le(out);
    }
    Ok(())
}

fn put_net<S: Scalar>(
    out: &mut Vec<u8>,
    prefix: &str,
    net: &Network<S>,
    count: &mut usize,
) -> Result<()> {
    for (i, p) in net.params().iter().enumerate() {
        if let Some(p) = p {
            put_blob(
                out,
                &format!("{prefix}/{i}/weight"),
                p.weight.shape(),
                p.weight.data(),
            )?;
            put_blob(out, &format!("{prefix}/{i}/bias"), &[p.bias.len()], &p.bias)?;
            *count += 2;
        }
    }
    Ok(())
}

/// Serializes an ensemble to archive bytes.
pub fn to_bytes<S: Scalar>(ens: &Ensemble<S>) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: ens.config.clone(),
        map: ens.map.clone(),
        gating: ens.gating,
        seed: ens.seed,
        state: ens.state().clone(),
        shared: net_meta(ens.shared()),
        mediator: net_meta(ens.mediator_body()),
        experts: ens
            .experts()
            .iter()
            .map(|e| ExpertMeta {
                classes: e.classes.clone(),
                body: net_meta(&e.body),
                head_layer: e.head.layer,
                head: net_meta(&e.head.net),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::ArchiveCorrupt(e.to_string()))?;

    let mut blobs = Vec::new();
    let mut count = 0;
    put_net(&mut blobs, "shared", ens.shared(), &mut count)?;
    put_net(&mut blobs, "mediator", ens.mediator_body(), &mut count)?;
    for (i, e) in ens.experts().iter().enumerate() {
        put_net(&mut blobs, &format!("expert{i}/body"), &e.body, &mut count)?;
        put_net(
            &mut blobs,
            &format!("expert{i}/head"),
            &e.head.net,
            &mut count,
        )?;
    }

    let mut out = Vec::with_capacity(64 + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::PRECISION.tag());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, count)?;
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::ArchiveCorrupt(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

type Blobs<S> = BTreeMap<String, (Vec<usize>, Vec<S>)>;

fn read_values<S: Scalar>(r: &mut Reader, stored: Precision, n: usize) -> Result<Vec<S>> {
    let width = stored.tag() as usize;
    let raw = r.take(
        n.checked_mul(width)
            .ok_or_else(|| Error::ArchiveCorrupt("blob too large".into()))?,
    )?;
    Ok(raw
        .chunks_exact(width)
        .map(|c| match stored {
            Precision::F32 => {
                S::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            }
            Precision::F64 => S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        })
        .collect())
}

fn take_net<S: Scalar>(blobs: &mut Blobs<S>, prefix: &str, meta: NetMeta) -> Result<Network<S>> {
    let mut params = Vec::with_capacity(meta.layers.len());
    for (i, layer) in meta.layers.iter().enumerate() {
        if !layer.has_params() {
            params.push(None);
            continue;
        }
        let mut take = |part: &str| {
            let name = format!("{prefix}/{i}/{part}");
            blobs.remove(&name).ok_or(Error::MissingBlob(name))
        };
        let (wshape, w) = take("weight")?;
        let (_, b) = take("bias")?;
        params.push(Some(LayerParams {
            weight: Tensor::new(wshape, w)?,
            bias: b,
        }));
    }
    Network::from_parts(meta.input_shape, meta.layers, params, meta.frozen)
}

/// Parses archive bytes into an ensemble of scalar type `S`.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Ensemble<S>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::ArchiveMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::ArchiveVersion(version));
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(Error::ArchiveCorrupt("shorter than its checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader {
        bytes: body,
        pos: r.pos,
    };

    let tag = r.take(1)?[0];
    let stored = Precision::from_tag(tag)
        .ok_or_else(|| Error::ArchiveCorrupt(format!("unknown precision tag {tag}")))?;
    if stored == Precision::F64 && S::PRECISION == Precision::F32 {
        return Err(Error::InvalidArgument(
            "archive holds 64-bit values; load it into an f64 ensemble".into(),
        ));
    }
    let meta_len = r.u32()?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::ArchiveCorrupt(format!("metadata: {e}")))?;

    let count = r.u32()?;
    let mut blobs: Blobs<S> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::ArchiveCorrupt("blob name is not UTF-8".into()))?;
        let ndims = r.u32()?;
        let shape = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = read_values(&mut r, stored, shape.iter().product())?;
        blobs.insert(name, (shape, values));
    }
    if r.pos != body.len() {
        return Err(Error::ArchiveCorrupt(
            "trailing bytes after the last blob".into(),
        ));
    }

    let shared = take_net(&mut blobs, "shared", meta.shared)?;
    let mediator = take_net(&mut blobs, "mediator", meta.mediator)?;
    let mut experts = Vec::with_capacity(meta.experts.len());
    for (i, e) in meta.experts.into_iter().enumerate() {
        let body = take_net(&mut blobs, &format!("expert{i}/body"), e.body)?;
        let net = take_net(&mut blobs, &format!("expert{i}/head"), e.head)?;
        experts.push(Expert {
            body,
            head: ConfidenceHead {
                layer: e.head_layer,
                net,
            },
            classes: e.classes,
        });
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::ArchiveCorrupt(format!("unexpected blob `{extra}`")));
    }
    Ensemble::from_parts(
        meta.config,
        meta.map,
        meta.gating,
        meta.seed,
        shared,
        mediator,
        experts,
        meta.state,
    )
}

pub fn save_model<S: Scalar>(ens: &Ensemble<S>, path: &Path) -> Result<()> {
    let bytes = to_bytes(ens)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Ensemble<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Ensemble<f32> {
        let mut cfg = EnsembleConfig::mnist_slim(2, (2, 3), 8);
        cfg.shared_prefix_len = 1;
        let map = SuperclassMap::contiguous(&[2, 3]).unwrap();
        let mut ens = Ensemble::new(cfg, map, GatingConfig::default(), 7).unwrap();
        ens.state.mediator = true;
        ens.derive_experts().unwrap();
        ens
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let ens = tiny();
        let bytes = to_bytes(&ens).unwrap();
        assert_eq!(&bytes[..4], b"MMOE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back: Ensemble<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, ens);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert!(back.shared().frozen_mask().iter().all(|&f| f));
    }

    #[test]
    fn widening_load() {
        let ens = tiny();
        let wide: Ensemble<f64> = from_bytes(&to_bytes(&ens).unwrap()).unwrap();
        let a = ens.shared().params()[0].as_ref().unwrap().weight.data();
        let b = wide.shared().params()[0].as_ref().unwrap().weight.data();
        assert!(a.iter().zip(b).all(|(&x, &y)| x as f64 == y));
        assert!(matches!(
            from_bytes::<f32>(&to_bytes(&wide).unwrap()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&tiny()).unwrap();
        let mut flipped = bytes.clone();
        let at = bytes.len() - 100;
        flipped[at] ^= 0x01;
        assert!(matches!(from_bytes::<f32>(&flipped), Err(Error::Checksum)));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            from_bytes::<f32>(&bad_magic),
            Err(Error::ArchiveMagic)
        ));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes::<f32>(&future),
            Err(Error::ArchiveVersion(2))
        ));

        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn missing_blob_is_named() {
        let ens = tiny();
        let bytes = to_bytes(&ens).unwrap();
        // rebuild the archive with the last blob dropped and a valid checksum
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let mut r = Reader {
            bytes: body,
            pos: 9,
        };
        let meta_len = r.u32().unwrap();
        r.take(meta_len).unwrap();
        let count_at = r.pos;
        let count = r.u32().unwrap();
        let mut last_start = 0;
        for _ in 0..count {
            last_start = r.pos;
            let n = r.u32().unwrap();
            r.take(n).unwrap();
            let nd = r.u32().unwrap();
            let shape: Vec<usize> = (0..nd).map(|_| r.u32().unwrap()).collect();
            r.take(shape.iter().product::<usize>() * 4).unwrap();
        }
        let mut out = body[..last_start].to_vec();
        out[count_at..count_at + 4].copy_from_slice(&((count - 1) as u32).to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        match from_bytes::<f32>(&out) {
            Err(Error::MissingBlob(name)) => assert_eq!(name, "expert1/head/0/bias"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
