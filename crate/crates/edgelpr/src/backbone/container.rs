//! Binary containers for weights and checkpoints.
//!
//! Layout: magic `LPRW`, format version, a string metadata table (graph
//! manifest, preset name, config echo), then named tensors as raw
//! little-endian float32 blobs. Round-trips are bit-exact.

use super::{BackboneError, LayerSpec, ModelGraph, WeightStore};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LPRW";
const VERSION: u32 = 1;

/// Human-readable graph manifest, one line per node.
pub fn graph_manifest(graph: &ModelGraph) -> String {
    let mut out = format!(
        "input {}x{}x{}\ndescriptor_dim {}\n",
        graph.input_shape[0], graph.input_shape[1], graph.input_shape[2], graph.descriptor_dim
    );
    for (idx, node) in graph.nodes.iter().enumerate() {
        let input = node
            .input
            .map(|i| i.to_string())
            .unwrap_or_else(|| "input".to_string());
        let desc = match &node.spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                bias,
            } => format!(
                "conv2d in={in_ch} out={out_ch} k={kernel} s={stride} p={padding} g={groups} bias={bias}"
            ),
            LayerSpec::BatchNorm { channels, eps } => format!("batchnorm c={channels} eps={eps}"),
            LayerSpec::Act(kind) => format!("act {kind:?}").to_lowercase(),
            LayerSpec::ResidualAdd { skip } => format!("residual_add skip={skip}"),
            LayerSpec::ChannelShuffle { groups } => format!("channel_shuffle g={groups}"),
            LayerSpec::GlobalAvgPool => "global_avg_pool".to_string(),
            LayerSpec::Linear { in_dim, out_dim, bias } => {
                format!("linear in={in_dim} out={out_dim} bias={bias}")
            }
        };
        out.push_str(&format!("{idx} {desc} <- {input}\n"));
    }
    out
}

/// First 8 bytes of the SHA-256 of the manifest, as a stable graph identity.
pub fn graph_hash(graph: &ModelGraph) -> u64 {
    let digest = Sha256::digest(graph_manifest(graph).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn write_container<W: Write>(
    mut w: W,
    meta: &BTreeMap<String, String>,
    tensors: &BTreeMap<String, Tensor>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        for s in [k, v] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
    }
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(
    mut r: R,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, Tensor>), BackboneError> {
    let bad = |msg: &str| BackboneError::MalformedContainer(msg.to_string());
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32, BackboneError> {
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("unexpected end of container"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(BackboneError::MalformedContainer(format!(
            "unsupported container version {version}"
        )));
    }
    let read_string = |r: &mut R, len: usize| -> Result<String, BackboneError> {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad("truncated string"))?;
        String::from_utf8(buf).map_err(|_| bad("non-utf8 string"))
    };

    let n_meta = read_u32(&mut r)? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let klen = read_u32(&mut r)? as usize;
        let k = read_string(&mut r, klen)?;
        let vlen = read_u32(&mut r)? as usize;
        let v = read_string(&mut r, vlen)?;
        meta.insert(k, v);
    }
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let nlen = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, nlen)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut fbuf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut fbuf).map_err(|_| bad("truncated tensor data"))?;
            data.push(f32::from_le_bytes(fbuf));
        }
        tensors.insert(
            name,
            Tensor::from_vec(&shape, data).map_err(|e| BackboneError::MalformedContainer(e.to_string()))?,
        );
    }
    Ok((meta, tensors))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BackboneError + '_ {
    move |source| BackboneError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn weights_to_tensors(weights: &WeightStore) -> BTreeMap<String, Tensor> {
    weights
        .params
        .iter()
        .map(|((layer, name), t)| (format!("w.{layer:04}.{name}"), t.clone()))
        .collect()
}

pub fn tensors_to_weights(
    tensors: &BTreeMap<String, Tensor>,
    prefix: &str,
) -> Result<WeightStore, BackboneError> {
    let mut ws = WeightStore::default();
    for (key, t) in tensors {
        let Some(rest) = key.strip_prefix(prefix) else {
            continue;
        };
        let (layer, name) = rest
            .split_once('.')
            .ok_or_else(|| BackboneError::MalformedContainer(format!("bad tensor key {key}")))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| BackboneError::MalformedContainer(format!("bad layer index in {key}")))?;
        ws.insert(layer, name, t.clone());
    }
    Ok(ws)
}

/// Saves a weight container: graph manifest + hash in the header, raw f32
/// tensors behind it. `extra_meta` lets callers embed a preset name or a
/// config echo.
pub fn save_weights(
    path: &Path,
    graph: &ModelGraph,
    weights: &WeightStore,
    extra_meta: &BTreeMap<String, String>,
) -> Result<(), BackboneError> {
    let mut meta = extra_meta.clone();
    meta.insert("graph_manifest".into(), graph_manifest(graph));
    meta.insert("graph_hash".into(), format!("{:016x}", graph_hash(graph)));
    meta.insert("descriptor_dim".into(), graph.descriptor_dim.to_string());
    let tensors = weights_to_tensors(weights);
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_container(std::io::BufWriter::new(file), &meta, &tensors).map_err(io_err(path))
}

/// Loads a weight container, returning the metadata and the store.
pub fn load_weights(path: &Path) -> Result<(BTreeMap<String, String>, WeightStore), BackboneError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let (meta, tensors) = read_container(std::io::BufReader::new(file))?;
    let ws = tensors_to_weights(&tensors, "w.")?;
    Ok((meta, ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::presets;

    #[test]
    fn container_round_trips_bit_exactly() {
        let graph = presets::build_preset("tiny_mobilenet", 32).unwrap();
        let ws = WeightStore::init_random(&graph, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lprw");
        save_weights(&path, &graph, &ws, &BTreeMap::new()).unwrap();
        let (meta, back) = load_weights(&path).unwrap();
        assert_eq!(meta["graph_hash"], format!("{:016x}", graph_hash(&graph)));
        assert_eq!(ws.params.len(), back.params.len());
        for (k, t) in &ws.params {
            let b = &back.params[k];
            assert_eq!(t.shape, b.shape);
            // bit-exact comparison
            for (x, y) in t.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn graph_hash_distinguishes_presets() {
        let a = presets::build_preset("tiny_resnet", 64).unwrap();
        let b = presets::build_preset("tiny_shufflenet", 64).unwrap();
        assert_ne!(graph_hash(&a), graph_hash(&b));
        assert_ne!(
            graph_hash(&a),
            graph_hash(&presets::build_preset("tiny_resnet", 65).unwrap())
        );
    }

    #[test]
    fn malformed_container_rejected() {
        let err = read_container(&b"XXXX"[..]).unwrap_err();
        assert!(matches!(err, BackboneError::MalformedContainer(_)));
    }
}
