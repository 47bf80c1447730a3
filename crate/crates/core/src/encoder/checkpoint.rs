//! Checkpoint = text manifest + little-endian array blob.
//!
//! ```text
//! adbert-checkpoint 1
//! precision f32
//! config {"vocab_size":...}
//! optimizer_step 120
//! meta stage pretrain
//! blob_bytes 123456
//! tensor embeddings.tok 2048x64 0 524288
//! ...
//! ```
//!
//! Optimizer moments, when present, follow the parameters as `adam.m.*` and
//! `adam.v.*` tensors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{AdamState, EncoderConfig, EncoderParams, Precision};
use crate::error::{Error, Result};

const MAGIC: &str = "adbert-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub optimizer: Option<AdamState>,
    /// Free-form key/value pairs; keys and values must not contain whitespace.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

fn write_values(blob: &mut Vec<u8>, data: &[f64], precision: Precision) {
    match precision {
        Precision::F32 => data
            .iter()
            .for_each(|&x| blob.extend_from_slice(&(x as f32).to_le_bytes())),
        Precision::F64 => data
            .iter()
            .for_each(|&x| blob.extend_from_slice(&x.to_le_bytes())),
    }
}

fn read_values(bytes: &[u8], out: &mut [f64], precision: Precision) {
    match precision {
        Precision::F32 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64;
            }
        }
        Precision::F64 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(8)) {
                *o = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
            }
        }
    }
}

/// Serializes to `(manifest, blob)` without touching the filesystem.
pub fn encode(ckpt: &Checkpoint) -> Result<(String, Vec<u8>)> {
    let params = &ckpt.params;
    let precision = params.config.precision;
    let config_json = serde_json::to_string(&params.config).map_err(|e| bad(e.to_string()))?;
    let mut manifest = String::new();
    let mut blob = Vec::new();
    let mut entries = String::new();
    let mut add = |prefix: &str, p: &EncoderParams, blob: &mut Vec<u8>| {
        for t in p.tensors() {
            let offset = blob.len();
            write_values(blob, t.data, precision);
            let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                entries,
                "tensor {prefix}{} {} {offset} {}",
                t.name,
                shape.join("x"),
                blob.len() - offset
            );
        }
    };
    add("", params, &mut blob);
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.config != params.config || opt.v.config != params.config {
            return Err(bad("optimizer state does not match parameters"));
        }
        add("adam.m.", &opt.m, &mut blob);
        add("adam.v.", &opt.v, &mut blob);
    }
    let _ = writeln!(manifest, "{MAGIC}");
    let _ = writeln!(manifest, "precision {}", precision.name());
    let _ = writeln!(manifest, "config {config_json}");
    match &ckpt.optimizer {
        Some(o) => {
            let _ = writeln!(manifest, "optimizer_step {}", o.step);
        }
        None => {
            let _ = writeln!(manifest, "optimizer none");
        }
    }
    for (k, v) in &ckpt.meta {
        if k.is_empty()
            || v.is_empty()
            || k.contains(char::is_whitespace)
            || v.contains(char::is_whitespace)
        {
            return Err(bad(format!(
                "meta entry {k:?}={v:?} must be non-empty and contain no whitespace"
            )));
        }
        let _ = writeln!(manifest, "meta {k} {v}");
    }
    let _ = writeln!(manifest, "blob_bytes {}", blob.len());
    manifest.push_str(&entries);
    Ok((manifest, blob))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let (manifest, blob) = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let bp = blob_path(path);
    fs::write(&bp, &blob).map_err(|e| Error::io(format!("writing {}", bp.display()), e))?;
    fs::write(path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

/// Parses a manifest and blob previously produced by [`encode`].
pub fn decode(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint manifest"));
    }
    let mut config: Option<EncoderConfig> = None;
    let mut precision: Option<Precision> = None;
    let mut opt_step: Option<Option<usize>> = None;
    let mut declared_bytes: Option<usize> = None;
    let mut meta = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("manifest line {}: {line:?}", lineno + 2)))?;
        match key {
            "precision" => {
                precision = Some(match rest {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(bad(format!("unknown precision {other:?}"))),
                })
            }
            "config" => {
                config = Some(serde_json::from_str(rest).map_err(|e| bad(format!("config: {e}")))?)
            }
            "optimizer" if rest == "none" => opt_step = Some(None),
            "optimizer_step" => {
                opt_step = Some(Some(rest.parse().map_err(|_| bad("bad optimizer_step"))?))
            }
            "meta" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad("bad meta line"))?;
                meta.push((k.to_string(), v.to_string()));
            }
            "blob_bytes" => declared_bytes = Some(rest.parse().map_err(|_| bad("bad blob_bytes"))?),
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("bad tensor line {line:?}")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset = f[2]
                    .parse()
                    .map_err(|_| bad(format!("bad offset in {line:?}")))?;
                let len = f[3]
                    .parse()
                    .map_err(|_| bad(format!("bad length in {line:?}")))?;
                tensors.push((f[0].to_string(), shape, offset, len));
            }
            other => return Err(bad(format!("unknown manifest key {other:?}"))),
        }
    }
    let config = config.ok_or_else(|| bad("manifest lacks config"))?;
    let precision = precision.ok_or_else(|| bad("manifest lacks precision"))?;
    if precision != config.precision {
        return Err(bad("precision line disagrees with config"));
    }
    config.validate().map_err(|e| bad(e.to_string()))?;
    let opt_step = opt_step.ok_or_else(|| bad("manifest lacks optimizer line"))?;
    let declared = declared_bytes.ok_or_else(|| bad("manifest lacks blob_bytes"))?;
    if declared != blob.len() {
        return Err(bad(format!(
            "blob is {} bytes, manifest declares {declared}",
            blob.len()
        )));
    }

    let mut params = EncoderParams::zeros(&config);
    let mut optimizer = opt_step.map(|step| AdamState {
        step,
        ..AdamState::new(&params)
    });
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape.clone()).collect();
    let mut targets: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
    for (t, shape) in params.tensors_mut().into_iter().zip(&shapes) {
        targets.push((t.name, shape.clone(), t.data));
    }
    if let Some(o) = optimizer.as_mut() {
        for (t, shape) in o.m.tensors_mut().into_iter().zip(&shapes) {
            targets.push((format!("adam.m.{}", t.name), shape.clone(), t.data));
        }
        for (t, shape) in o.v.tensors_mut().into_iter().zip(&shapes) {
            targets.push((format!("adam.v.{}", t.name), shape.clone(), t.data));
        }
    }
    if targets.len() != tensors.len() {
        return Err(bad(format!(
            "manifest lists {} tensors, model expects {}",
            tensors.len(),
            targets.len()
        )));
    }
    let width = precision.bytes();
    let mut cursor = 0;
    for ((name, shape, data), (m_name, m_shape, offset, len)) in targets.iter_mut().zip(&tensors) {
        if name != m_name || shape != m_shape {
            return Err(bad(format!(
                "expected tensor {name} {shape:?}, manifest has {m_name} {m_shape:?}"
            )));
        }
        if *offset != cursor || *len != data.len() * width || offset + len > blob.len() {
            return Err(bad(format!(
                "tensor {name}: offset/length {offset}/{len} inconsistent with layout"
            )));
        }
        read_values(&blob[*offset..offset + len], data, precision);
        cursor += len;
    }
    drop(targets);
    if !params.is_finite() {
        return Err(bad("checkpoint contains non-finite parameters"));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        meta,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bp = blob_path(path);
    for p in [path, bp.as_path()] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
    }
    let manifest = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let blob = fs::read(&bp).map_err(|e| Error::io(format!("reading {}", bp.display()), e))?;
    decode(&manifest, &blob)
}

/// Loads and rejects checkpoints whose configuration differs from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.params.config != expected {
        return Err(bad(format!(
            "checkpoint config {:?} does not match expected {:?}",
            ckpt.params.config, expected
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn sample(precision: Precision) -> Checkpoint {
        let cfg = EncoderConfig {
            precision,
            ..EncoderConfig::tiny(30)
        };
        let params = init_params(&cfg, 9).unwrap();
        let mut opt = AdamState::new(&params);
        opt.step = 7;
        opt.m.cls_w.fill(0.25);
        opt.v.tok_emb[[3, 1]] = 1e-9;
        opt.v.round_to_precision();
        Checkpoint {
            params,
            optimizer: Some(opt),
            meta: vec![("stage".into(), "pretrain".into())],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for precision in [Precision::F32, Precision::F64] {
            let a = dir.path().join(format!("a-{}.ckpt", precision.name()));
            let b = dir.path().join(format!("b-{}.ckpt", precision.name()));
            let ck = sample(precision);
            save_checkpoint(&ck, &a).unwrap();
            let loaded = load_checkpoint(&a).unwrap();
            assert_eq!(loaded, ck);
            save_checkpoint(&loaded, &b).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
            assert_eq!(
                fs::read(blob_path(&a)).unwrap(),
                fs::read(blob_path(&b)).unwrap()
            );
        }
    }

    #[test]
    fn f32_blob_uses_four_bytes_per_value() {
        let ck = sample(Precision::F32);
        let (_, blob) = encode(&ck).unwrap();
        assert_eq!(blob.len(), 3 * ck.params.n_params() * 4);
    }

    #[test]
    fn truncated_blob_rejected() {
        let (manifest, mut blob) = encode(&sample(Precision::F64)).unwrap();
        blob.pop();
        assert!(matches!(
            decode(&manifest, &blob),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn tampered_tensor_length_rejected() {
        let (manifest, blob) = encode(&sample(Precision::F64)).unwrap();
        let line = manifest
            .lines()
            .find(|l| l.starts_with("tensor embeddings.pos"))
            .unwrap();
        let mut fields: Vec<String> = line.split(' ').map(String::from).collect();
        fields[4] = (fields[4].parse::<usize>().unwrap() - 8).to_string();
        let tampered = manifest.replace(line, &fields.join(" "));
        assert!(decode(&tampered, &blob).is_err());
    }

    #[test]
    fn cross_config_load_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(Precision::F64), &path).unwrap();
        let other = EncoderConfig::tiny(31);
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::Checkpoint(_))
        ));
        assert!(load_checkpoint_for(&path, &EncoderConfig::tiny(30)).is_ok());
    }

    #[test]
    fn missing_files_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.ckpt")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
