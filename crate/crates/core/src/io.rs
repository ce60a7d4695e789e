//! Persistence: a named-tensor checkpoint container with content hashing,
//! a key=value run-configuration parser, and simple raster/CSV writers.
//! All writes go through a temp-file-then-rename step so partially written
//! files are never observed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoiser::{BranchKind, ControlBranchParams, DenoiserParams, FinetuneScope, NetConfig};
use crate::error::{Error, Result};
use crate::synthdata::RASTER_SIZE;
use crate::tensor::{Tensor, TensorMap};

const MAGIC: &[u8; 8] = b"GCMPCKP\0";
const FORMAT_VERSION: u32 = 1;

/// A checkpoint: string metadata plus named f64 tensors. The on-disk layout
/// is little-endian with a trailing SHA-256 over everything before it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: TensorMap,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ck.meta.len() as u64).to_le_bytes());
    for (k, v) in &ck.meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ck.tensors {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.dims.len() as u64).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = Sha256::digest(&buf);
    buf.extend_from_slice(&hash);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptModelFile {
                field: field.into(),
                message: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u64(field)? as usize;
        if n > 1 << 20 {
            return Err(Error::CorruptModelFile {
                field: field.into(),
                message: format!("string length {n} out of range"),
            });
        }
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::CorruptModelFile {
            field: field.into(),
            message: "invalid utf-8".into(),
        })
    }
}

fn decode(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptModelFile {
            field: "header".into(),
            message: "file too short".into(),
        });
    }
    let (body, hash) = buf.split_at(buf.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != hash {
        return Err(Error::CorruptModelFile {
            field: "hash".into(),
            message: "content hash mismatch".into(),
        });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptModelFile {
            field: "magic".into(),
            message: "bad magic bytes".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let n_meta = r.u64("meta count")? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = r.string("meta key")?;
        let v = r.string("meta value")?;
        meta.insert(k, v);
    }
    let n_tensors = r.u64("tensor count")? as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?;
        let ndims = r.u64("tensor rank")? as usize;
        if ndims > 8 {
            return Err(Error::CorruptModelFile {
                field: name,
                message: format!("rank {ndims} out of range"),
            });
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(r.u64("tensor dim")? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(Error::CorruptModelFile {
                field: name,
                message: format!("element count {n} out of range"),
            });
        }
        let raw = r.take(8 * n, "tensor payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor { dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::CorruptModelFile {
            field: "trailer".into(),
            message: "trailing bytes after tensor table".into(),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

fn net_config_meta(cfg: &NetConfig, meta: &mut BTreeMap<String, String>) {
    meta.insert("net.height".into(), cfg.height.to_string());
    meta.insert("net.width".into(), cfg.width.to_string());
    meta.insert("net.c1".into(), cfg.c1.to_string());
    meta.insert("net.c2".into(), cfg.c2.to_string());
    meta.insert("net.emb_dim".into(), cfg.emb_dim.to_string());
    meta.insert("net.time_dim".into(), cfg.time_dim.to_string());
    meta.insert("net.num_prompts".into(), cfg.num_prompts.to_string());
    meta.insert("net.attr_dim".into(), cfg.attr_dim.to_string());
    meta.insert("net.pose_channels".into(), cfg.pose_channels.to_string());
    meta.insert("net.skip".into(), cfg.skip.to_string());
    meta.insert("net.coords".into(), cfg.coords.to_string());
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    meta.get(key)
        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing meta key {key:?}")))?
        .parse()
        .map_err(|_| Error::IncompatibleCheckpoint(format!("meta key {key:?} is not an integer")))
}

fn net_config_from_meta(meta: &BTreeMap<String, String>) -> Result<NetConfig> {
    Ok(NetConfig {
        height: meta_usize(meta, "net.height")?,
        width: meta_usize(meta, "net.width")?,
        c1: meta_usize(meta, "net.c1")?,
        c2: meta_usize(meta, "net.c2")?,
        emb_dim: meta_usize(meta, "net.emb_dim")?,
        time_dim: meta_usize(meta, "net.time_dim")?,
        num_prompts: meta_usize(meta, "net.num_prompts")?,
        attr_dim: meta_usize(meta, "net.attr_dim")?,
        pose_channels: meta_usize(meta, "net.pose_channels")?,
        skip: meta.get("net.skip").map(String::as_str) == Some("true"),
        coords: meta.get("net.coords").map(String::as_str) == Some("true"),
    })
}

pub fn checkpoint_from_base(base: &DenoiserParams) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "base".into());
    meta.insert("frozen".into(), base.frozen.to_string());
    net_config_meta(&base.config, &mut meta);
    Checkpoint {
        meta,
        tensors: base.tensors.clone(),
    }
}

pub fn base_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserParams> {
    if ck.meta.get("kind").map(String::as_str) != Some("base") {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected a base checkpoint, found kind {:?}",
            ck.meta.get("kind")
        )));
    }
    Ok(DenoiserParams {
        config: net_config_from_meta(&ck.meta)?,
        tensors: ck.tensors.clone(),
        frozen: ck.meta.get("frozen").map(String::as_str) == Some("true"),
    })
}

pub fn checkpoint_from_branch(branch: &ControlBranchParams) -> Checkpoint {
    let mut meta = BTreeMap::new();
    let kind = match branch.kind {
        BranchKind::Pose => "pose",
        BranchKind::Attribute => "attribute",
    };
    meta.insert("kind".into(), kind.into());
    meta.insert("scope".into(), branch.scope.as_str().into());
    net_config_meta(&branch.config, &mut meta);
    Checkpoint {
        meta,
        tensors: branch.tensors.clone(),
    }
}

pub fn branch_from_checkpoint(ck: &Checkpoint) -> Result<ControlBranchParams> {
    let kind = match ck.meta.get("kind").map(String::as_str) {
        Some("pose") => BranchKind::Pose,
        Some("attribute") => BranchKind::Attribute,
        other => {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a branch checkpoint, found kind {other:?}"
            )))
        }
    };
    let scope = match ck.meta.get("scope").map(String::as_str) {
        Some("attn_only") => FinetuneScope::AttnOnly,
        Some("all") | None => FinetuneScope::All,
        Some(other) => {
            return Err(Error::IncompatibleCheckpoint(format!(
                "unknown finetune scope {other:?}"
            )))
        }
    };
    Ok(ControlBranchParams {
        config: net_config_from_meta(&ck.meta)?,
        kind,
        scope,
        tensors: ck.tensors.clone(),
    })
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Flat `key = value` configuration with `#` comments. Unknown keys are kept;
/// consumers validate the keys they use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigError {
                    line: i + 1,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::ConfigError {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::ConfigError {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::ConfigError {
                line: 0,
                message: format!("key {key:?}: {v:?} is not a number"),
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::ConfigError {
                line: 0,
                message: format!("key {key:?}: {v:?} is not an integer"),
            }),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Stable digest of the configuration, used as a deterministic run tag.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update([b'=']);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        let d = h.finalize();
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Raster and CSV output
// ---------------------------------------------------------------------------

/// Binary PGM (P5) preview plus an exact little-endian f64 sidecar
/// (`<path>.f64`) for lossless round-trips.
pub fn save_raster(path: &Path, raster: &[f64]) -> Result<()> {
    if raster.len() != RASTER_SIZE * RASTER_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "raster length {} != {}",
            raster.len(),
            RASTER_SIZE * RASTER_SIZE
        )));
    }
    let mut pgm = format!("P5\n{RASTER_SIZE} {RASTER_SIZE}\n255\n").into_bytes();
    for v in raster {
        pgm.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_atomic(path, &pgm)?;
    let mut raw = Vec::with_capacity(8 * raster.len());
    for v in raster {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&path.with_extension("f64"), &raw)
}

pub fn load_raster_f64(path: &Path) -> Result<Vec<f64>> {
    let buf = fs::read(path)?;
    if buf.len() != 8 * RASTER_SIZE * RASTER_SIZE {
        return Err(Error::CorruptModelFile {
            field: "raster".into(),
            message: format!("payload of {} bytes", buf.len()),
        });
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write CSV rows atomically; `header` first, then one line per row.
pub fn save_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + rows.len() * 32);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::default();
        ck.meta.insert("schedule".into(), "linear".into());
        ck.meta.insert("steps".into(), "100".into());
        let mut rng = StreamRng::new(1, "io/test");
        ck.tensors.insert(
            "enc1.w".into(),
            Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap(),
        );
        ck.tensors
            .insert("out.b".into(), Tensor::from_vec(&[1], vec![0.5]).unwrap());
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn corrupted_byte_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::default();
        ck.tensors
            .insert("w".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptModelFile { .. })
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut ck = Checkpoint::default();
        ck.meta.insert("k".into(), "v".into());
        let mut bytes = encode(&ck);
        // Patch the version field and re-sign so only the version differs.
        bytes[8] = 99;
        let body_len = bytes.len() - 32;
        let hash = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&hash);
        assert!(matches!(
            decode(&bytes),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let mut ck = Checkpoint::default();
        ck.tensors
            .insert("w".into(), Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let bytes = encode(&ck);
        for cut in [3, 15, bytes.len() - 40] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} accepted");
        }
    }

    #[test]
    fn config_parse_and_errors() {
        let cfg = RunConfig::parse(
            "# comment\nsteps = 100\nbeta_max = 0.07  # inline\nschedule= linear\n",
        )
        .unwrap();
        assert_eq!(cfg.get_usize("steps", 1).unwrap(), 100);
        assert_eq!(cfg.get_f64("beta_max", 0.0).unwrap(), 0.07);
        assert_eq!(cfg.get_str("schedule", "cosine"), "linear");
        assert_eq!(cfg.get_str("missing", "fallback"), "fallback");
        assert_eq!(cfg.get_f64("missing", 1.5).unwrap(), 1.5);

        let err = RunConfig::parse("a = 1\nbogus line\n").unwrap_err();
        match err {
            Error::ConfigError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(RunConfig::parse("a = 1\na = 2\n").is_err());
        assert!(cfg.get_f64("schedule", 0.0).is_err());
        // Digest is order-insensitive w.r.t. input text ordering.
        let c2 = RunConfig::parse("schedule = linear\nbeta_max = 0.07\nsteps = 100\n").unwrap();
        assert_eq!(cfg.digest_hex(), c2.digest_hex());
    }

    #[test]
    fn raster_round_trip_and_pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.pgm");
        let mut rng = StreamRng::new(3, "io/raster");
        let raster: Vec<f64> = (0..RASTER_SIZE * RASTER_SIZE)
            .map(|_| rng.uniform01())
            .collect();
        save_raster(&path, &raster).unwrap();
        let back = load_raster_f64(&path.with_extension("f64")).unwrap();
        assert_eq!(raster, back);
        let pgm = fs::read(&path).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(pgm.len(), 13 + RASTER_SIZE * RASTER_SIZE);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        save_csv(&path, "a,b", &["1,2".into(), "3,4".into()]).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["x.csv"]);
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,2\n3,4\n");
    }
}
