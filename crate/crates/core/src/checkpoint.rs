//! Single-file checkpoints: a line-oriented text manifest (format tag,
//! embedded model configuration, free-form metadata, tensor directory)
//! followed by the raw little-endian f32 payload.
//!
//! The manifest pins everything needed to rebuild the model without the
//! original flags, so evaluation tools take a checkpoint and nothing
//! else. Saving is deterministic: identical state produces identical
//! bytes.

use std::io::Write as _;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::ParamSink;
use crate::shape::Shape4;

const MAGIC: &str = "MLORE-CKPT v1";

/// Keys of [`ModelConfig`], in manifest order.
const CONFIG_KEYS: [&str; 14] = [
    "tasks",
    "num_experts",
    "top_k",
    "channels",
    "rank_min",
    "rank_max",
    "rank_step",
    "specific_rank",
    "expert_out_channels",
    "scales",
    "stack_per_scale",
    "lb_weight",
    "noise",
    "seed",
];

#[derive(Clone, Debug)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Shape4,
    /// Element offset into the payload.
    pub offset: usize,
    /// Element count; always `shape.numel()`.
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
    pub data: Vec<f32>,
}

/// Formats an f64 so it re-parses as a TOML float (forces a decimal
/// point on integral values).
fn fmt_float(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("nan") {
        s
    } else {
        format!("{s}.0")
    }
}

fn config_value(cfg: &ModelConfig, key: &str) -> String {
    match key {
        "tasks" => cfg.tasks.to_string(),
        "num_experts" => cfg.num_experts.to_string(),
        "top_k" => cfg.top_k.to_string(),
        "channels" => cfg.channels.to_string(),
        "rank_min" => cfg.rank_min.to_string(),
        "rank_max" => cfg.rank_max.to_string(),
        "rank_step" => cfg.rank_step.to_string(),
        "specific_rank" => cfg.specific_rank.to_string(),
        "expert_out_channels" => cfg.expert_out_channels.to_string(),
        "scales" => cfg.scales.to_string(),
        "stack_per_scale" => cfg.stack_per_scale.to_string(),
        "lb_weight" => fmt_float(cfg.lb_weight),
        "noise" => cfg.noise.to_string(),
        "seed" => cfg.seed.to_string(),
        _ => unreachable!("unknown config key"),
    }
}

fn check_token(token: &str, what: &str) -> Result<()> {
    if token.is_empty() || token.chars().any(char::is_whitespace) {
        return Err(Error::Format(format!(
            "{what} {token:?} must be non-empty and whitespace-free"
        )));
    }
    Ok(())
}

/// Writes the sink's parameters and buffers (in sink order) under the
/// embedded configuration and metadata. Buffers are stored as
/// `(1, len, 1, 1)` tensors.
pub fn save(
    path: &Path,
    cfg: &ModelConfig,
    meta: &[(String, String)],
    sink: &ParamSink,
) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    for key in CONFIG_KEYS {
        manifest.push_str(&format!("config {key} {}\n", config_value(cfg, key)));
    }
    for (key, value) in meta {
        check_token(key, "meta key")?;
        check_token(value, "meta value")?;
        manifest.push_str(&format!("meta {key} {value}\n"));
    }

    let mut offset = 0usize;
    let mut payload: Vec<f32> = Vec::new();
    let mut record = |name: &str, shape: Shape4, values: &[f64]| -> Result<()> {
        check_token(name, "tensor name")?;
        manifest.push_str(&format!(
            "tensor {name} {} {} {} {} {offset} {}\n",
            shape.n,
            shape.c,
            shape.h,
            shape.w,
            values.len()
        ));
        offset += values.len();
        payload.extend(values.iter().map(|&v| v as f32));
        Ok(())
    };
    for (name, p) in &sink.params {
        let p = p.borrow();
        record(name, p.value.shape, &p.value.data)?;
    }
    for (name, b) in &sink.buffers {
        let b = b.borrow();
        record(name, Shape4::new(1, b.len(), 1, 1), &b)?;
    }
    manifest.push_str(&format!("data {}\n", payload.len()));

    let mut bytes = manifest.into_bytes();
    for v in &payload {
        bytes.write_f32::<LittleEndian>(*v)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut next_line = |bytes: &[u8]| -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest truncated"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad("manifest is not UTF-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };

    if next_line(&bytes)? != MAGIC {
        return Err(bad("missing format tag"));
    }

    let mut config_lines = Vec::new();
    let mut meta = Vec::new();
    let mut tensors: Vec<TensorRecord> = Vec::new();
    let count = loop {
        let line = next_line(&bytes)?;
        let fields: Vec<&str> = line.split(' ').collect();
        match fields.as_slice() {
            ["config", key, value] => config_lines.push(format!("{key} = {value}")),
            ["meta", key, value] => meta.push((key.to_string(), value.to_string())),
            ["tensor", name, d0, d1, d2, d3, offset, len] => {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| bad(&format!("bad tensor field {s:?}")))
                };
                let shape = Shape4::new(parse(d0)?, parse(d1)?, parse(d2)?, parse(d3)?);
                let (offset, len) = (parse(offset)?, parse(len)?);
                if shape.numel() != len {
                    return Err(bad(&format!("tensor {name}: length {len} != shape volume")));
                }
                if tensors.iter().any(|t| t.name == *name) {
                    return Err(bad(&format!("duplicate tensor {name}")));
                }
                tensors.push(TensorRecord { name: name.to_string(), shape, offset, len });
            }
            ["data", count] => {
                break count
                    .parse::<usize>()
                    .map_err(|_| bad("bad payload count"))?
            }
            _ => return Err(bad(&format!("unrecognized manifest line {line:?}"))),
        }
    };

    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(bad(&format!(
            "payload holds {} bytes, manifest declares {count} elements",
            payload.len()
        )));
    }
    let mut cursor = payload;
    let mut data = vec![0f32; count];
    cursor.read_f32_into::<LittleEndian>(&mut data)?;
    for t in &tensors {
        if t.offset + t.len > count {
            return Err(bad(&format!("tensor {} overruns the payload", t.name)));
        }
    }

    let config = ModelConfig::from_toml(&config_lines.join("\n"))?;
    Ok(Checkpoint { config, meta, tensors, data })
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor_values(&self, name: &str) -> Option<&[f32]> {
        let t = self.tensors.iter().find(|t| t.name == name)?;
        Some(&self.data[t.offset..t.offset + t.len])
    }

    /// Copies every stored tensor into the sink, matching strictly by
    /// name and shape in both directions.
    pub fn restore(&self, sink: &ParamSink) -> Result<()> {
        let mismatch = |msg: String| Error::CheckpointMismatch(msg);
        let mut used = 0usize;
        let mut fill = |name: &str, shape: Shape4, dst: &mut [f64]| -> Result<()> {
            let values = self
                .tensor_values(name)
                .ok_or_else(|| mismatch(format!("model expects tensor {name}, not stored")))?;
            let stored = self.tensors.iter().find(|t| t.name == name).unwrap();
            if stored.shape != shape {
                return Err(mismatch(format!(
                    "tensor {name}: stored {:?}, model expects {:?}",
                    stored.shape, shape
                )));
            }
            for (d, s) in dst.iter_mut().zip(values) {
                *d = f64::from(*s);
            }
            used += 1;
            Ok(())
        };
        for (name, p) in &sink.params {
            let mut p = p.borrow_mut();
            let shape = p.value.shape;
            fill(name, shape, &mut p.value.data)?;
        }
        for (name, b) in &sink.buffers {
            let mut b = b.borrow_mut();
            let shape = Shape4::new(1, b.len(), 1, 1);
            fill(name, shape, &mut b)?;
        }
        if used != self.tensors.len() {
            return Err(mismatch(format!(
                "checkpoint stores {} tensors, model consumes {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm, Conv2d};
    use crate::rng;

    fn sample_sink(seed: u64) -> ParamSink {
        let mut rng = rng::substream(seed, "ckpt-test");
        let conv = Conv2d::new(3, 2, 3, &mut rng);
        let bn = BatchNorm::new(3);
        bn.running_mean.borrow_mut()[1] = 0.25;
        let mut sink = ParamSink::default();
        conv.collect("conv", &mut sink);
        bn.collect("bn", &mut sink);
        sink
    }

    #[test]
    fn roundtrip_restores_values_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = ModelConfig::default();
        cfg.lb_weight = 0.0; // integral float must survive the manifest
        let sink = sample_sink(7);
        let meta = vec![("model".to_string(), "mlore".to_string())];
        save(&path, &cfg, &meta, &sink).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.config, cfg);
        assert_eq!(ckpt.meta_value("model"), Some("mlore"));
        assert_eq!(ckpt.tensors.len(), 6); // conv w+b, bn gamma/beta + two running buffers

        let fresh = sample_sink(8);
        ckpt.restore(&fresh).unwrap();
        for ((_, a), (_, b)) in sink.params.iter().zip(&fresh.params) {
            let (a, b) = (a.borrow(), b.borrow());
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        assert_eq!(fresh.buffers[0].1.borrow()[1], 0.25);
    }

    #[test]
    fn identical_state_saves_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let cfg = ModelConfig::default();
        let sink = sample_sink(3);
        let meta = vec![("model".to_string(), "mlore".to_string())];
        save(&p1, &cfg, &meta, &sink).unwrap();
        save(&p2, &cfg, &meta, &sink).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn strict_restore_rejects_structure_drift() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = ModelConfig::default();
        save(&path, &cfg, &[], &sample_sink(1)).unwrap();
        let ckpt = load(&path).unwrap();

        // Same names, different conv shape.
        let mut rng = rng::substream(1, "ckpt-test-alt");
        let conv = Conv2d::new(1, 2, 3, &mut rng);
        let bn = BatchNorm::new(3);
        let mut sink = ParamSink::default();
        conv.collect("conv", &mut sink);
        bn.collect("bn", &mut sink);
        assert!(matches!(ckpt.restore(&sink), Err(Error::CheckpointMismatch(_))));

        // Renamed tensor.
        let mut sink = ParamSink::default();
        let conv = Conv2d::new(3, 2, 3, &mut rng);
        conv.collect("conv2", &mut sink);
        BatchNorm::new(3).collect("bn", &mut sink);
        assert!(matches!(ckpt.restore(&sink), Err(Error::CheckpointMismatch(_))));

        // Model consumes fewer tensors than stored.
        let mut sink = ParamSink::default();
        let conv = Conv2d::new(3, 2, 3, &mut rng);
        conv.collect("conv", &mut sink);
        assert!(matches!(ckpt.restore(&sink), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOT-A-CKPT\n").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        // Valid manifest, truncated payload.
        let cfg = ModelConfig::default();
        save(&path, &cfg, &[], &sample_sink(2)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
