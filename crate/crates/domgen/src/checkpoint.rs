//! Versioned binary checkpoints: named f32 tensors plus the hash of the
//! configuration that produced them. The format is deliberately dumb —
//! fixed magic, explicit lengths, little-endian throughout — so a reader
//! can validate every field before allocating.

use std::fs;
use std::path::Path;

use numcore::Scalar;
use rand::SeedableRng;

use crate::baselines::ErmModel;
use crate::error::{Result, RunError};
use crate::model::GenerativeModel;

// ── Container ───────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;
/// Upper bounds a reader enforces before trusting any length field.
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_RECORDS: usize = 65_536;

/// One named tensor: a shape and its row-major f32 data.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A checkpoint file's logical content.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Hash of the configuration document the run was started with.
    pub config_hash: String,
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, validating every length field against the
    /// remaining input before reading or allocating.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(RunError::data(format!(
                "checkpoint magic {:02x?} is not {:02x?}",
                magic, MAGIC
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RunError::data(format!(
                "checkpoint version {} unsupported (expected {})",
                version, VERSION
            )));
        }
        let hash_len = r.u32()? as usize;
        if hash_len > MAX_NAME_LEN {
            return Err(RunError::data(format!("config hash length {} is absurd", hash_len)));
        }
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| RunError::data("config hash is not UTF-8"))?;

        let n_records = r.u32()? as usize;
        if n_records > MAX_RECORDS {
            return Err(RunError::data(format!("{} records exceed the format limit", n_records)));
        }
        let mut records = Vec::with_capacity(n_records.min(1024));
        for i in 0..n_records {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(RunError::data(format!(
                    "record {}: name length {} is absurd",
                    i, name_len
                )));
            }
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| RunError::data(format!("record {}: name is not UTF-8", i)))?;
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(RunError::data(format!("record {}: rank {} is absurd", i, rank)));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u32()? as u64;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| RunError::data(format!("record {}: shape overflows", i)))?;
                shape.push(d as usize);
            }
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| RunError::data(format!("record {}: shape overflows", i)))?;
            if byte_len > r.remaining() as u64 {
                return Err(RunError::data(format!(
                    "record {} ({}) declares {} bytes but only {} remain",
                    i,
                    name,
                    byte_len,
                    r.remaining()
                )));
            }
            let raw = r.take(byte_len as usize)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(TensorRecord { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(RunError::data(format!(
                "{} trailing byte(s) after the last record",
                r.remaining()
            )));
        }
        Ok(Checkpoint { config_hash, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(RunError::data(format!(
                "checkpoint truncated at byte {}: wanted {} more, have {}",
                self.pos,
                n,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

// ── Model adapters ──────────────────────────────────────────────────────

fn to_f32<F: Scalar>(data: &[F]) -> Vec<f32> {
    data.iter().map(|&v| v.to_f64() as f32).collect()
}

fn head_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.hidden.w"),
        format!("{prefix}.hidden.b"),
        format!("{prefix}.out.w"),
        format!("{prefix}.out.b"),
    ]
}

/// Snapshots every parameter of the episodic model.
pub fn checkpoint_generative<F: Scalar>(
    model: &GenerativeModel<F>,
    config_hash: &str,
) -> Checkpoint {
    let mut records = Vec::new();
    for (i, pair) in model.backbone.params().chunks(2).enumerate() {
        records.push(TensorRecord {
            name: format!("backbone.{i}.w"),
            shape: pair[0].shape.clone(),
            data: to_f32(&pair[0].data),
        });
        records.push(TensorRecord {
            name: format!("backbone.{i}.b"),
            shape: pair[1].shape.clone(),
            data: to_f32(&pair[1].data),
        });
    }
    for (head, prefix) in [(&model.psi, "psi"), (&model.theta_a, "theta_a")] {
        for (name, param) in head_names(prefix).into_iter().zip(head.params()) {
            records.push(TensorRecord {
                name,
                shape: param.shape.clone(),
                data: to_f32(&param.data),
            });
        }
    }
    Checkpoint { config_hash: config_hash.to_string(), records }
}

fn apply_record<F: Scalar>(
    ckpt: &Checkpoint,
    name: &str,
    param: &mut numcore::Parameter<F>,
) -> Result<()> {
    let rec = ckpt
        .record(name)
        .ok_or_else(|| RunError::data(format!("checkpoint is missing tensor `{}`", name)))?;
    if rec.shape != param.shape {
        return Err(RunError::data(format!(
            "tensor `{}` has shape {:?}, model expects {:?}",
            name, rec.shape, param.shape
        )));
    }
    param.data = rec.data.iter().map(|&v| F::from_f64(f64::from(v))).collect();
    Ok(())
}

/// Rebuilds the episodic model from a checkpoint. The architecture is
/// recovered from the stored backbone shapes; every tensor must match the
/// rebuilt model exactly and no extras may remain.
pub fn restore_generative(ckpt: &Checkpoint) -> Result<GenerativeModel<f32>> {
    let mut widths = Vec::new();
    let mut i = 0;
    while let Some(rec) = ckpt.record(&format!("backbone.{i}.w")) {
        if rec.shape.len() != 2 {
            return Err(RunError::data(format!(
                "backbone.{i}.w has rank {} (expected a matrix)",
                rec.shape.len()
            )));
        }
        if i == 0 {
            widths.push(rec.shape[0]);
        }
        widths.push(rec.shape[1]);
        i += 1;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = GenerativeModel::<f32>::new(&mut rng, &widths)?;

    let mut expected = Vec::new();
    let mut backbone_params = model.backbone.params_mut();
    for (j, pair) in backbone_params.chunks_mut(2).enumerate() {
        let (w_name, b_name) = (format!("backbone.{j}.w"), format!("backbone.{j}.b"));
        let [w, b] = pair else { unreachable!("params come in w/b pairs") };
        apply_record(ckpt, &w_name, w)?;
        apply_record(ckpt, &b_name, b)?;
        expected.push(w_name);
        expected.push(b_name);
    }
    drop(backbone_params);
    let head_param_names: Vec<String> = head_names("psi")
        .into_iter()
        .chain(head_names("theta_a"))
        .collect();
    for (name, param) in head_param_names.iter().zip(model.head_params_mut()) {
        apply_record(ckpt, name, param)?;
        expected.push(name.clone());
    }
    reject_extras(ckpt, &expected)?;
    Ok(model)
}

/// Snapshots the supervised baseline, including the frozen normalization
/// statistics the evaluation path depends on.
pub fn checkpoint_erm<F: Scalar>(model: &ErmModel<F>, config_hash: &str) -> Checkpoint {
    let mut records = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        records.push(TensorRecord {
            name: format!("layers.{i}.w"),
            shape: layer.w.shape.clone(),
            data: to_f32(&layer.w.data),
        });
        records.push(TensorRecord {
            name: format!("layers.{i}.b"),
            shape: layer.b.shape.clone(),
            data: to_f32(&layer.b.data),
        });
    }
    for (i, norm) in model.norms.iter().enumerate() {
        records.push(TensorRecord {
            name: format!("norms.{i}.gamma"),
            shape: norm.gamma.shape.clone(),
            data: to_f32(&norm.gamma.data),
        });
        records.push(TensorRecord {
            name: format!("norms.{i}.beta"),
            shape: norm.beta.shape.clone(),
            data: to_f32(&norm.beta.data),
        });
        records.push(TensorRecord {
            name: format!("norms.{i}.running_mean"),
            shape: vec![norm.running_mean.len()],
            data: to_f32(&norm.running_mean),
        });
        records.push(TensorRecord {
            name: format!("norms.{i}.running_var"),
            shape: vec![norm.running_var.len()],
            data: to_f32(&norm.running_var),
        });
    }
    records.push(TensorRecord {
        name: "head.w".into(),
        shape: model.head.w.shape.clone(),
        data: to_f32(&model.head.w.data),
    });
    records.push(TensorRecord {
        name: "head.b".into(),
        shape: model.head.b.shape.clone(),
        data: to_f32(&model.head.b.data),
    });
    Checkpoint { config_hash: config_hash.to_string(), records }
}

/// Rebuilds the supervised baseline (widths from the stored layer shapes,
/// class count from the head).
pub fn restore_erm(ckpt: &Checkpoint) -> Result<ErmModel<f32>> {
    let mut widths = Vec::new();
    let mut i = 0;
    while let Some(rec) = ckpt.record(&format!("layers.{i}.w")) {
        if rec.shape.len() != 2 {
            return Err(RunError::data(format!(
                "layers.{i}.w has rank {} (expected a matrix)",
                rec.shape.len()
            )));
        }
        if i == 0 {
            widths.push(rec.shape[0]);
        }
        widths.push(rec.shape[1]);
        i += 1;
    }
    let head = ckpt
        .record("head.w")
        .ok_or_else(|| RunError::data("checkpoint is missing tensor `head.w`"))?;
    if head.shape.len() != 2 {
        return Err(RunError::data("head.w must be a matrix"));
    }
    let n_classes = head.shape[1];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = ErmModel::<f32>::new(&mut rng, &widths, n_classes)?;

    let mut expected = Vec::new();
    for (j, layer) in model.layers.iter_mut().enumerate() {
        let (w_name, b_name) = (format!("layers.{j}.w"), format!("layers.{j}.b"));
        apply_record(ckpt, &w_name, &mut layer.w)?;
        apply_record(ckpt, &b_name, &mut layer.b)?;
        expected.push(w_name);
        expected.push(b_name);
    }
    for (j, norm) in model.norms.iter_mut().enumerate() {
        let g_name = format!("norms.{j}.gamma");
        let b_name = format!("norms.{j}.beta");
        apply_record(ckpt, &g_name, &mut norm.gamma)?;
        apply_record(ckpt, &b_name, &mut norm.beta)?;
        for (suffix, dest) in [
            ("running_mean", &mut norm.running_mean),
            ("running_var", &mut norm.running_var),
        ] {
            let name = format!("norms.{j}.{suffix}");
            let rec = ckpt.record(&name).ok_or_else(|| {
                RunError::data(format!("checkpoint is missing tensor `{}`", name))
            })?;
            if rec.shape != [dest.len()] {
                return Err(RunError::data(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    name,
                    rec.shape,
                    [dest.len()]
                )));
            }
            *dest = rec.data.clone();
            expected.push(name);
        }
        expected.push(g_name);
        expected.push(b_name);
    }
    apply_record(ckpt, "head.w", &mut model.head.w)?;
    apply_record(ckpt, "head.b", &mut model.head.b)?;
    expected.push("head.w".into());
    expected.push("head.b".into());
    reject_extras(ckpt, &expected)?;
    Ok(model)
}

fn reject_extras(ckpt: &Checkpoint, expected: &[String]) -> Result<()> {
    for rec in &ckpt.records {
        if !expected.iter().any(|e| *e == rec.name) {
            return Err(RunError::data(format!(
                "checkpoint contains unexpected tensor `{}`",
                rec.name
            )));
        }
    }
    Ok(())
}
