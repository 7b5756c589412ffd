//! Dataset ingestion (MNIST IDX), synthetic fixtures, seeded batching,
//! checkpoint persistence and the JSON-lines metrics schema.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbn::{Gate, GbnBlock};
use crate::layers::BnBranchState;
use crate::model::{LeNet, LeNetConfig, NormSlot};
use crate::tape::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("bad IDX magic in {path}: found {found:#010x}, expected {expected:#010x}")]
    Format { path: String, found: u32, expected: u32 },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    Consistency { images: usize, labels: usize },

    #[error("truncated file {path}: needed {needed} bytes, got {got}")]
    Truncated { path: String, needed: usize, got: usize },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint topology mismatch at entry '{entry}'")]
    Topology { entry: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Labeled image (or feature) set with pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let sp = self.images.len() / self.len().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            images: Tensor::new(shape, self.images.data()[..n * sp].to_vec()),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let sp = self.images.len() / self.len();
        let mut data = Vec::with_capacity(idx.len() * sp);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sp..(i + 1) * sp]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        (Tensor::new(shape, data), labels)
    }
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

/// Parse the big-endian IDX pair into a dataset, scaling pixel bytes to
/// [0,1] by division by 255.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let lbl_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;

    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * rows * cols;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            needed,
            got: img_bytes.len(),
        });
    }

    let lmagic = be_u32(&lbl_bytes, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            path: labels_path.display().to_string(),
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let ln = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if ln != n {
        return Err(DataError::Consistency { images: n, labels: ln });
    }
    let lneeded = 8 + ln;
    if lbl_bytes.len() < lneeded {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            needed: lneeded,
            got: lbl_bytes.len(),
        });
    }

    let data: Vec<f64> = img_bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..lneeded].iter().map(|&b| b as usize).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, rows, cols], data),
        labels,
        name: images_path.display().to_string(),
    })
}

/// Gaussian blobs centered on `one_hot(class)` with noise sigma
/// `1 / separation`, clamped to [0,1] (so centers sit at `separation`
/// sigmas from the off coordinates and are linearly separable once
/// `separation` is a few sigmas). Classes are interleaved round-robin so
/// every prefix has a near-uniform label histogram.
pub fn synth_blobs(
    num_classes: usize,
    num_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    assert!(separation > 0.0, "separation must be positive");
    assert!(num_classes <= dim, "need one coordinate per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * num_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let sigma = 1.0 / separation;
    for i in 0..num_per_class {
        for c in 0..num_classes {
            let _ = i;
            for j in 0..dim {
                let center = if j == c { 1.0 } else { 0.0 };
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                data.push((center + sigma * noise).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset { images: Tensor::new(vec![n, dim], data), labels, name: "synth_blobs".into() }
}

/// Seeded per-epoch shuffle into batches; a trailing batch smaller than 2
/// is dropped (train-mode normalization needs at least 2 samples).
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<(Tensor, Vec<usize>)> {
    assert!(batch_size >= 1);
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        out.push(ds.select(chunk));
    }
    out
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"GBNCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64(u64),
    Bytes(Vec<u8>),
}

fn tensor_blob(t: &Tensor) -> Blob {
    Blob::F64 { shape: t.shape().to_vec(), data: t.data().to_vec() }
}

fn bn_entries(prefix: &str, s: &BnBranchState, out: &mut Vec<(String, Blob)>) {
    out.push((format!("{prefix}.gamma"), tensor_blob(&s.gamma)));
    out.push((format!("{prefix}.beta"), tensor_blob(&s.beta)));
    out.push((
        format!("{prefix}.running_mean"),
        Blob::F64 { shape: vec![s.running_mean.len()], data: s.running_mean.clone() },
    ));
    out.push((
        format!("{prefix}.running_var"),
        Blob::F64 { shape: vec![s.running_var.len()], data: s.running_var.clone() },
    ));
    out.push((format!("{prefix}.xi"), Blob::F64 { shape: vec![], data: vec![s.xi] }));
    out.push((format!("{prefix}.alpha"), Blob::F64 { shape: vec![], data: vec![s.alpha] }));
    out.push((format!("{prefix}.num_batches_seen"), Blob::U64(s.num_batches_seen)));
}

fn slot_entries(prefix: &str, slot: &NormSlot, out: &mut Vec<(String, Blob)>) {
    match slot {
        NormSlot::None => {}
        NormSlot::Bn(s) => bn_entries(&format!("{prefix}.branch0"), s, out),
        NormSlot::MultiBn(ss) => {
            for (k, s) in ss.iter().enumerate() {
                bn_entries(&format!("{prefix}.branch{k}"), s, out);
            }
        }
        NormSlot::Gbn(b) => {
            for (k, s) in b.branches.iter().enumerate() {
                bn_entries(&format!("{prefix}.branch{k}"), s, out);
            }
            match &b.gate {
                Gate::Conv(g) => {
                    out.push((format!("{prefix}.gate.conv1.kernel"), tensor_blob(&g.conv1.kernel)));
                    out.push((format!("{prefix}.gate.conv1.bias"), tensor_blob(&g.conv1.bias)));
                    out.push((format!("{prefix}.gate.conv2.kernel"), tensor_blob(&g.conv2.kernel)));
                    out.push((format!("{prefix}.gate.conv2.bias"), tensor_blob(&g.conv2.bias)));
                    out.push((format!("{prefix}.gate.fc.w"), tensor_blob(&g.fc.w)));
                    out.push((format!("{prefix}.gate.fc.b"), tensor_blob(&g.fc.b)));
                }
                Gate::Fc(g) => {
                    out.push((format!("{prefix}.gate.fc1.w"), tensor_blob(&g.fc1.w)));
                    out.push((format!("{prefix}.gate.fc1.b"), tensor_blob(&g.fc1.b)));
                    out.push((format!("{prefix}.gate.fc2.w"), tensor_blob(&g.fc2.w)));
                    out.push((format!("{prefix}.gate.fc2.b"), tensor_blob(&g.fc2.b)));
                }
            }
        }
    }
}

/// Every piece of model state in a fixed, named order.
pub fn model_entries(model: &LeNet) -> Vec<(String, Blob)> {
    let mut out = Vec::new();
    out.push(("conv1.kernel".into(), tensor_blob(&model.conv1.kernel)));
    out.push(("conv1.bias".into(), tensor_blob(&model.conv1.bias)));
    slot_entries("norm1", &model.norm1, &mut out);
    out.push(("conv2.kernel".into(), tensor_blob(&model.conv2.kernel)));
    out.push(("conv2.bias".into(), tensor_blob(&model.conv2.bias)));
    slot_entries("norm2", &model.norm2, &mut out);
    out.push(("fc1.w".into(), tensor_blob(&model.fc1.w)));
    out.push(("fc1.b".into(), tensor_blob(&model.fc1.b)));
    out.push(("fc2.w".into(), tensor_blob(&model.fc2.w)));
    out.push(("fc2.b".into(), tensor_blob(&model.fc2.b)));
    out
}

/// Serialize the model plus an opaque RNG-state blob.
pub fn save_checkpoint(model: &LeNet, rng_state: &[u8], path: &Path) -> Result<(), DataError> {
    let topo = serde_json::to_string(&model.cfg).expect("config serializes");
    let mut entries = model_entries(model);
    entries.push(("rng_state".into(), Blob::Bytes(rng_state.to_vec())));

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(topo.len() as u64).to_le_bytes());
    buf.extend_from_slice(topo.as_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, blob) in &entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match blob {
            Blob::F64 { shape, data } => {
                buf.push(0);
                buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
                for &d in shape {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Blob::U64(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.to_le_bytes());
            }
            Blob::Bytes(b) => {
                buf.push(2);
                buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
                buf.extend_from_slice(b);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.display().to_string(),
                needed: self.pos + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint into (topology JSON, named blobs).
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Blob)>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(DataError::Malformed("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(DataError::Version { found: version, expected: CKPT_VERSION });
    }
    let topo_len = r.u64()? as usize;
    let topo = String::from_utf8(r.take(topo_len)?.to_vec())
        .map_err(|_| DataError::Malformed("topology is not utf-8".into()))?;
    let n_entries = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| DataError::Malformed("entry name is not utf-8".into()))?;
        let kind = r.take(1)?[0];
        let blob = match kind {
            0 => {
                let ndim = r.u64()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let count: usize = shape.iter().product();
                let raw = r.take(count * 8)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Blob::F64 { shape, data }
            }
            1 => Blob::U64(r.u64()?),
            2 => {
                let len = r.u64()? as usize;
                Blob::Bytes(r.take(len)?.to_vec())
            }
            k => return Err(DataError::Malformed(format!("unknown blob kind {k}"))),
        };
        entries.push((name, blob));
    }
    Ok((topo, entries))
}

/// Load a checkpoint into an existing model of matching topology.
/// Returns the stored RNG-state blob.
pub fn load_checkpoint(model: &mut LeNet, path: &Path) -> Result<Vec<u8>, DataError> {
    let (topo, entries) = read_checkpoint(path)?;
    let expected_topo = serde_json::to_string(&model.cfg).expect("config serializes");
    let expected = model_entries(model);

    // entry-by-entry comparison surfaces the first structural difference
    let mut rng_state = Vec::new();
    let mut file_iter = entries.iter().filter(|(n, _)| n != "rng_state");
    for (name, want) in &expected {
        let Some((got_name, got)) = file_iter.next() else {
            return Err(DataError::Topology { entry: name.clone() });
        };
        if got_name != name {
            return Err(DataError::Topology { entry: name.clone() });
        }
        match (want, got) {
            (Blob::F64 { shape: ws, .. }, Blob::F64 { shape: gs, .. }) if ws == gs => {}
            (Blob::U64(_), Blob::U64(_)) => {}
            _ => return Err(DataError::Topology { entry: name.clone() }),
        }
    }
    if let Some((extra, _)) = file_iter.next() {
        return Err(DataError::Topology { entry: extra.clone() });
    }
    if topo != expected_topo {
        return Err(DataError::Topology { entry: "<config>".into() });
    }
    for (name, blob) in &entries {
        if name == "rng_state" {
            if let Blob::Bytes(b) = blob {
                rng_state = b.clone();
            }
        }
    }

    let map: BTreeMap<String, Blob> = entries.into_iter().collect();
    apply_into_model(model, &map)?;
    Ok(rng_state)
}

fn set_tensor(t: &mut Tensor, name: &str, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    match map.get(name) {
        Some(Blob::F64 { shape, data }) if shape == t.shape() => {
            t.data_mut().copy_from_slice(data);
            Ok(())
        }
        _ => Err(DataError::Topology { entry: name.to_string() }),
    }
}

fn set_vec(v: &mut Vec<f64>, name: &str, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    match map.get(name) {
        Some(Blob::F64 { data, .. }) if data.len() == v.len() => {
            v.copy_from_slice(data);
            Ok(())
        }
        _ => Err(DataError::Topology { entry: name.to_string() }),
    }
}

fn set_scalar(name: &str, map: &BTreeMap<String, Blob>) -> Result<f64, DataError> {
    match map.get(name) {
        Some(Blob::F64 { data, .. }) if data.len() == 1 => Ok(data[0]),
        _ => Err(DataError::Topology { entry: name.to_string() }),
    }
}

fn set_u64(name: &str, map: &BTreeMap<String, Blob>) -> Result<u64, DataError> {
    match map.get(name) {
        Some(Blob::U64(v)) => Ok(*v),
        _ => Err(DataError::Topology { entry: name.to_string() }),
    }
}

fn load_bn(prefix: &str, s: &mut BnBranchState, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    set_tensor(&mut s.gamma, &format!("{prefix}.gamma"), map)?;
    set_tensor(&mut s.beta, &format!("{prefix}.beta"), map)?;
    set_vec(&mut s.running_mean, &format!("{prefix}.running_mean"), map)?;
    set_vec(&mut s.running_var, &format!("{prefix}.running_var"), map)?;
    s.xi = set_scalar(&format!("{prefix}.xi"), map)?;
    s.alpha = set_scalar(&format!("{prefix}.alpha"), map)?;
    s.num_batches_seen = set_u64(&format!("{prefix}.num_batches_seen"), map)?;
    Ok(())
}

fn load_slot(prefix: &str, slot: &mut NormSlot, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    match slot {
        NormSlot::None => Ok(()),
        NormSlot::Bn(s) => load_bn(&format!("{prefix}.branch0"), s, map),
        NormSlot::MultiBn(ss) => {
            for (k, s) in ss.iter_mut().enumerate() {
                load_bn(&format!("{prefix}.branch{k}"), s, map)?;
            }
            Ok(())
        }
        NormSlot::Gbn(b) => {
            load_gbn(prefix, b, map)
        }
    }
}

fn load_gbn(prefix: &str, b: &mut GbnBlock, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    for (k, s) in b.branches.iter_mut().enumerate() {
        load_bn(&format!("{prefix}.branch{k}"), s, map)?;
    }
    match &mut b.gate {
        Gate::Conv(g) => {
            set_tensor(&mut g.conv1.kernel, &format!("{prefix}.gate.conv1.kernel"), map)?;
            set_tensor(&mut g.conv1.bias, &format!("{prefix}.gate.conv1.bias"), map)?;
            set_tensor(&mut g.conv2.kernel, &format!("{prefix}.gate.conv2.kernel"), map)?;
            set_tensor(&mut g.conv2.bias, &format!("{prefix}.gate.conv2.bias"), map)?;
            set_tensor(&mut g.fc.w, &format!("{prefix}.gate.fc.w"), map)?;
            set_tensor(&mut g.fc.b, &format!("{prefix}.gate.fc.b"), map)?;
        }
        Gate::Fc(g) => {
            set_tensor(&mut g.fc1.w, &format!("{prefix}.gate.fc1.w"), map)?;
            set_tensor(&mut g.fc1.b, &format!("{prefix}.gate.fc1.b"), map)?;
            set_tensor(&mut g.fc2.w, &format!("{prefix}.gate.fc2.w"), map)?;
            set_tensor(&mut g.fc2.b, &format!("{prefix}.gate.fc2.b"), map)?;
        }
    }
    Ok(())
}

fn apply_into_model(model: &mut LeNet, map: &BTreeMap<String, Blob>) -> Result<(), DataError> {
    set_tensor(&mut model.conv1.kernel, "conv1.kernel", map)?;
    set_tensor(&mut model.conv1.bias, "conv1.bias", map)?;
    load_slot("norm1", &mut model.norm1, map)?;
    set_tensor(&mut model.conv2.kernel, "conv2.kernel", map)?;
    set_tensor(&mut model.conv2.bias, "conv2.bias", map)?;
    load_slot("norm2", &mut model.norm2, map)?;
    set_tensor(&mut model.fc1.w, "fc1.w", map)?;
    set_tensor(&mut model.fc1.b, "fc1.b", map)?;
    set_tensor(&mut model.fc2.w, "fc2.w", map)?;
    set_tensor(&mut model.fc2.b, "fc2.b", map)?;
    Ok(())
}

/// Rebuild a model directly from a checkpoint's stored topology.
pub fn model_from_checkpoint(path: &Path) -> Result<(LeNet, Vec<u8>), DataError> {
    let (topo, _) = read_checkpoint(path)?;
    let cfg: LeNetConfig = serde_json::from_str(&topo)
        .map_err(|e| DataError::Malformed(format!("bad topology json: {e}")))?;
    let mut model = LeNet::init(cfg, 0);
    let rng = load_checkpoint(&mut model, path)?;
    Ok((model, rng))
}

// ---- metrics ----

/// One JSON-lines metric record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub run_id: String,
    pub epoch: EpochField,
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attack: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpochField {
    Num(u64),
    Tag(String),
}

impl EpochField {
    pub fn final_tag() -> Self {
        EpochField::Tag("final".into())
    }
}

/// Write metric lines as JSON-lines; values round-trip exactly.
pub fn write_metrics(lines: &[MetricLine], path: &Path) -> Result<(), DataError> {
    let mut buf = String::new();
    for line in lines {
        buf.push_str(&serde_json::to_string(line).expect("metric serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| DataError::Malformed(format!("bad metric line: {e}")))
        })
        .collect()
}
