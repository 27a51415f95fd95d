//! Cluster-based 8-bit quantization of F32 optimizer states.
//!
//! The value range is split into `m` clusters at the quantiles of a normal
//! distribution fitted to the tensor, so clusters hold roughly equal
//! populations and get narrower near the mean. Each cluster is then quantized
//! with its own asymmetric affine map: `S = max - min`, `b = min`, and each
//! element stores the code whose map value is nearest to `(x - b) / S`.
//!
//! Serialized form (`BSQT`):
//!
//! ```text
//! magic "BSQT" | version u16 | m u8 | mean f32 | std f32 | boundaries f32 x (m-1)
//!   | S f32 x m | b f32 x m | name_len u16 | name | rank u8 | extents u64 x rank
//!   | labels (4 bits each, low nibble = even index) | codes u8 x n
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::normal::inverse_normal_cdf;
use crate::tensor::{ElementType, TensorBlob};
use crate::wire::{self, Reader};

pub const MIN_CLUSTERS: usize = 2;
pub const MAX_CLUSTERS: usize = 16;
pub const DEFAULT_CLUSTERS: usize = 16;

pub const QUANT_MAGIC: &[u8; 4] = b"BSQT";
pub const QUANT_VERSION: u16 = 1;

/// Denominator floor for relative error.
pub const MRE_EPSILON: f64 = 1e-12;

/// Maps 8-bit codes to points of the normalized domain `[0, 1]`.
pub trait CodeMap {
    fn value(&self, code: u8) -> f64;

    /// Code minimizing `|value(code) - x|`, ties toward the smaller code.
    fn nearest(&self, x: f64) -> u8 {
        let mut best = 0u8;
        let mut best_d = (self.value(0) - x).abs();
        for j in 1..=255u8 {
            let d = (self.value(j) - x).abs();
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }
}

/// `j -> j / 255`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearCodeMap;

impl CodeMap for LinearCodeMap {
    #[inline]
    fn value(&self, code: u8) -> f64 {
        code as f64 / 255.0
    }

    #[inline]
    fn nearest(&self, x: f64) -> u8 {
        // The argmin is within one step of the rounded guess.
        let guess = (x * 255.0).round().clamp(0.0, 255.0) as i32;
        let lo = (guess - 1).max(0);
        let hi = (guess + 1).min(255);
        let mut best = lo as u8;
        let mut best_d = (self.value(best) - x).abs();
        for j in lo + 1..=hi {
            let d = (self.value(j as u8) - x).abs();
            if d < best_d {
                best = j as u8;
                best_d = d;
            }
        }
        best
    }
}

fn check_clusters(m: usize) -> Result<()> {
    if !(MIN_CLUSTERS..=MAX_CLUSTERS).contains(&m) {
        return Err(Error::ClusterCount(m));
    }
    Ok(())
}

fn check_f32(t: &TensorBlob) -> Result<Vec<f32>> {
    if t.dtype() != ElementType::F32 {
        return Err(Error::DtypeMismatch {
            name: t.name().into(),
            expected: ElementType::F32.name(),
            found: t.dtype().name(),
        });
    }
    let values = t.f32_values();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: t.name().into(),
            index,
        });
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    pub mean: f32,
    pub std: f32,
    /// `m - 1` non-decreasing thresholds; cluster `k` covers `(boundaries[k-1], boundaries[k]]`.
    pub boundaries: Vec<f32>,
    /// Per-cluster `S = max - min`; zero for empty clusters.
    pub scales: Vec<f32>,
    /// Per-cluster `b = min`; zero for empty clusters.
    pub offsets: Vec<f32>,
}

impl ClusterTable {
    pub fn clusters(&self) -> usize {
        self.scales.len()
    }

    /// Number of boundaries strictly below `v`; a value equal to a boundary
    /// belongs to the lower cluster.
    #[inline]
    pub fn label_of(&self, v: f32) -> u8 {
        self.boundaries.partition_point(|&b| b < v) as u8
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.clusters();
        check_clusters(m)?;
        if self.offsets.len() != m || self.boundaries.len() != m - 1 {
            return Err(Error::TableMismatch(format!(
                "{m} scales, {} offsets, {} boundaries",
                self.offsets.len(),
                self.boundaries.len()
            )));
        }
        if self
            .boundaries
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt()))
        {
            return Err(Error::TableMismatch("boundaries not ascending".into()));
        }
        if self.scales.iter().any(|s| s.is_nan() || *s < 0.0) {
            return Err(Error::TableMismatch("negative or NaN scale".into()));
        }
        Ok(())
    }
}

/// Fits N(mean, std) to `t` and places `m - 1` boundaries at its `k/m`
/// quantiles, then records each cluster's min and range.
pub fn build_clusters(t: &TensorBlob, m: usize) -> Result<ClusterTable> {
    check_clusters(m)?;
    let values = check_f32(t)?;
    if values.is_empty() {
        return Err(Error::EmptyTensor(t.name().into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });

    let (mean, std, boundaries) = if lo == hi {
        // Constant tensor: every element falls in cluster 0.
        (lo, 0.0f32, vec![lo; m - 1])
    } else {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let boundaries = (1..m)
            .map(|k| (mean + std * inverse_normal_cdf(k as f64 / m as f64)) as f32)
            .collect();
        (mean as f32, std as f32, boundaries)
    };

    let mut table = ClusterTable {
        mean,
        std,
        boundaries,
        scales: vec![0.0; m],
        offsets: vec![0.0; m],
    };
    let mut mins = vec![f32::INFINITY; m];
    let mut maxs = vec![f32::NEG_INFINITY; m];
    for &v in &values {
        let k = table.label_of(v) as usize;
        mins[k] = mins[k].min(v);
        maxs[k] = maxs[k].max(v);
    }
    for k in 0..m {
        if mins[k] <= maxs[k] {
            table.scales[k] = maxs[k] - mins[k];
            table.offsets[k] = mins[k];
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    name: String,
    shape: Vec<u64>,
    table: ClusterTable,
    labels: Vec<u8>,
    codes: Vec<u8>,
}

impl QuantizedTensor {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn table(&self) -> &ClusterTable {
        &self.table
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn packed_labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    #[inline]
    pub fn label(&self, i: usize) -> u8 {
        let b = self.labels[i / 2];
        if i.is_multiple_of(2) {
            b & 0x0F
        } else {
            b >> 4
        }
    }

    pub fn serialized_len(&self) -> u64 {
        let m = self.table.clusters() as u64;
        4 + 2
            + 1
            + 8
            + 4 * (m - 1)
            + 8 * m
            + 2
            + self.name.len() as u64
            + 1
            + 8 * self.shape.len() as u64
            + self.labels.len() as u64
            + self.codes.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        out.extend_from_slice(QUANT_MAGIC);
        wire::put_u16(&mut out, QUANT_VERSION);
        wire::put_u8(&mut out, self.table.clusters() as u8);
        wire::put_f32(&mut out, self.table.mean);
        wire::put_f32(&mut out, self.table.std);
        for &v in self
            .table
            .boundaries
            .iter()
            .chain(&self.table.scales)
            .chain(&self.table.offsets)
        {
            wire::put_f32(&mut out, v);
        }
        wire::put_name(&mut out, &self.name);
        wire::put_shape(&mut out, &self.shape);
        out.extend_from_slice(&self.labels);
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "quantized tensor");
        r.magic(QUANT_MAGIC)?;
        r.version("BSQT quantized", QUANT_VERSION)?;
        let m = r.u8()? as usize;
        check_clusters(m)?;
        let mean = r.f32()?;
        let std = r.f32()?;
        let mut floats = |k: usize| (0..k).map(|_| r.f32()).collect::<Result<Vec<_>>>();
        let boundaries = floats(m - 1)?;
        let scales = floats(m)?;
        let offsets = floats(m)?;
        let table = ClusterTable {
            mean,
            std,
            boundaries,
            scales,
            offsets,
        };
        table.validate()?;
        let name = r.name()?;
        let shape = r.shape()?;
        let n = wire::numel(&shape)
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        let labels = r.take_u64(n.div_ceil(2))?.to_vec();
        let codes = r.take_u64(n)?.to_vec();
        if r.remaining() != 0 {
            return Err(Error::InvalidTensor(format!(
                "{} trailing bytes after quantized `{name}`",
                r.remaining()
            )));
        }
        Ok(QuantizedTensor {
            name,
            shape,
            table,
            labels,
            codes,
        })
    }
}

/// Bytes the container adds on top of [`quantized_size_bytes`]: magic,
/// version, cluster count, mean/std, boundaries, name, and extents in place of
/// the two-word shape the formula assumes.
pub fn container_overhead(m: usize, name_len: usize, rank: usize) -> u64 {
    (4 + 2 + 1 + 8 + 4 * (m as u64 - 1) + 2 + name_len as u64 + 1 + 8 * rank as u64) - 8
}

/// `8m + (4/8 + 1) n + 8`: per-cluster scale and offset, 4-bit labels, one
/// code byte per element, and an 8-byte shape. Odd `n` rounds the label
/// bytes up.
pub fn quantized_size_bytes(n: u64, m: usize) -> Result<u64> {
    check_clusters(m)?;
    Ok(8 * m as u64 + n + n.div_ceil(2) + 8)
}

pub fn quantize(t: &TensorBlob, table: &ClusterTable) -> Result<QuantizedTensor> {
    quantize_with(t, table, &LinearCodeMap)
}

pub fn quantize_with<M: CodeMap>(
    t: &TensorBlob,
    table: &ClusterTable,
    map: &M,
) -> Result<QuantizedTensor> {
    table.validate()?;
    let values = check_f32(t)?;
    let m = table.clusters();
    let mut labels = vec![0u8; values.len().div_ceil(2)];
    let mut codes = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let k = table.label_of(v);
        if k as usize >= m {
            return Err(Error::LabelOverflow {
                label: k,
                clusters: m,
            });
        }
        labels[i / 2] |= if i % 2 == 0 { k } else { k << 4 };
        let s = table.scales[k as usize];
        let code = if s == 0.0 {
            0
        } else {
            let b = table.offsets[k as usize];
            let x = ((v as f64 - b as f64) / s as f64).clamp(0.0, 1.0);
            map.nearest(x)
        };
        codes.push(code);
    }
    Ok(QuantizedTensor {
        name: t.name().to_string(),
        shape: t.shape().to_vec(),
        table: table.clone(),
        labels,
        codes,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<TensorBlob> {
    dequantize_with(q, &LinearCodeMap)
}

pub fn dequantize_with<M: CodeMap>(q: &QuantizedTensor, map: &M) -> Result<TensorBlob> {
    let m = q.table.clusters();
    let mut values = Vec::with_capacity(q.codes.len());
    for (i, &code) in q.codes.iter().enumerate() {
        let k = q.label(i);
        if k as usize >= m {
            return Err(Error::LabelOverflow {
                label: k,
                clusters: m,
            });
        }
        let s = q.table.scales[k as usize] as f64;
        let b = q.table.offsets[k as usize] as f64;
        values.push((map.value(code) * s + b) as f32);
    }
    TensorBlob::from_f32(q.name.clone(), q.shape.clone(), &values)
}

/// Builds a table over `t` and quantizes it with the linear code map.
pub fn compress(t: &TensorBlob, m: usize) -> Result<QuantizedTensor> {
    let table = build_clusters(t, m)?;
    quantize(t, &table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub mre: f64,
    pub mse: f64,
}

/// MSE over all elements; MRE over elements with `|original| > MRE_EPSILON`.
pub fn precision_report(original: &TensorBlob, restored: &TensorBlob) -> Result<PrecisionReport> {
    if original.shape() != restored.shape() {
        return Err(Error::ShapeMismatch {
            name: original.name().into(),
            base: original.shape().to_vec(),
            target: restored.shape().to_vec(),
        });
    }
    if original.dtype() != ElementType::F32 || restored.dtype() != ElementType::F32 {
        return Err(Error::DtypeMismatch {
            name: original.name().into(),
            expected: ElementType::F32.name(),
            found: if original.dtype() != ElementType::F32 {
                original.dtype().name()
            } else {
                restored.dtype().name()
            },
        });
    }
    let o = original.f32_values();
    let r = restored.f32_values();
    if o.is_empty() {
        return Ok(PrecisionReport { mre: 0.0, mse: 0.0 });
    }
    let mut sq = 0.0f64;
    let mut rel = 0.0f64;
    let mut counted = 0usize;
    for (&a, &b) in o.iter().zip(&r) {
        let d = a as f64 - b as f64;
        sq += d * d;
        if (a as f64).abs() > MRE_EPSILON {
            rel += d.abs() / (a as f64).abs();
            counted += 1;
        }
    }
    Ok(PrecisionReport {
        mre: if counted == 0 {
            0.0
        } else {
            rel / counted as f64
        },
        mse: sq / o.len() as f64,
    })
}
