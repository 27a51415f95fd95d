//! Lossless delta encoding of F16 model states.
//!
//! An element is "changed" when its bit pattern differs from the reference
//! tensor. The record keeps one mask bit per element (element `e` lives in
//! byte `e / 8`, bit `e % 8`, LSB first, padding bits zero) and the target's
//! raw binary16 values at the changed positions in ascending order. Values are
//! stored verbatim rather than as arithmetic differences so reconstruction is
//! bitwise exact, including `-0.0` and NaN payloads.
//!
//! Serialized form (`BSDL`):
//!
//! ```text
//! magic "BSDL" | version u16 | n u64 | n_c u64 | name_len u16 | name | rank u8 | extents u64 x rank | mask | payload
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ElementType, TensorBlob};
use crate::wire::{self, Reader};

pub const DELTA_MAGIC: &[u8; 4] = b"BSDL";
pub const DELTA_VERSION: u16 = 1;
/// magic + version + n + n_c + name length + rank.
pub const DELTA_HEADER_FIXED: u64 = 4 + 2 + 8 + 8 + 2 + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaRecord {
    name: String,
    shape: Vec<u64>,
    total: u64,
    changed: u64,
    mask: Vec<u8>,
    payload: Vec<u8>,
}

impl DeltaRecord {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    /// Total element count `n`.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Changed element count `n_c`.
    pub fn changed(&self) -> u64 {
        self.changed
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn serialized_len(&self) -> u64 {
        DELTA_HEADER_FIXED
            + self.name.len() as u64
            + 8 * self.shape.len() as u64
            + self.mask.len() as u64
            + self.payload.len() as u64
    }

    /// Checks mask length, payload length, popcount and padding bits.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::DeltaInconsistent {
                name: self.name.clone(),
                reason,
            })
        };
        if wire::numel(&self.shape) != Some(self.total) {
            return fail(format!(
                "shape {:?} does not hold {} elements",
                self.shape, self.total
            ));
        }
        if self.changed > self.total {
            return fail(format!("n_c {} > n {}", self.changed, self.total));
        }
        if self.mask.len() as u64 != self.total.div_ceil(8) {
            return fail(format!(
                "mask is {} bytes, n = {} needs {}",
                self.mask.len(),
                self.total,
                self.total.div_ceil(8)
            ));
        }
        if self.payload.len() as u64 != 2 * self.changed {
            return fail(format!(
                "payload is {} bytes, n_c = {} needs {}",
                self.payload.len(),
                self.changed,
                2 * self.changed
            ));
        }
        let pad = self.total % 8;
        if pad != 0 {
            let last = *self.mask.last().expect("non-empty mask");
            if last >> pad != 0 {
                return fail("padding bits are set".into());
            }
        }
        let ones: u64 = self.mask.iter().map(|b| b.count_ones() as u64).sum();
        if ones != self.changed {
            return fail(format!("mask popcount {ones} != n_c {}", self.changed));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        out.extend_from_slice(DELTA_MAGIC);
        wire::put_u16(&mut out, DELTA_VERSION);
        wire::put_u64(&mut out, self.total);
        wire::put_u64(&mut out, self.changed);
        wire::put_name(&mut out, &self.name);
        wire::put_shape(&mut out, &self.shape);
        out.extend_from_slice(&self.mask);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "delta record");
        r.magic(DELTA_MAGIC)?;
        r.version("BSDL delta", DELTA_VERSION)?;
        let total = r.u64()?;
        let changed = r.u64()?;
        let name = r.name()?;
        let shape = r.shape()?;
        let mask = r.take_u64(total.div_ceil(8))?.to_vec();
        let payload_len = changed
            .checked_mul(2)
            .ok_or_else(|| Error::DeltaInconsistent {
                name: name.clone(),
                reason: "n_c overflows".into(),
            })?;
        let payload = r.take_u64(payload_len)?.to_vec();
        if r.remaining() != 0 {
            return Err(Error::DeltaInconsistent {
                name,
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        let rec = DeltaRecord {
            name,
            shape,
            total,
            changed,
            mask,
            payload,
        };
        rec.validate()?;
        Ok(rec)
    }
}

fn check_pair(base: &TensorBlob, target: &TensorBlob) -> Result<()> {
    if base.name() != target.name() {
        return Err(Error::NameMismatch {
            base: base.name().into(),
            target: target.name().into(),
        });
    }
    for t in [base, target] {
        if t.dtype() != ElementType::F16 {
            return Err(Error::DtypeMismatch {
                name: t.name().into(),
                expected: ElementType::F16.name(),
                found: t.dtype().name(),
            });
        }
    }
    if base.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            name: base.name().into(),
            base: base.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Encodes `target` as a change mask and changed values against `base`.
pub fn encode_delta(base: &TensorBlob, target: &TensorBlob) -> Result<DeltaRecord> {
    check_pair(base, target)?;
    let n = target.numel();
    let old = base.data();
    let new = target.data();
    let mut mask = vec![0u8; n.div_ceil(8)];
    let mut payload = Vec::new();

    // Eight elements (16 bytes) per mask byte; skip unchanged groups wholesale.
    let full = n / 8;
    for (j, (o, t)) in old
        .chunks_exact(16)
        .zip(new.chunks_exact(16))
        .take(full)
        .enumerate()
    {
        if o == t {
            continue;
        }
        let mut bits = 0u8;
        for i in 0..8 {
            let (a, b) = (&o[2 * i..2 * i + 2], &t[2 * i..2 * i + 2]);
            if a != b {
                bits |= 1 << i;
                payload.extend_from_slice(b);
            }
        }
        mask[j] = bits;
    }
    for e in full * 8..n {
        let (a, b) = (&old[2 * e..2 * e + 2], &new[2 * e..2 * e + 2]);
        if a != b {
            mask[e / 8] |= 1 << (e % 8);
            payload.extend_from_slice(b);
        }
    }

    Ok(DeltaRecord {
        name: target.name().to_string(),
        shape: target.shape().to_vec(),
        total: n as u64,
        changed: (payload.len() / 2) as u64,
        mask,
        payload,
    })
}

fn check_record_against(base: &TensorBlob, rec: &DeltaRecord) -> Result<()> {
    if base.name() != rec.name {
        return Err(Error::NameMismatch {
            base: base.name().into(),
            target: rec.name.clone(),
        });
    }
    if base.dtype() != ElementType::F16 {
        return Err(Error::DtypeMismatch {
            name: base.name().into(),
            expected: ElementType::F16.name(),
            found: base.dtype().name(),
        });
    }
    if base.shape() != rec.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            name: base.name().into(),
            base: base.shape().to_vec(),
            target: rec.shape.clone(),
        });
    }
    rec.validate()
}

/// Overwrites the changed positions of `tensor` with the record's values.
pub fn apply_delta_in_place(tensor: &mut TensorBlob, rec: &DeltaRecord) -> Result<()> {
    check_record_against(tensor, rec)?;
    let data = tensor.data_mut();
    let mut values = rec.payload.chunks_exact(2);
    for (j, &byte) in rec.mask.iter().enumerate() {
        let mut bits = byte;
        while bits != 0 {
            let e = 8 * j + bits.trailing_zeros() as usize;
            let v = values.next().expect("popcount validated");
            data[2 * e..2 * e + 2].copy_from_slice(v);
            bits &= bits - 1;
        }
    }
    Ok(())
}

/// Reconstructs the target tensor from `base` and a record produced against it.
pub fn decode_delta(base: &TensorBlob, rec: &DeltaRecord) -> Result<TensorBlob> {
    let mut out = base.clone();
    apply_delta_in_place(&mut out, rec)?;
    Ok(out)
}

/// Size in bytes of a serialized record with `n` elements and `n_c` changes,
/// excluding the variable-length name and extents.
///
/// Compare against the raw size `2n` to decide whether delta storage pays off.
pub fn delta_size_bytes(n: u64, n_c: u64) -> Result<u64> {
    if n_c > n {
        return Err(Error::ChangedExceedsTotal {
            total: n,
            changed: n_c,
        });
    }
    Ok(n.div_ceil(8) + 2 * n_c + DELTA_HEADER_FIXED)
}

/// Size of the naive scheme with one mask byte per element.
pub fn naive_delta_size_bytes(n: u64, n_c: u64) -> Result<u64> {
    if n_c > n {
        return Err(Error::ChangedExceedsTotal {
            total: n,
            changed: n_c,
        });
    }
    Ok(n + 2 * n_c)
}

/// Whether `n_c` changes out of `n` are at or past the point where the packed
/// mask plus payload stops beating raw storage (`n_c >= 15/16 n`).
pub fn exceeds_benefit_threshold(n: u64, n_c: u64) -> bool {
    16 * n_c as u128 >= 15 * n as u128
}

/// Model-state deltas of one checkpoint against the checkpoint before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaCheckpoint {
    pub iteration: u64,
    /// Iteration the records were computed against.
    pub reference_iteration: u64,
    pub records: Vec<DeltaRecord>,
}

impl DeltaCheckpoint {
    pub fn encode(reference: &Checkpoint, target: &Checkpoint) -> Result<Self> {
        reference.check_same_structure(target)?;
        let records = reference
            .model_states
            .iter()
            .zip(&target.model_states)
            .map(|(b, t)| encode_delta(b, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(DeltaCheckpoint {
            iteration: target.iteration,
            reference_iteration: reference.iteration,
            records,
        })
    }

    /// Applies the records to the reference model states.
    pub fn apply(&self, reference: &[TensorBlob]) -> Result<Vec<TensorBlob>> {
        if reference.len() != self.records.len() {
            return Err(Error::StructureMismatch(format!(
                "{} reference tensors, {} records",
                reference.len(),
                self.records.len()
            )));
        }
        reference
            .iter()
            .zip(&self.records)
            .map(|(b, r)| decode_delta(b, r))
            .collect()
    }
}

/// Encodes each target against its predecessor: the first against `base`,
/// later ones against the previous target.
pub fn chain_encode(base: &Checkpoint, targets: &[Checkpoint]) -> Result<Vec<DeltaCheckpoint>> {
    let mut out = Vec::with_capacity(targets.len());
    let mut prev = base;
    for t in targets {
        if t.iteration <= prev.iteration {
            return Err(Error::StaleIteration {
                iteration: t.iteration,
                newest: prev.iteration,
            });
        }
        out.push(DeltaCheckpoint::encode(prev, t)?);
        prev = t;
    }
    Ok(out)
}

/// Replays a delta chain from `base`, returning the model states after each link.
pub fn chain_apply(base: &Checkpoint, deltas: &[DeltaCheckpoint]) -> Result<Vec<Vec<TensorBlob>>> {
    let mut out: Vec<Vec<TensorBlob>> = Vec::with_capacity(deltas.len());
    let mut expected_ref = base.iteration;
    for d in deltas {
        if d.reference_iteration != expected_ref {
            return Err(Error::MissingLink {
                missing: d.reference_iteration,
                needed_by: d.iteration,
            });
        }
        let prev = out.last().map(Vec::as_slice).unwrap_or(&base.model_states);
        out.push(d.apply(prev)?);
        expected_ref = d.iteration;
    }
    Ok(out)
}
