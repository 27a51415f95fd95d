//! Compression ratio, codec time, precision and the weighted quality score
//! `q = w1·cr + w2·cs + w3·ps` over min-max normalized factors.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant;
use crate::store::{encode_checkpoint, plan_kind, ChainHead, EncodedCheckpoint};
use crate::tensor::{Checkpoint, TensorBlob};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl QualityWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let w = QualityWeights { w1, w2, w3 };
        if [w1, w2, w3].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Weights(format!(
                "{w1}, {w2}, {w3} must be finite and >= 0"
            )));
        }
        if (w1 + w2 + w3 - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Weights(format!("{w1} + {w2} + {w3} != 1")));
        }
        Ok(w)
    }

    /// Parses `w1,w2,w3`.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Weights(format!("`{s}`: {e}")))?;
        match v[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => Err(Error::Weights(format!("`{s}`: expected three weights"))),
        }
    }

    pub fn combine(&self, cr: f64, cs: f64, ps: f64) -> f64 {
        self.w1 * cr + self.w2 * cs + self.w3 * ps
    }
}

impl Default for QualityWeights {
    /// Equal weighting.
    fn default() -> Self {
        QualityWeights {
            w1: 1.0 / 3.0,
            w2: 1.0 / 3.0,
            w3: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorBounds {
    pub min: f64,
    pub max: f64,
}

impl FactorBounds {
    /// Position of `v` in `[min, max]`, clamped; 1 when the bounds coincide.
    pub fn higher_is_better(&self, v: f64) -> f64 {
        if self.max == self.min {
            return 1.0;
        }
        ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    pub fn lower_is_better(&self, v: f64) -> f64 {
        if self.max == self.min {
            return 1.0;
        }
        ((self.max - v) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

/// Corpus min/max per factor, recorded in every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBounds {
    /// Compression ratio.
    pub cr: FactorBounds,
    /// Codec seconds above the no-op baseline.
    pub cs: FactorBounds,
    /// Mean squared error.
    pub ps: FactorBounds,
}

impl Default for NormalizationBounds {
    fn default() -> Self {
        NormalizationBounds {
            cr: FactorBounds {
                min: 1.0,
                max: 16.0,
            },
            cs: FactorBounds { min: 0.0, max: 1.0 },
            ps: FactorBounds {
                min: 0.0,
                max: 1e-5,
            },
        }
    }
}

impl NormalizationBounds {
    /// Parses `cr_min,cr_max,cs_min,cs_max,ps_min,ps_max`.
    pub fn parse(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bounds `{s}`: {e}")))?;
        let [a, b, c, d, e, f] = v[..] else {
            return Err(Error::Config(format!("bounds `{s}`: expected six numbers")));
        };
        let pair = |min: f64, max: f64| {
            if min.is_finite() && max.is_finite() && min <= max {
                Ok(FactorBounds { min, max })
            } else {
                Err(Error::Config(format!(
                    "bounds `{s}`: need finite min <= max"
                )))
            }
        };
        Ok(NormalizationBounds {
            cr: pair(a, b)?,
            cs: pair(c, d)?,
            ps: pair(e, f)?,
        })
    }

    /// (cr, cs, ps) scores in [0, 1]; speed and error are inverted.
    pub fn scores(&self, cr_raw: f64, cs_raw: f64, ps_raw: f64) -> (f64, f64, f64) {
        (
            self.cr.higher_is_better(cr_raw),
            self.cs.lower_is_better(cs_raw),
            self.ps.lower_is_better(ps_raw),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmups: usize,
    pub repetitions: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            warmups: 5,
            repetitions: 20,
        }
    }
}

/// Median wall time of `f` in seconds after `warmups` discarded runs.
pub fn median_seconds<T>(timing: Timing, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..timing.warmups {
        std::hint::black_box(f());
    }
    let mut samples: Vec<f64> = (0..timing.repetitions.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub cr_raw: f64,
    pub cs_raw: f64,
    pub ps_raw: f64,
    pub cr: f64,
    pub cs: f64,
    pub ps: f64,
    pub q: f64,
    pub weights: QualityWeights,
    pub bounds: NormalizationBounds,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub compress_seconds: f64,
    pub decompress_seconds: f64,
    pub baseline_seconds: f64,
    pub optimizer_mre: f64,
    pub timing: Timing,
    /// "base" or "delta".
    pub kind: String,
}

impl QualityReport {
    /// Normalizes the raw factors and combines them.
    pub fn from_raw(
        cr_raw: f64,
        cs_raw: f64,
        ps_raw: f64,
        weights: QualityWeights,
        bounds: NormalizationBounds,
    ) -> Self {
        let (cr, cs, ps) = bounds.scores(cr_raw, cs_raw, ps_raw);
        QualityReport {
            cr_raw,
            cs_raw,
            ps_raw,
            cr,
            cs,
            ps,
            q: weights.combine(cr, cs, ps),
            weights,
            bounds,
            original_bytes: 0,
            compressed_bytes: 0,
            compress_seconds: 0.0,
            decompress_seconds: 0.0,
            baseline_seconds: 0.0,
            optimizer_mre: 0.0,
            timing: Timing::default(),
            kind: String::new(),
        }
    }

    /// Re-derives scores and q from the raw fields, weights and bounds.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let (cr, cs, ps) = self.bounds.scores(self.cr_raw, self.cs_raw, self.ps_raw);
        let q = self.weights.combine(self.cr, self.cs, self.ps);
        (cr - self.cr).abs() <= tol
            && (cs - self.cs).abs() <= tol
            && (ps - self.ps).abs() <= tol
            && (q - self.q).abs() <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub weights: QualityWeights,
    pub bounds: NormalizationBounds,
    pub timing: Timing,
    pub clusters: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            weights: QualityWeights::default(),
            bounds: NormalizationBounds::default(),
            timing: Timing::default(),
            clusters: quant::DEFAULT_CLUSTERS,
        }
    }
}

/// Element-weighted MSE and mean MRE over paired tensor lists.
fn optimizer_error(original: &[TensorBlob], restored: &[TensorBlob]) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut n = 0usize;
    for (a, b) in original.iter().zip(restored) {
        let k = a.numel();
        if k == 0 {
            continue;
        }
        let r = quant::precision_report(a, b)?;
        sq += r.mse * k as f64;
        rel += r.mre * k as f64;
        n += k;
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((sq / n as f64, rel / n as f64))
}

/// Times the save codec (`ckpt` against `prev` when given, else as a base)
/// and its inverse, subtracting a raw serialize/parse round trip.
pub fn measure(
    ckpt: &Checkpoint,
    prev: Option<&Checkpoint>,
    opts: &BenchOptions,
) -> Result<QualityReport> {
    let head = prev.map(|p| ChainHead {
        latest: p.iteration,
        base: p.iteration,
        length: 1,
    });
    let plan = plan_kind(ckpt.iteration, head, usize::MAX);
    let compress = || -> Result<Vec<u8>> {
        Ok(encode_checkpoint(ckpt, prev, &plan, opts.clusters)?.to_bytes())
    };
    let payload = compress()?;
    let decompress = || -> Result<Checkpoint> {
        let enc = EncodedCheckpoint::from_bytes(&payload)?;
        let mut model = prev.map(|p| p.model_states.clone()).unwrap_or_default();
        enc.apply_model(&mut model)?;
        Checkpoint::new(enc.iteration(), model, enc.decode_optimizer()?)
    };
    let restored = decompress()?;
    if restored.model_states != ckpt.model_states {
        return Err(Error::InvalidCheckpoint(
            "model states changed in the codec".into(),
        ));
    }
    let raw = ckpt.to_bytes();
    let noop = || Checkpoint::from_bytes(&ckpt.to_bytes());

    let t = opts.timing;
    let compress_seconds = median_seconds(t, compress);
    let decompress_seconds = median_seconds(t, decompress);
    let baseline_seconds = median_seconds(t, noop);

    let cr_raw = raw.len() as f64 / payload.len() as f64;
    let cs_raw = (compress_seconds + decompress_seconds - baseline_seconds).max(0.0);
    let (ps_raw, mre) = optimizer_error(&ckpt.optimizer_states, &restored.optimizer_states)?;

    let mut report = QualityReport::from_raw(cr_raw, cs_raw, ps_raw, opts.weights, opts.bounds);
    report.original_bytes = raw.len() as u64;
    report.compressed_bytes = payload.len() as u64;
    report.compress_seconds = compress_seconds;
    report.decompress_seconds = decompress_seconds;
    report.baseline_seconds = baseline_seconds;
    report.optimizer_mre = mre;
    report.timing = t;
    report.kind = plan.kind.token().into();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    #[test]
    fn weights_validation() {
        assert!(QualityWeights::new(0.2, 0.4, 0.4).is_ok());
        assert!(QualityWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(QualityWeights::new(-0.1, 0.6, 0.5).is_err());
        assert!(QualityWeights::new(f64::NAN, 0.5, 0.5).is_err());
        assert_eq!(
            QualityWeights::parse("0.2, 0.4,0.4").unwrap(),
            QualityWeights::new(0.2, 0.4, 0.4).unwrap()
        );
        assert!(QualityWeights::parse("0.5,0.5").is_err());
        assert!(QualityWeights::parse("a,b,c").is_err());
        let d = QualityWeights::default();
        assert!((d.w1 + d.w2 + d.w3 - 1.0).abs() <= WEIGHT_SUM_TOLERANCE);
    }

    #[test]
    fn unit_scores_give_unit_q() {
        let w = QualityWeights::default();
        assert!((w.combine(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn training_weights_example() {
        let w = QualityWeights::new(0.2, 0.4, 0.4).unwrap();
        assert!((w.combine(1.0, 0.5, 0.5) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn normalization_orientation_and_degenerate_bounds() {
        let b = NormalizationBounds::default();
        assert_eq!(b.scores(16.0, 0.0, 0.0), (1.0, 1.0, 1.0));
        assert_eq!(b.scores(1.0, 1.0, 1e-5), (0.0, 0.0, 0.0));
        assert_eq!(b.scores(100.0, -1.0, 1.0), (1.0, 1.0, 0.0));
        let (cr, cs, _) = b.scores(8.5, 0.25, 0.0);
        assert!((cr - 0.5).abs() < 1e-15 && (cs - 0.75).abs() < 1e-15);
        let flat = FactorBounds { min: 3.0, max: 3.0 };
        assert_eq!(flat.higher_is_better(7.0), 1.0);
        assert_eq!(flat.lower_is_better(7.0), 1.0);
    }

    #[test]
    fn bounds_parse() {
        let b = NormalizationBounds::parse("1,16,0,2,0,1e-5").unwrap();
        assert_eq!(b.cs.max, 2.0);
        assert!(NormalizationBounds::parse("1,16,0,2,0").is_err());
        assert!(NormalizationBounds::parse("16,1,0,2,0,1").is_err());
    }

    #[test]
    fn median_of_even_and_odd_counts() {
        let mut calls = 0;
        let m = median_seconds(
            Timing {
                warmups: 2,
                repetitions: 3,
            },
            || calls += 1,
        );
        assert_eq!(calls, 5);
        assert!(m >= 0.0);
    }

    #[test]
    fn measure_lossless_model_path() {
        let base = synth::random_checkpoint(0, &[20_000], &[], 1);
        let next = synth::mutate(&base, 1, 0.15, 2);
        let opts = BenchOptions {
            timing: Timing {
                warmups: 1,
                repetitions: 3,
            },
            ..Default::default()
        };
        let r = measure(&next, Some(&base), &opts).unwrap();
        assert_eq!(r.kind, "delta");
        assert_eq!(r.ps_raw, 0.0);
        assert_eq!(r.ps, 1.0);
        assert!(r.cr_raw > 4.0, "{}", r.cr_raw);
        assert!(r.is_consistent(1e-12));
        let json = serde_json::to_string(&r).unwrap();
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn measure_base_with_optimizer() {
        let c = synth::random_checkpoint(0, &[1000], &[10_000], 3);
        let opts = BenchOptions {
            timing: Timing {
                warmups: 0,
                repetitions: 1,
            },
            ..Default::default()
        };
        let r = measure(&c, None, &opts).unwrap();
        assert_eq!(r.kind, "base");
        assert!(r.ps_raw > 0.0 && r.ps_raw < 1e-4);
        assert!(r.is_consistent(1e-12));
    }

    fn arb_weights() -> impl Strategy<Value = QualityWeights> {
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            QualityWeights {
                w1: lo,
                w2: hi - lo,
                w3: 1.0 - hi,
            }
        })
    }

    proptest! {
        #[test]
        fn shifting_weight_to_cr_is_linear_in_cr_minus_cs(
            w in arb_weights(),
            cr in 0.0f64..1.0, cs in 0.0f64..1.0, ps in 0.0f64..1.0,
            step in 0.0f64..1.0,
        ) {
            let delta = step * w.w2;
            let shifted = QualityWeights { w1: w.w1 + delta, w2: w.w2 - delta, w3: w.w3 };
            let before = w.combine(cr, cs, ps);
            let after = shifted.combine(cr, cs, ps);
            prop_assert!((after - before - delta * (cr - cs)).abs() <= 1e-12);
        }

        #[test]
        fn without_ps_weight_q_approaches_cr(
            w1 in 0.0f64..1.0, step in 0.0f64..1.0,
            cr in 0.0f64..1.0, cs in 0.0f64..1.0, ps in 0.0f64..1.0,
        ) {
            let w = QualityWeights { w1, w2: 1.0 - w1, w3: 0.0 };
            let delta = step * w.w2;
            let shifted = QualityWeights { w1: w1 + delta, w2: w.w2 - delta, w3: 0.0 };
            let before = (w.combine(cr, cs, ps) - cr).abs();
            let after = (shifted.combine(cr, cs, ps) - cr).abs();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn report_is_self_consistent(
            w in arb_weights(),
            cr_raw in 0.5f64..20.0, cs_raw in 0.0f64..2.0, ps_raw in 0.0f64..2e-6,
        ) {
            let r = QualityReport::from_raw(cr_raw, cs_raw, ps_raw, w, NormalizationBounds::default());
            prop_assert!(r.is_consistent(1e-12));
            for s in [r.cr, r.cs, r.ps] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
