//! Model-distance metrics sharing a common probe context, so every pairwise
//! comparison within one replicated sub-run uses identical inputs.
//!
//! Four metrics are supported: cosine distance over flat parameters, cosine
//! distance over concatenated pre-softmax outputs, the masked-surrogate
//! signature ("zest") distance, and linear CKA over last-hidden activations.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SegmentMap};
use crate::error::{Error, Result};
use crate::nn::{forward, forward_hidden, ModelWeights};
use crate::rng::seeded_rng;

/// Which model-distance metric to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Parameter,
    Output,
    Zest,
    Cka,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Parameter => "parameter",
            MetricKind::Output => "output",
            MetricKind::Zest => "zest",
            MetricKind::Cka => "cka",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parameter" => Ok(MetricKind::Parameter),
            "output" => Ok(MetricKind::Output),
            "zest" => Ok(MetricKind::Zest),
            "cka" => Ok(MetricKind::Cka),
            other => Err(Error::invalid(format!(
                "unknown metric `{other}` (expected parameter|output|zest|cka)"
            ))),
        }
    }
}

/// Sampling sizes for a [`ProbeContext`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Probe points for output-space and CKA distances (D).
    pub probe_points: usize,
    /// Reference points for the signature fit (R).
    pub reference_points: usize,
    /// Masks per reference point (N); must be at least S+1.
    pub masks_per_reference: usize,
    /// Ridge term for the surrogate fit.
    pub ridge_lambda: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            probe_points: 64,
            reference_points: 32,
            masks_per_reference: 64,
            ridge_lambda: 1e-6,
        }
    }
}

/// Shared inputs for all pairwise comparisons of one sub-run: probe points,
/// reference points, and per-reference Bernoulli(0.5) segment masks, all
/// deterministic in the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeContext {
    probe_points: Vec<Vec<f64>>,
    reference_points: Vec<Vec<f64>>,
    /// `masks[r][k]` is the k-th mask for reference point r, length S.
    masks: Vec<Vec<Vec<bool>>>,
    segment_map: SegmentMap,
    seed: u64,
    fingerprint: u64,
}

impl ProbeContext {
    /// Samples probe and reference points (without replacement) from a
    /// dataset.
    pub fn from_dataset(
        dataset: &LabeledDataset,
        segment_map: &SegmentMap,
        settings: &ProbeSettings,
        seed: u64,
    ) -> Result<Self> {
        dataset.validate()?;
        if segment_map.dim() != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                got: segment_map.dim(),
            });
        }
        if settings.probe_points > dataset.len() || settings.reference_points > dataset.len() {
            return Err(Error::invalid("dataset too small for requested probe sizes"));
        }
        let mut rng = seeded_rng(seed);
        let probe_idx = index::sample(&mut rng, dataset.len(), settings.probe_points).into_vec();
        let ref_idx = index::sample(&mut rng, dataset.len(), settings.reference_points).into_vec();
        let probe_points = probe_idx.iter().map(|&i| dataset.features[i].clone()).collect();
        let reference_points = ref_idx.iter().map(|&i| dataset.features[i].clone()).collect();
        Self::assemble(probe_points, reference_points, segment_map.clone(), settings, seed, &mut rng)
    }

    /// Builds a context from explicit points (probes double as references).
    pub fn from_points(
        points: Vec<Vec<f64>>,
        segment_map: SegmentMap,
        settings: &ProbeSettings,
        seed: u64,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("probe points"));
        }
        let mut rng = seeded_rng(seed);
        let reference_points: Vec<Vec<f64>> = points
            .iter()
            .cycle()
            .take(settings.reference_points)
            .cloned()
            .collect();
        let probe_points = points;
        Self::assemble(probe_points, reference_points, segment_map, settings, seed, &mut rng)
    }

    /// Synthetic standard-normal probes, for offline detection when no
    /// dataset dump is available.
    pub fn synthetic(input_dim: usize, segment_map: SegmentMap, settings: &ProbeSettings, seed: u64) -> Result<Self> {
        if segment_map.dim() != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                got: segment_map.dim(),
            });
        }
        let mut rng = seeded_rng(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |count: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| (0..input_dim).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let probe_points = draw(settings.probe_points);
        let reference_points = draw(settings.reference_points);
        Self::assemble(probe_points, reference_points, segment_map, settings, seed, &mut rng)
    }

    fn assemble(
        probe_points: Vec<Vec<f64>>,
        reference_points: Vec<Vec<f64>>,
        segment_map: SegmentMap,
        settings: &ProbeSettings,
        seed: u64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if probe_points.is_empty() || reference_points.is_empty() {
            return Err(Error::EmptyInput("probe context points"));
        }
        let s = segment_map.num_segments();
        if settings.masks_per_reference < s + 1 {
            return Err(Error::invalid(format!(
                "need at least S+1 = {} masks per reference point, got {}",
                s + 1,
                settings.masks_per_reference
            )));
        }
        let masks: Vec<Vec<Vec<bool>>> = (0..reference_points.len())
            .map(|_| {
                (0..settings.masks_per_reference)
                    .map(|_| (0..s).map(|_| rng.random_bool(0.5)).collect())
                    .collect()
            })
            .collect();
        let fingerprint = fingerprint_context(&probe_points, &reference_points, &masks, seed);
        Ok(ProbeContext {
            probe_points,
            reference_points,
            masks,
            segment_map,
            seed,
            fingerprint,
        })
    }

    pub fn probe_points(&self) -> &[Vec<f64>] {
        &self.probe_points
    }

    pub fn reference_points(&self) -> &[Vec<f64>] {
        &self.reference_points
    }

    pub fn masks(&self) -> &[Vec<Vec<bool>>] {
        &self.masks
    }

    pub fn segment_map(&self) -> &SegmentMap {
        &self.segment_map
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

fn fingerprint_context(probes: &[Vec<f64>], refs: &[Vec<f64>], masks: &[Vec<Vec<bool>>], seed: u64) -> u64 {
    let mut h = seed ^ 0x5254_5444_5a53_5447; // arbitrary domain tag
    let mut absorb = |v: u64| {
        h ^= v;
        h = h.rotate_left(23).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    };
    for p in probes.iter().chain(refs) {
        for &x in p {
            absorb(x.to_bits());
        }
    }
    for per_ref in masks {
        for m in per_ref {
            let mut packed = 0u64;
            for (i, &b) in m.iter().enumerate() {
                packed ^= (b as u64) << (i % 64);
                if i % 64 == 63 {
                    absorb(packed);
                    packed = 0;
                }
            }
            absorb(packed ^ m.len() as u64);
        }
    }
    h
}

/// Concatenated linear-surrogate weights approximating a model's global
/// behavior; comparable only within the probe context that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZestSignature {
    values: Vec<f64>,
    context_fingerprint: u64,
}

impl ZestSignature {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `1 - cos(a, b)`, in [0,2].
fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Cosine distance over flat model parameters.
pub fn param_cosine_distance(w1: &ModelWeights, w2: &ModelWeights) -> Result<f64> {
    if w1.arch() != w2.arch() {
        return Err(Error::invalid("models must share an architecture"));
    }
    if is_zero(w1.values()) || is_zero(w2.values()) {
        return Err(Error::ZeroVector);
    }
    if w1.values() == w2.values() {
        return Ok(0.0);
    }
    cosine_distance(w1.values(), w2.values())
}

/// Cosine distance between the concatenations of pre-softmax outputs over
/// the context's probe points.
pub fn output_space_distance(w1: &ModelWeights, w2: &ModelWeights, ctx: &ProbeContext) -> Result<f64> {
    let a = concat_logits(w1, ctx)?;
    let b = concat_logits(w2, ctx)?;
    if is_zero(&a) || is_zero(&b) {
        return Err(Error::ZeroVector);
    }
    if a == b {
        return Ok(0.0);
    }
    cosine_distance(&a, &b)
}

fn concat_logits(w: &ModelWeights, ctx: &ProbeContext) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ctx.probe_points.len() * w.arch().num_classes);
    for p in &ctx.probe_points {
        out.extend(forward(w, p)?);
    }
    Ok(out)
}

/// Replaces the features of segments whose mask bit is 0 with the masking
/// baseline (zero); bit 1 keeps the original feature.
pub fn masked_samples(x: &[f64], mask: &[bool], segment_map: &SegmentMap) -> Result<Vec<f64>> {
    if x.len() != segment_map.dim() {
        return Err(Error::DimensionMismatch {
            expected: segment_map.dim(),
            got: x.len(),
        });
    }
    if mask.len() != segment_map.num_segments() {
        return Err(Error::DimensionMismatch {
            expected: segment_map.num_segments(),
            got: mask.len(),
        });
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| if mask[segment_map.segment_of(i)] { v } else { 0.0 })
        .collect())
}

/// Fits, for each reference point, a ridge least-squares map from mask
/// vectors (plus intercept) to the model's pre-softmax outputs on the masked
/// samples, and concatenates the S x num_classes weight blocks (intercepts
/// excluded) in reference-point order.
pub fn zest_signature(w: &ModelWeights, ctx: &ProbeContext, ridge_lambda: f64) -> Result<ZestSignature> {
    if !(ridge_lambda >= 0.0) {
        return Err(Error::invalid("ridge lambda must be nonnegative"));
    }
    let s = ctx.segment_map.num_segments();
    let classes = w.arch().num_classes;
    let mut values = Vec::with_capacity(ctx.reference_points.len() * s * classes);
    for (r, point) in ctx.reference_points.iter().enumerate() {
        let masks = &ctx.masks[r];
        let n = masks.len();
        // Design matrix rows: S mask bits then an intercept column.
        let cols = s + 1;
        let mut design = vec![0.0; n * cols];
        let mut targets = vec![0.0; n * classes];
        for (k, mask) in masks.iter().enumerate() {
            for (j, &bit) in mask.iter().enumerate() {
                design[k * cols + j] = bit as u8 as f64;
            }
            design[k * cols + s] = 1.0;
            let sample = masked_samples(point, mask, &ctx.segment_map)?;
            let logits = forward(w, &sample)?;
            targets[k * classes..(k + 1) * classes].copy_from_slice(&logits);
        }
        let beta = ridge_solve(&design, n, cols, &targets, classes, ridge_lambda)?;
        // Keep the S segment rows, drop the intercept row.
        values.extend_from_slice(&beta[..s * classes]);
    }
    Ok(ZestSignature {
        values,
        context_fingerprint: ctx.fingerprint,
    })
}

/// Solves `(X^T X + lambda I) B = X^T Y` for B (cols x targets, row-major)
/// by Gaussian elimination with partial pivoting.
fn ridge_solve(x: &[f64], rows: usize, cols: usize, y: &[f64], targets: usize, lambda: f64) -> Result<Vec<f64>> {
    let mut ata = vec![0.0; cols * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        for i in 0..cols {
            for j in 0..cols {
                ata[i * cols + j] += xr[i] * xr[j];
            }
        }
    }
    for i in 0..cols {
        ata[i * cols + i] += lambda;
    }
    let mut aty = vec![0.0; cols * targets];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &y[r * targets..(r + 1) * targets];
        for i in 0..cols {
            for t in 0..targets {
                aty[i * targets + t] += xr[i] * yr[t];
            }
        }
    }

    // Scale-aware singularity threshold for the pivot.
    let scale = ata.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tiny = scale.max(1.0) * 1e-13;
    for col in 0..cols {
        let pivot_row = (col..cols)
            .max_by(|&a, &b| ata[a * cols + col].abs().total_cmp(&ata[b * cols + col].abs()))
            .expect("non-empty range");
        if ata[pivot_row * cols + col].abs() < tiny {
            return Err(Error::SingularSystem);
        }
        if pivot_row != col {
            for j in 0..cols {
                ata.swap(col * cols + j, pivot_row * cols + j);
            }
            for t in 0..targets {
                aty.swap(col * targets + t, pivot_row * targets + t);
            }
        }
        let pivot = ata[col * cols + col];
        for r in 0..cols {
            if r == col {
                continue;
            }
            let factor = ata[r * cols + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..cols {
                ata[r * cols + j] -= factor * ata[col * cols + j];
            }
            for t in 0..targets {
                aty[r * targets + t] -= factor * aty[col * targets + t];
            }
        }
    }
    let mut beta = vec![0.0; cols * targets];
    for i in 0..cols {
        let pivot = ata[i * cols + i];
        for t in 0..targets {
            beta[i * targets + t] = aty[i * targets + t] / pivot;
        }
    }
    Ok(beta)
}

/// Cosine distance between two signatures from the same probe context.
pub fn zest_distance(s1: &ZestSignature, s2: &ZestSignature) -> Result<f64> {
    if s1.context_fingerprint != s2.context_fingerprint {
        return Err(Error::ContextMismatch);
    }
    if s1.values.len() != s2.values.len() {
        return Err(Error::DimensionMismatch {
            expected: s1.values.len(),
            got: s2.values.len(),
        });
    }
    if is_zero(&s1.values) || is_zero(&s2.values) {
        return Err(Error::ZeroVector);
    }
    if s1.values == s2.values {
        return Ok(0.0);
    }
    cosine_distance(&s1.values, &s2.values)
}

/// `1 - CKA` over last-hidden activations on the probe points, with the
/// linear kernel: `CKA = |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)` after column
/// centering.
pub fn cka_linear_distance(w1: &ModelWeights, w2: &ModelWeights, ctx: &ProbeContext) -> Result<f64> {
    let x = centered_activations(w1, ctx)?;
    let fxx = cross_frobenius(&x, &x);
    if w1.values() == w2.values() {
        return if fxx == 0.0 { Err(Error::ZeroVariance) } else { Ok(0.0) };
    }
    let y = centered_activations(w2, ctx)?;
    let fyy = cross_frobenius(&y, &y);
    if fxx == 0.0 || fyy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let fxy = cross_frobenius(&y, &x);
    Ok((1.0 - fxy / (fxx.sqrt() * fyy.sqrt())).clamp(0.0, 1.0))
}

/// Row-major (probe x hidden) activation matrix, column-centered.
fn centered_activations(w: &ModelWeights, ctx: &ProbeContext) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(ctx.probe_points.len());
    for p in &ctx.probe_points {
        rows.push(forward_hidden(w, p)?);
    }
    let cols = rows[0].len();
    for c in 0..cols {
        let mean: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
        for r in rows.iter_mut() {
            r[c] -= mean;
        }
    }
    Ok(rows)
}

/// `|A^T B|_F^2` for row-major matrices with equal row counts.
fn cross_frobenius(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let ca = a[0].len();
    let cb = b[0].len();
    let mut total = 0.0;
    for i in 0..ca {
        for j in 0..cb {
            let mut dot = 0.0;
            for (ra, rb) in a.iter().zip(b) {
                dot += ra[i] * rb[j];
            }
            total += dot * dot;
        }
    }
    total
}

/// Computes one pairwise distance with the shared context.
pub fn model_distance(metric: MetricKind, w1: &ModelWeights, w2: &ModelWeights, ctx: &ProbeContext, ridge_lambda: f64) -> Result<f64> {
    match metric {
        MetricKind::Parameter => param_cosine_distance(w1, w2),
        MetricKind::Output => output_space_distance(w1, w2, ctx),
        MetricKind::Zest => {
            let s1 = zest_signature(w1, ctx, ridge_lambda)?;
            let s2 = zest_signature(w2, ctx, ridge_lambda)?;
            zest_distance(&s1, &s2)
        }
        MetricKind::Cka => cka_linear_distance(w1, w2, ctx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_tiny_images;
    use crate::nn::{init_weights, Activation, ModelArch};
    use crate::rng::{RngKey, Stream};

    fn ctx_for(dataset: &LabeledDataset, map: &SegmentMap, seed: u64) -> ProbeContext {
        let settings = ProbeSettings {
            probe_points: 16,
            reference_points: 6,
            masks_per_reference: 40,
            ridge_lambda: 1e-6,
        };
        ProbeContext::from_dataset(dataset, map, &settings, seed).unwrap()
    }

    fn toy_model(seed: u64) -> ModelWeights {
        let arch = ModelArch::new(64, vec![12], 4, Activation::Tanh).unwrap();
        init_weights(&arch, &RngKey::new(seed, 1, 0, Stream::Init)).unwrap()
    }

    #[test]
    fn param_cosine_basics() {
        let w = toy_model(1);
        assert_eq!(param_cosine_distance(&w, &w).unwrap(), 0.0);
        let neg = ModelWeights::from_values(w.arch().clone(), w.values().iter().map(|v| -v).collect()).unwrap();
        assert!((param_cosine_distance(&w, &neg).unwrap() - 2.0).abs() < 1e-12);

        let arch = ModelArch::new(2, vec![], 2, Activation::Relu).unwrap();
        let a = ModelWeights::from_values(arch.clone(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = ModelWeights::from_values(arch.clone(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((param_cosine_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let z = ModelWeights::zeros(arch).unwrap();
        assert!(matches!(param_cosine_distance(&a, &z), Err(Error::ZeroVector)));
    }

    #[test]
    fn output_distance_scale_invariant() {
        let (data, map) = make_tiny_images(2, 4, 8, 10).unwrap();
        let ctx = ctx_for(&data, &map, 5);
        let w = toy_model(2);
        assert_eq!(output_space_distance(&w, &w, &ctx).unwrap(), 0.0);

        // Double the final affine layer: logits scale by 2, cosine unchanged.
        let mut doubled = w.clone();
        let dims = w.arch().layer_dims();
        let last_params: usize = dims.last().map(|(i, o)| (i + 1) * o).unwrap();
        let start = w.values().len() - last_params;
        for v in &mut doubled.values_mut()[start..] {
            *v *= 2.0;
        }
        let d = output_space_distance(&w, &doubled, &ctx).unwrap();
        assert!(d < 1e-12, "scale changed cosine distance: {d}");
    }

    #[test]
    fn masked_samples_cases() {
        let map = SegmentMap::grid(8, 4).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let all_on = vec![true; 16];
        assert_eq!(masked_samples(&x, &all_on, &map).unwrap(), x);
        let all_off = vec![false; 16];
        assert!(masked_samples(&x, &all_off, &map).unwrap().iter().all(|&v| v == 0.0));

        let mut one_off = vec![true; 16];
        one_off[3] = false;
        let masked = masked_samples(&x, &one_off, &map).unwrap();
        let seg3 = map.indices_of(3);
        for (i, (&orig, &m)) in x.iter().zip(&masked).enumerate() {
            if seg3.contains(&i) {
                assert_eq!(m, 0.0);
            } else {
                assert_eq!(m, orig);
            }
        }
        assert!(masked_samples(&x, &vec![true; 7], &map).is_err());
    }

    #[test]
    fn zest_signature_deterministic_and_zero_on_identical() {
        let (data, map) = make_tiny_images(3, 4, 8, 10).unwrap();
        let ctx = ctx_for(&data, &map, 7);
        let w = toy_model(3);
        let s1 = zest_signature(&w, &ctx, 1e-6).unwrap();
        let s2 = zest_signature(&w, &ctx, 1e-6).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.values().len(), 6 * 16 * 4);
        assert_eq!(zest_distance(&s1, &s2).unwrap(), 0.0);
    }

    #[test]
    fn zest_recovers_mask_linear_oracle() {
        // A model with no hidden layer is exactly linear in the mask bits:
        // logits(x masked by m) = sum_s m_s * (sum_{i in seg s} W[:,i] x_i) + b.
        let (data, map) = make_tiny_images(4, 3, 8, 10).unwrap();
        let settings = ProbeSettings {
            probe_points: 8,
            reference_points: 4,
            masks_per_reference: 40,
            ridge_lambda: 0.0,
        };
        let ctx = ProbeContext::from_dataset(&data, &map, &settings, 11).unwrap();
        let arch = ModelArch::new(64, vec![], 3, Activation::Relu).unwrap();
        let w = init_weights(&arch, &RngKey::new(9, 1, 0, Stream::Init)).unwrap();

        let sig = zest_signature(&w, &ctx, 0.0).unwrap();
        let classes = 3;
        let s = map.num_segments();
        for (r, point) in ctx.reference_points().iter().enumerate() {
            for seg in 0..s {
                for c in 0..classes {
                    // Expected coefficient, by construction.
                    let mut coef = 0.0;
                    for i in map.indices_of(seg) {
                        coef += w.values()[c * 64 + i] * point[i];
                    }
                    let got = sig.values()[r * s * classes + seg * classes + c];
                    assert!(
                        (coef - got).abs() <= 1e-8 * (1.0 + coef.abs()),
                        "ref {r} seg {seg} class {c}: {coef} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn zest_rejects_cross_context_comparison() {
        let (data, map) = make_tiny_images(5, 4, 8, 10).unwrap();
        let ctx_a = ctx_for(&data, &map, 1);
        let ctx_b = ctx_for(&data, &map, 2);
        let w = toy_model(4);
        let sa = zest_signature(&w, &ctx_a, 1e-6).unwrap();
        let sb = zest_signature(&w, &ctx_b, 1e-6).unwrap();
        assert!(matches!(zest_distance(&sa, &sb), Err(Error::ContextMismatch)));
    }

    #[test]
    fn context_requires_overdetermined_fit() {
        let (data, map) = make_tiny_images(6, 4, 8, 10).unwrap();
        let settings = ProbeSettings {
            probe_points: 8,
            reference_points: 4,
            masks_per_reference: 16, // S = 16 needs at least 17
            ridge_lambda: 0.0,
        };
        assert!(ProbeContext::from_dataset(&data, &map, &settings, 3).is_err());
    }

    #[test]
    fn cka_identity_and_scale_invariance() {
        let (data, map) = make_tiny_images(7, 4, 8, 10).unwrap();
        let ctx = ctx_for(&data, &map, 13);
        let w = toy_model(5);
        assert!(cka_linear_distance(&w, &w, &ctx).unwrap() < 1e-12);

        // Scale every hidden activation by c: scale the first layer? Tanh is
        // nonlinear, so instead scale the activation matrix directly through
        // the formula on a hand-built pair below.
        let x = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![2.0, -1.0]];
        let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * -3.5).collect()).collect();
        let center = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut m = m.to_vec();
            for c in 0..m[0].len() {
                let mean: f64 = m.iter().map(|r| r[c]).sum::<f64>() / m.len() as f64;
                for r in m.iter_mut() {
                    r[c] -= mean;
                }
            }
            m
        };
        let (cx, cy) = (center(&x), center(&y));
        let cka = cross_frobenius(&cy, &cx) / (cross_frobenius(&cx, &cx).sqrt() * cross_frobenius(&cy, &cy).sqrt());
        assert!((cka - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_matches_hand_formula_on_small_matrices() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let y = vec![vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 2.0]];
        // Independent evaluation with explicit loops over the definition.
        let center = |m: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let rows = m.len() as f64;
            let cols = m[0].len();
            let mut out = m.to_vec();
            for c in 0..cols {
                let mean: f64 = m.iter().map(|r| r[c]).sum::<f64>() / rows;
                for r in out.iter_mut() {
                    r[c] -= mean;
                }
            }
            out
        };
        let (cx, cy) = (center(&x), center(&y));
        let gram = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            // |A^T B|_F^2 expanded entry by entry.
            let mut total = 0.0;
            for i in 0..a[0].len() {
                for j in 0..b[0].len() {
                    let mut dot = 0.0;
                    for r in 0..a.len() {
                        dot += a[r][i] * b[r][j];
                    }
                    total += dot * dot;
                }
            }
            total
        };
        let expected = 1.0 - gram(&cy, &cx) / (gram(&cx, &cx).sqrt() * gram(&cy, &cy).sqrt());
        let got = 1.0 - cross_frobenius(&cy, &cx) / (cross_frobenius(&cx, &cx).sqrt() * cross_frobenius(&cy, &cy).sqrt());
        assert!((expected - got).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn cka_zero_variance_rejected() {
        let (data, map) = make_tiny_images(8, 4, 8, 10).unwrap();
        let ctx = ctx_for(&data, &map, 17);
        let arch = ModelArch::new(64, vec![6], 4, Activation::Relu).unwrap();
        let mut w = ModelWeights::zeros(arch).unwrap();
        // Negative biases drive every hidden relu to exactly zero.
        for o in 0..6 {
            w.values_mut()[64 * 6 + o] = -1.0;
        }
        assert!(matches!(cka_linear_distance(&w, &w, &ctx), Err(Error::ZeroVariance)));
    }

    #[test]
    fn metrics_are_symmetric() {
        let (data, map) = make_tiny_images(9, 4, 8, 12).unwrap();
        let ctx = ctx_for(&data, &map, 19);
        let a = toy_model(6);
        let b = toy_model(7);
        for metric in [MetricKind::Parameter, MetricKind::Output, MetricKind::Zest, MetricKind::Cka] {
            let ab = model_distance(metric, &a, &b, &ctx, 1e-6).unwrap();
            let ba = model_distance(metric, &b, &a, &ctx, 1e-6).unwrap();
            assert!((ab - ba).abs() < 1e-12, "{metric:?} asymmetric: {ab} vs {ba}");
            assert!(ab > 0.0);
            assert_eq!(model_distance(metric, &a, &a, &ctx, 1e-6).unwrap(), 0.0);
        }
    }
}
