//! End-to-end detection over one replicated sub-run: pairwise distance
//! matrix, minimum-variance benign-cluster identification, per-server KS
//! verdicts with a MAD fallback for small fleets, and the guarantee / cost
//! formulas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{zest_signature, MetricKind, ProbeContext, ZestSignature};
use crate::error::{Error, Result};
use crate::nn::ModelWeights;
use crate::stats::{anomaly_index, ks_two_sample, median, min_variance_window, quantile, WindowSelection};

/// Symmetric matrix of pairwise model distances with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    metric: MetricKind,
    /// Row-major `n x n` entries.
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds a matrix from the upper-triangle pair values `(i, j, d)` with
    /// `i < j`; symmetry and the zero diagonal hold by construction.
    pub fn from_pairs(n: usize, metric: MetricKind, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        if pairs.len() != n * (n - 1) / 2 {
            return Err(Error::invalid(format!(
                "expected {} pair distances for n={n}, got {}",
                n * (n - 1) / 2,
                pairs.len()
            )));
        }
        let mut entries = vec![0.0; n * n];
        for &(i, j, d) in pairs {
            if i >= j || j >= n {
                return Err(Error::invalid(format!("bad pair index ({i},{j})")));
            }
            if !(d >= 0.0) {
                return Err(Error::invalid(format!("negative or NaN distance at ({i},{j})")));
            }
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
        Ok(DistanceMatrix { n, metric, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Upper-triangle distances in `(i, j)` lexicographic order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Row `i` without the diagonal entry: the server-to-other distances.
    pub fn row_distances(&self, i: usize) -> Vec<f64> {
        (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j)).collect()
    }

    /// Returns a copy with rows/columns rearranged so that new index `k`
    /// holds old index `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let mut entries = vec![0.0; self.n * self.n];
        for a in 0..self.n {
            for b in 0..self.n {
                entries[a * self.n + b] = self.get(perm[a], perm[b]);
            }
        }
        Ok(DistanceMatrix {
            n: self.n,
            metric: self.metric,
            entries,
        })
    }
}

/// Which per-server decision rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    Ks,
    Mad,
}

/// Window policy over a server's sorted distances. Only contiguous windows
/// are implemented; the enum records the choice in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    ContiguousSorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Lower bound on the fraction of benign servers (r).
    pub benign_fraction_r: f64,
    /// KS significance level; a server is flagged when its best window
    /// p-value falls below this.
    pub significance: f64,
    pub window_policy: WindowPolicy,
    pub fallback: FallbackRule,
    /// Quantile of the anomaly indexes compared in MAD mode.
    pub mad_quartile: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            benign_fraction_r: 0.5,
            significance: 0.01,
            window_policy: WindowPolicy::ContiguousSorted,
            fallback: FallbackRule::Ks,
            mad_quartile: 0.75,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.benign_fraction_r > 0.0 && self.benign_fraction_r <= 1.0) {
            return Err(Error::invalid("benign fraction r must lie in (0,1]"));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::invalid("significance must lie in (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.mad_quartile) {
            return Err(Error::invalid("mad quartile must lie in [0,1]"));
        }
        if ceil_count(self.benign_fraction_r, n) < 2 {
            return Err(Error::invalid(format!(
                "ceil(r*n) must be at least 2 (r={}, n={n})",
                self.benign_fraction_r
            )));
        }
        Ok(())
    }
}

/// `ceil(r * n)` as an integer count, robust to the float products that land
/// a hair above an integer (0.6 * 5 and friends).
pub fn ceil_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    if (x - x.round()).abs() < 1e-9 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

fn choose2(k: usize) -> usize {
    k * (k - 1) / 2
}

/// MAD-mode evidence: the compared quantile vs the cluster's own worst index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySummary {
    pub third_quartile_index: f64,
    pub in_cluster_max_index: f64,
    /// The row distances selected as this server's benign candidates.
    pub selected: Vec<f64>,
}

/// Per-server decision with the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerVerdict {
    pub server_id: u64,
    pub is_benign: bool,
    /// Best window p-value (KS mode).
    pub best_p_value: Option<f64>,
    /// Row window attaining the best p-value (KS mode).
    pub best_window: Option<WindowSelection>,
    /// MAD-mode evidence.
    pub anomaly: Option<AnomalySummary>,
}

/// Full detection output for one distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub matrix: DistanceMatrix,
    pub cluster: WindowSelection,
    pub verdicts: Vec<ServerVerdict>,
    /// True means benign, indexed like the matrix.
    pub ground_truth: Option<Vec<bool>>,
    pub accuracy: Option<f64>,
}

/// Computes all pairwise distances of one replicated sub-run with a shared
/// probe context. Signature-based metrics precompute one signature per model.
pub fn pairwise_distances(
    models: &[ModelWeights],
    metric: MetricKind,
    ctx: &ProbeContext,
    ridge_lambda: f64,
) -> Result<DistanceMatrix> {
    let n = models.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 models, got {n}")));
    }
    let arch = models[0].arch();
    for (i, m) in models.iter().enumerate() {
        if m.arch() != arch {
            return Err(Error::Pair {
                i: 0,
                j: i,
                source: Box::new(Error::invalid("architecture mismatch")),
            });
        }
    }

    let signatures: Option<Vec<ZestSignature>> = if metric == MetricKind::Zest {
        let sigs: Result<Vec<_>> = models
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                zest_signature(m, ctx, ridge_lambda).map_err(|e| Error::Pair {
                    i,
                    j: i,
                    source: Box::new(e),
                })
            })
            .collect();
        Some(sigs?)
    } else {
        None
    };

    let index_pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let pairs: Result<Vec<(usize, usize, f64)>> = index_pairs
        .par_iter()
        .map(|&(i, j)| {
            let d = match (&signatures, metric) {
                (Some(sigs), MetricKind::Zest) => crate::distance::zest_distance(&sigs[i], &sigs[j]),
                _ => crate::distance::model_distance(metric, &models[i], &models[j], ctx, ridge_lambda),
            };
            d.map(|d| (i, j, d)).map_err(|e| Error::Pair {
                i,
                j,
                source: Box::new(e),
            })
        })
        .collect();
    DistanceMatrix::from_pairs(n, metric, &pairs?)
}

/// The minimum-variance window of length `C(ceil(r*n), 2)` over the sorted
/// upper-triangle distances: the empirical benign-benign cluster.
pub fn find_benign_cluster(matrix: &DistanceMatrix, cfg: &DetectionConfig) -> Result<WindowSelection> {
    cfg.validate(matrix.n())?;
    let rn = ceil_count(cfg.benign_fraction_r, matrix.n());
    let window_len = choose2(rn);
    let total = choose2(matrix.n());
    if window_len == 0 {
        return Err(Error::invalid("r*n too small: benign cluster would be empty"));
    }
    if window_len > total {
        return Err(Error::invalid(format!(
            "benign cluster needs {window_len} distances, matrix has {total}"
        )));
    }
    let mut all = matrix.upper_triangle();
    all.sort_by(f64::total_cmp);
    min_variance_window(&all, window_len)
}

/// KS verdict for server `i`: slide windows of length `ceil(r*n)-1` over the
/// server's sorted distances; the server is benign iff any window's KS
/// p-value against the cluster reaches the significance level.
pub fn verdict_for_server(
    matrix: &DistanceMatrix,
    i: usize,
    cluster: &WindowSelection,
    cfg: &DetectionConfig,
) -> Result<ServerVerdict> {
    let rn = ceil_count(cfg.benign_fraction_r, matrix.n());
    let window_len = rn.saturating_sub(1);
    let mut row = matrix.row_distances(i);
    if window_len == 0 || window_len > row.len() {
        return Err(Error::invalid(format!(
            "row window length {window_len} invalid for {} distances",
            row.len()
        )));
    }
    row.sort_by(f64::total_cmp);
    let mut best_p = f64::NEG_INFINITY;
    let mut best_start = 0;
    for start in 0..=(row.len() - window_len) {
        let window = &row[start..start + window_len];
        let ks = ks_two_sample(&cluster.values, window)?;
        if ks.p_value > best_p {
            best_p = ks.p_value;
            best_start = start;
        }
    }
    let best_values = row[best_start..best_start + window_len].to_vec();
    Ok(ServerVerdict {
        server_id: i as u64,
        is_benign: best_p >= cfg.significance,
        best_p_value: Some(best_p),
        best_window: Some(WindowSelection {
            start_index: best_start,
            length: window_len,
            variance: crate::stats::sample_variance(&best_values),
            values: best_values,
        }),
        anomaly: None,
    })
}

/// MAD verdict for server `i`, intended for small fleets: take the
/// `ceil(r*n)-1` row distances closest to the cluster median, compute their
/// anomaly indexes w.r.t. the cluster, and call the server benign iff the
/// configured quantile of those indexes stays within the largest anomaly
/// index observed inside the cluster itself.
pub fn mad_verdict_for_server(
    matrix: &DistanceMatrix,
    i: usize,
    cluster: &WindowSelection,
    cfg: &DetectionConfig,
) -> Result<ServerVerdict> {
    let rn = ceil_count(cfg.benign_fraction_r, matrix.n());
    let take = rn.saturating_sub(1);
    let row = matrix.row_distances(i);
    if take == 0 || take > row.len() {
        return Err(Error::invalid(format!(
            "need {take} closest distances from a row of {}",
            row.len()
        )));
    }
    let center = median(&cluster.values)?;
    let mut by_closeness: Vec<f64> = row;
    by_closeness.sort_by(|a, b| {
        ((a - center).abs(), *a).partial_cmp(&((b - center).abs(), *b)).expect("finite distances")
    });
    let selected: Vec<f64> = by_closeness[..take].to_vec();

    let indexes: Vec<f64> = selected
        .iter()
        .map(|&d| anomaly_index(d, &cluster.values))
        .collect::<Result<_>>()?;
    let third_quartile_index = quantile(&indexes, cfg.mad_quartile)?;
    let in_cluster: Vec<f64> = cluster
        .values
        .iter()
        .map(|&d| anomaly_index(d, &cluster.values))
        .collect::<Result<_>>()?;
    let in_cluster_max_index = in_cluster.iter().cloned().fold(0.0, f64::max);

    Ok(ServerVerdict {
        server_id: i as u64,
        is_benign: third_quartile_index <= in_cluster_max_index,
        best_p_value: None,
        best_window: None,
        anomaly: Some(AnomalySummary {
            third_quartile_index,
            in_cluster_max_index,
            selected,
        }),
    })
}

/// One verdict per server via the configured rule, with accuracy against the
/// ground truth when provided.
pub fn detect_all(
    matrix: &DistanceMatrix,
    cfg: &DetectionConfig,
    ground_truth: Option<&[bool]>,
) -> Result<DetectionReport> {
    let cluster = find_benign_cluster(matrix, cfg)?;
    let mut verdicts = Vec::with_capacity(matrix.n());
    for i in 0..matrix.n() {
        let v = match cfg.fallback {
            FallbackRule::Ks => verdict_for_server(matrix, i, &cluster, cfg)?,
            FallbackRule::Mad => mad_verdict_for_server(matrix, i, &cluster, cfg)?,
        };
        verdicts.push(v);
    }
    let accuracy = ground_truth.map(|truth| {
        let hits = verdicts
            .iter()
            .zip(truth)
            .filter(|(v, &benign)| v.is_benign == benign)
            .count();
        hits as f64 / truth.len() as f64
    });
    if let Some(truth) = ground_truth {
        if truth.len() != matrix.n() {
            return Err(Error::invalid("ground truth length mismatch"));
        }
    }
    Ok(DetectionReport {
        matrix: matrix.clone(),
        cluster,
        verdicts,
        ground_truth: ground_truth.map(<[bool]>::to_vec),
        accuracy,
    })
}

/// Probability that replicating `m` sub-runs of length `k` catches a
/// single-step backdoor insertion within `T` total steps.
pub fn detection_probability(m: u64, k: u64, total_steps: u64) -> Result<f64> {
    if m == 0 || k == 0 || total_steps == 0 {
        return Err(Error::invalid("m, k, and T must be positive"));
    }
    let mk = m.checked_mul(k).ok_or_else(|| Error::invalid("m*k overflows"))?;
    if mk > total_steps {
        return Err(Error::invalid(format!("m*k = {mk} exceeds T = {total_steps}")));
    }
    Ok(mk as f64 / total_steps as f64)
}

/// Replication and distance-computation overhead, in training-step
/// equivalents, as a fraction of the full run, and optionally in money.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostOverhead {
    pub replication_steps: u64,
    pub distance_step_equivalents: f64,
    pub fraction_of_total: f64,
    pub money: Option<f64>,
}

/// `replication = m*k*(n-1)`; distance cost is `(D/3) * C(n,2) * m`
/// forward-pass equivalents for the output-based metrics and
/// `(1/3) * C(n,2) * m` for the parameter metric.
pub fn cost_overhead(
    n: u64,
    m: u64,
    k: u64,
    metric: MetricKind,
    probe_batches: u64,
    total_steps: u64,
    price_per_step: Option<f64>,
) -> Result<CostOverhead> {
    if n < 2 || m == 0 || k == 0 || total_steps == 0 {
        return Err(Error::invalid("need n >= 2 and positive m, k, T"));
    }
    if metric != MetricKind::Parameter && probe_batches == 0 {
        return Err(Error::invalid("output-based metrics need a positive probe batch count"));
    }
    let replication_steps = m * k * (n - 1);
    let pair_count = n * (n - 1) / 2;
    let distance_step_equivalents = match metric {
        MetricKind::Parameter => (pair_count * m) as f64 / 3.0,
        _ => (probe_batches * pair_count * m) as f64 / 3.0,
    };
    let total = replication_steps as f64 + distance_step_equivalents;
    Ok(CostOverhead {
        replication_steps,
        distance_step_equivalents,
        fraction_of_total: total / total_steps as f64,
        money: price_per_step.map(|p| total * p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_tiny_images;
    use crate::distance::ProbeSettings;
    use crate::nn::{init_weights, Activation, ModelArch};
    use crate::rng::{RngKey, Stream};

    fn matrix_from_upper(n: usize, metric: MetricKind, upper: &[f64]) -> DistanceMatrix {
        let mut pairs = Vec::new();
        let mut it = upper.iter();
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j, *it.next().unwrap()));
            }
        }
        DistanceMatrix::from_pairs(n, metric, &pairs).unwrap()
    }

    /// 4 servers: 0-2 tightly clustered, 3 far away everywhere.
    fn one_outlier_matrix() -> DistanceMatrix {
        // pairs (0,1) (0,2) (0,3) (1,2) (1,3) (2,3)
        matrix_from_upper(4, MetricKind::Zest, &[0.10, 0.11, 5.0, 0.105, 5.2, 5.1])
    }

    #[test]
    fn identical_models_give_zero_matrix_and_all_benign() {
        let (data, map) = make_tiny_images(50, 4, 8, 30).unwrap();
        let ctx = ProbeContext::from_dataset(&data, &map, &ProbeSettings::default(), 1).unwrap();
        let arch = ModelArch::new(64, vec![8], 4, Activation::Relu).unwrap();
        let w = init_weights(&arch, &RngKey::new(3, 1, 0, Stream::Init)).unwrap();
        let models = vec![w.clone(), w.clone(), w.clone(), w];
        let m = pairwise_distances(&models, MetricKind::Zest, &ctx, 1e-6).unwrap();
        assert!(m.upper_triangle().iter().all(|&d| d == 0.0));
        let report = detect_all(&m, &DetectionConfig::default(), None).unwrap();
        assert!(report.verdicts.iter().all(|v| v.is_benign));
        assert!(report.verdicts.iter().all(|v| v.best_p_value == Some(1.0)));
    }

    #[test]
    fn pairwise_needs_three_models_and_same_arch() {
        let (data, map) = make_tiny_images(51, 4, 8, 30).unwrap();
        let ctx = ProbeContext::from_dataset(&data, &map, &ProbeSettings::default(), 1).unwrap();
        let arch_a = ModelArch::new(64, vec![8], 4, Activation::Relu).unwrap();
        let arch_b = ModelArch::new(64, vec![9], 4, Activation::Relu).unwrap();
        let a = init_weights(&arch_a, &RngKey::new(4, 1, 0, Stream::Init)).unwrap();
        let b = init_weights(&arch_b, &RngKey::new(5, 1, 0, Stream::Init)).unwrap();
        assert!(pairwise_distances(&[a.clone(), a.clone()], MetricKind::Parameter, &ctx, 0.0).is_err());
        let err = pairwise_distances(&[a.clone(), a, b], MetricKind::Parameter, &ctx, 0.0).unwrap_err();
        assert!(matches!(err, Error::Pair { .. }));
    }

    #[test]
    fn permuting_models_permutes_matrix() {
        let m = one_outlier_matrix();
        let perm = [2usize, 0, 3, 1];
        let p = m.permuted(&perm).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(p.get(a, b), m.get(perm[a], perm[b]));
            }
        }
    }

    #[test]
    fn cluster_finds_planted_tight_window() {
        // 6 entries: exactly C(3,2)=3 at ~0.1, rest much larger.
        let m = one_outlier_matrix();
        let cfg = DetectionConfig {
            benign_fraction_r: 0.75,
            ..DetectionConfig::default()
        };
        let cluster = find_benign_cluster(&m, &cfg).unwrap();
        assert_eq!(cluster.values, vec![0.10, 0.105, 0.11]);
    }

    #[test]
    fn all_equal_entries_select_start() {
        let m = matrix_from_upper(4, MetricKind::Zest, &[0.5; 6]);
        let cluster = find_benign_cluster(&m, &DetectionConfig::default()).unwrap();
        assert_eq!(cluster.start_index, 0);
        assert_eq!(cluster.variance, 0.0);
    }

    #[test]
    fn cluster_rejects_undersized_r() {
        let m = one_outlier_matrix();
        let cfg = DetectionConfig {
            benign_fraction_r: 0.2, // ceil(0.8) = 1 -> window length 0
            ..DetectionConfig::default()
        };
        assert!(find_benign_cluster(&m, &cfg).is_err());
    }

    #[test]
    fn duplicate_row_is_benign_with_p_one() {
        // Row of server 0 duplicates cluster values exactly.
        let cfg = DetectionConfig {
            benign_fraction_r: 0.75,
            ..DetectionConfig::default()
        };
        let m = one_outlier_matrix();
        let cluster = find_benign_cluster(&m, &cfg).unwrap();
        // Server 0 row: 0.10, 0.11, 5.0; windows of len 2: KS against
        // {0.10, 0.105, 0.11}.
        let v = verdict_for_server(&m, 0, &cluster, &cfg).unwrap();
        assert!(v.is_benign);
        assert!(v.best_p_value.unwrap() >= cfg.significance);
        let w = v.best_window.unwrap();
        assert_eq!(w.values, vec![0.10, 0.11]);
    }

    #[test]
    fn dominating_row_flagged_at_default_sizes() {
        // 16 servers; server 15's distances all exceed 10x the cluster max
        // with zero overlap, everything else sits in [1.0, 1.1].
        let n = 16;
        let mut pairs = Vec::new();
        let mut v = 1.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = if i == 15 || j == 15 {
                    40.0 + v
                } else {
                    v = 1.0 + ((i * 31 + j * 17) % 100) as f64 / 1000.0;
                    v
                };
                pairs.push((i, j, d));
            }
        }
        let m = DistanceMatrix::from_pairs(n, MetricKind::Zest, &pairs).unwrap();
        let cfg = DetectionConfig::default();
        let report = detect_all(&m, &cfg, None).unwrap();
        assert!(!report.verdicts[15].is_benign);
        assert!(report.verdicts[15].best_p_value.unwrap() < cfg.significance);
    }

    #[test]
    fn verdicts_invariant_under_positive_scaling() {
        let m = one_outlier_matrix();
        let cfg = DetectionConfig {
            benign_fraction_r: 0.75,
            ..DetectionConfig::default()
        };
        let scaled_pairs: Vec<(usize, usize, f64)> = (0..4)
            .flat_map(|i| ((i + 1)..4).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, m.get(i, j) * 37.5))
            .collect();
        let scaled = DistanceMatrix::from_pairs(4, MetricKind::Zest, &scaled_pairs).unwrap();
        let a = detect_all(&m, &cfg, None).unwrap();
        let b = detect_all(&scaled, &cfg, None).unwrap();
        for (va, vb) in a.verdicts.iter().zip(&b.verdicts) {
            assert_eq!(va.is_benign, vb.is_benign);
            assert_eq!(va.best_p_value, vb.best_p_value);
        }
    }

    #[test]
    fn verdicts_invariant_under_relabeling() {
        let n = 6;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let benign = i < 4 && j < 4;
                let d = if benign {
                    0.2 + ((i + j) % 3) as f64 * 0.01
                } else {
                    3.0 + (i * j) as f64 * 0.1
                };
                pairs.push((i, j, d));
            }
        }
        let m = DistanceMatrix::from_pairs(n, MetricKind::Zest, &pairs).unwrap();
        let cfg = DetectionConfig {
            benign_fraction_r: 4.0 / 6.0,
            ..DetectionConfig::default()
        };
        let base = detect_all(&m, &cfg, None).unwrap();
        let perm = [5usize, 3, 0, 1, 4, 2];
        let permuted = detect_all(&m.permuted(&perm).unwrap(), &cfg, None).unwrap();
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert_eq!(
                permuted.verdicts[new_idx].is_benign,
                base.verdicts[old_idx].is_benign
            );
        }
    }

    #[test]
    fn mad_mode_accepts_cluster_rows_rejects_outliers() {
        let cfg = DetectionConfig {
            benign_fraction_r: 0.75,
            fallback: FallbackRule::Mad,
            ..DetectionConfig::default()
        };
        let m = one_outlier_matrix();
        let cluster = find_benign_cluster(&m, &cfg).unwrap();
        let benign = mad_verdict_for_server(&m, 0, &cluster, &cfg).unwrap();
        assert!(benign.is_benign);
        let malicious = mad_verdict_for_server(&m, 3, &cluster, &cfg).unwrap();
        assert!(!malicious.is_benign);
        assert!(malicious.anomaly.unwrap().third_quartile_index > 1.0);
    }

    #[test]
    fn mad_degenerate_cluster_uses_sentinel() {
        // Constant cluster: its own max anomaly index is 0; any off-median
        // row value maps to infinity and is flagged.
        let pairs = vec![
            (0usize, 1usize, 0.5),
            (0, 2, 0.5),
            (0, 3, 9.0),
            (1, 2, 0.5),
            (1, 3, 9.5),
            (2, 3, 10.0),
        ];
        let m = DistanceMatrix::from_pairs(4, MetricKind::Zest, &pairs).unwrap();
        let cfg = DetectionConfig {
            benign_fraction_r: 0.75,
            fallback: FallbackRule::Mad,
            ..DetectionConfig::default()
        };
        let cluster = find_benign_cluster(&m, &cfg).unwrap();
        assert_eq!(cluster.values, vec![0.5, 0.5, 0.5]);
        let ok = mad_verdict_for_server(&m, 0, &cluster, &cfg).unwrap();
        assert!(ok.is_benign);
        let bad = mad_verdict_for_server(&m, 3, &cluster, &cfg).unwrap();
        assert!(!bad.is_benign);
        assert_eq!(bad.anomaly.unwrap().third_quartile_index, f64::INFINITY);
    }

    #[test]
    fn detection_probability_formula() {
        assert_eq!(detection_probability(3, 2000, 90_000).unwrap(), 1.0 / 15.0);
        assert_eq!(detection_probability(5, 100, 500).unwrap(), 1.0);
        assert!(detection_probability(0, 10, 100).is_err());
        assert!(detection_probability(3, 50, 100).is_err());
    }

    #[test]
    fn cost_overhead_formulas() {
        let c = cost_overhead(16, 3, 2000, MetricKind::Zest, 30, 90_000, None).unwrap();
        assert_eq!(c.replication_steps, 90_000);
        assert_eq!(c.distance_step_equivalents, (30 * 120 * 3) as f64 / 3.0);

        let p = cost_overhead(4, 1, 10, MetricKind::Parameter, 0, 100, Some(1e-5)).unwrap();
        assert_eq!(p.distance_step_equivalents, 2.0);
        assert_eq!(p.replication_steps, 30);
        assert_eq!(p.money, Some((30.0 + 2.0) * 1e-5));

        let f = cost_overhead(2, 1, 2000, MetricKind::Parameter, 0, 90_000, None).unwrap();
        assert_eq!(f.replication_steps, 2000);
    }
}
