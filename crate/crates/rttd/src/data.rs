//! Seeded synthetic classification datasets with a segmentation scheme
//! usable by masked-surrogate signatures.
//!
//! Two families are provided: isotropic Gaussian blobs in feature space and
//! tiny grayscale grid "images" whose pixels carry class-specific blobs.
//! Everything is deterministic in its seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Fixed-dimension labeled classification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        if self.features.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                got: self.labels.len(),
            });
        }
        let dim = self.features[0].len();
        if let Some(bad) = self.features.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Total partition of feature indices into segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    dim: usize,
    num_segments: usize,
    segment_of: Vec<usize>,
}

impl SegmentMap {
    /// Builds a map from an explicit index -> segment assignment.
    pub fn from_assignment(segment_of: Vec<usize>, num_segments: usize) -> Result<Self> {
        if segment_of.is_empty() || num_segments == 0 {
            return Err(Error::EmptyInput("segment map"));
        }
        let mut seen = vec![false; num_segments];
        for &s in &segment_of {
            if s >= num_segments {
                return Err(Error::invalid(format!(
                    "segment id {s} out of range for {num_segments} segments"
                )));
            }
            seen[s] = true;
        }
        if !seen.iter().all(|&b| b) {
            return Err(Error::invalid("every segment must be non-empty"));
        }
        Ok(SegmentMap {
            dim: segment_of.len(),
            num_segments,
            segment_of,
        })
    }

    /// Partitions a `side x side` grid into a `grid x grid` block layout.
    pub fn grid(side: usize, grid: usize) -> Result<Self> {
        if side < grid || grid == 0 {
            return Err(Error::invalid(format!(
                "side {side} too small for a {grid}x{grid} block grid"
            )));
        }
        let mut segment_of = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                let br = row * grid / side;
                let bc = col * grid / side;
                segment_of.push(br * grid + bc);
            }
        }
        SegmentMap::from_assignment(segment_of, grid * grid)
    }

    /// Splits a flat feature vector into `num_segments` contiguous runs.
    pub fn contiguous(dim: usize, num_segments: usize) -> Result<Self> {
        if num_segments == 0 || num_segments > dim {
            return Err(Error::invalid(format!(
                "cannot split dim {dim} into {num_segments} non-empty segments"
            )));
        }
        let segment_of = (0..dim).map(|i| i * num_segments / dim).collect();
        SegmentMap::from_assignment(segment_of, num_segments)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_of(&self, index: usize) -> usize {
        self.segment_of[index]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.segment_of
    }

    pub fn indices_of(&self, segment: usize) -> Vec<usize> {
        (0..self.dim).filter(|&i| self.segment_of[i] == segment).collect()
    }
}

/// Class-conditional Gaussians around seeded random centers.
pub fn make_blobs(
    seed: u64,
    num_classes: usize,
    dim: usize,
    points_per_class: usize,
    spread: f64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim == 0 || points_per_class == 0 {
        return Err(Error::invalid("make_blobs parameters must be positive (num_classes >= 2)"));
    }
    if !(spread >= 0.0) {
        return Err(Error::invalid("spread must be nonnegative"));
    }
    let mut rng = seeded_rng(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(num_classes * points_per_class);
    let mut labels = Vec::with_capacity(num_classes * points_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..points_per_class {
            let point = center
                .iter()
                .map(|&c| c + spread * noise.sample(&mut rng))
                .collect();
            features.push(point);
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, num_classes)
}

/// Tiny grayscale images: a class-specific Gaussian bump plus pixel noise,
/// flattened row-major to `dim = side * side`. The companion [`SegmentMap`]
/// partitions the grid into 4x4 blocks.
pub fn make_tiny_images(
    seed: u64,
    num_classes: usize,
    side: usize,
    points_per_class: usize,
) -> Result<(LabeledDataset, SegmentMap)> {
    const BLOCK_GRID: usize = 4;
    if side < 4 {
        return Err(Error::invalid("side must be at least 4"));
    }
    if num_classes < 2 || points_per_class == 0 {
        return Err(Error::invalid("need num_classes >= 2 and points_per_class >= 1"));
    }
    let segments = SegmentMap::grid(side, BLOCK_GRID)?;
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    // Class bump centers sit on a circle so classes never collide, whatever
    // the seed; the seed drives per-sample amplitude and pixel noise. The
    // noise floor is deliberately high so training plateaus below perfect
    // accuracy and keeps a persistent stochastic gradient.
    let mid = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 3.2;
    let width = side as f64 / 5.0;
    let pixel_noise = 0.5;
    let centers: Vec<(f64, f64)> = (0..num_classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
            (mid + radius * angle.sin(), mid + radius * angle.cos())
        })
        .collect();

    let mut features = Vec::with_capacity(num_classes * points_per_class);
    let mut labels = Vec::with_capacity(num_classes * points_per_class);
    for (class, &(cr, cc)) in centers.iter().enumerate() {
        for _ in 0..points_per_class {
            let amplitude = rng.random_range(0.8..1.2);
            let mut img = Vec::with_capacity(side * side);
            for row in 0..side {
                for col in 0..side {
                    let dr = row as f64 - cr;
                    let dc = col as f64 - cc;
                    let bump = amplitude * (-(dr * dr + dc * dc) / (2.0 * width * width)).exp();
                    img.push(bump + pixel_noise * noise.sample(&mut rng));
                }
            }
            features.push(img);
            labels.push(class);
        }
    }
    let dataset = LabeledDataset::new(features, labels, num_classes)?;
    Ok((dataset, segments))
}

/// Seeded shuffle split into `(train, test)`; `fraction` is the train share.
pub fn split(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("split fraction must lie in (0,1)"));
    }
    let n = dataset.len();
    let train_n = (fraction * n as f64).round() as usize;
    if train_n == 0 || train_n == n {
        return Err(Error::invalid(format!(
            "split of {n} points at fraction {fraction} leaves one side empty"
        )));
    }
    let mut rng = seeded_rng(seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    let take = |idx: &[usize]| -> LabeledDataset {
        LabeledDataset {
            features: idx.iter().map(|&i| dataset.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
            num_classes: dataset.num_classes,
        }
    };
    Ok((take(&order[..train_n]), take(&order[train_n..])))
}

const DATASET_HEADER: &str = "rttd dataset v1";

/// Writes a dataset (and optional segment map) as structured text.
pub fn dump_dataset(dataset: &LabeledDataset, segments: Option<&SegmentMap>, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_HEADER}");
    let _ = writeln!(out, "num_classes {}", dataset.num_classes);
    let _ = writeln!(out, "dim {}", dataset.dim());
    match segments {
        Some(map) => {
            if map.dim() != dataset.dim() {
                return Err(Error::DimensionMismatch {
                    expected: dataset.dim(),
                    got: map.dim(),
                });
            }
            let _ = writeln!(out, "segments {}", map.num_segments());
            let ids: Vec<String> = map.assignment().iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "{}", ids.join(" "));
        }
        None => {
            let _ = writeln!(out, "segments 0");
        }
    }
    let _ = writeln!(out, "points {}", dataset.len());
    for (feat, &label) in dataset.features.iter().zip(&dataset.labels) {
        let _ = write!(out, "{label}");
        for v in feat {
            let _ = write!(out, " {}", crate::nn::checkpoint::format_value(*v));
        }
        let _ = writeln!(out);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads back a dataset written by [`dump_dataset`].
pub fn load_dataset(path: &Path) -> Result<(LabeledDataset, Option<SegmentMap>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, &str)> {
        lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing {what}"),
            })
    };
    let (line, header) = next("header")?;
    if header.trim() != DATASET_HEADER {
        return Err(Error::Parse {
            line,
            msg: format!("expected `{DATASET_HEADER}`"),
        });
    }
    let field = |(line, l): (usize, &str), key: &str| -> Result<String> {
        let mut parts = l.splitn(2, ' ');
        let k = parts.next().unwrap_or("");
        if k != key {
            return Err(Error::Parse {
                line,
                msg: format!("expected field `{key}`, found `{k}`"),
            });
        }
        Ok(parts.next().unwrap_or("").trim().to_string())
    };
    let parse = |line: usize, s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid integer `{s}`"),
        })
    };
    let l = next("num_classes")?;
    let num_classes = parse(l.0, &field(l, "num_classes")?)?;
    let l = next("dim")?;
    let dim = parse(l.0, &field(l, "dim")?)?;
    let l = next("segments")?;
    let num_segments = parse(l.0, &field(l, "segments")?)?;
    let segments = if num_segments > 0 {
        let (line, ids) = next("segment assignment")?;
        let assignment: Vec<usize> = ids
            .split_whitespace()
            .map(|s| parse(line, s))
            .collect::<Result<_>>()?;
        if assignment.len() != dim {
            return Err(Error::Parse {
                line,
                msg: format!("segment assignment has {} entries, dim is {dim}", assignment.len()),
            });
        }
        Some(SegmentMap::from_assignment(assignment, num_segments)?)
    } else {
        None
    };
    let l = next("points")?;
    let count = parse(l.0, &field(l, "points")?)?;
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, row) = next("data point")?;
        let mut parts = row.split_whitespace();
        let label = parse(line, parts.next().unwrap_or(""))?;
        let feat: Vec<f64> = parts
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("invalid value `{s}`"),
                })
            })
            .collect::<Result<_>>()?;
        if feat.len() != dim {
            return Err(Error::Parse {
                line,
                msg: format!("point has {} values, dim is {dim}", feat.len()),
            });
        }
        features.push(feat);
        labels.push(label);
    }
    Ok((LabeledDataset::new(features, labels, num_classes)?, segments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_deterministic_and_counted() {
        let a = make_blobs(9, 3, 5, 10, 0.3).unwrap();
        let b = make_blobs(9, 3, 5, 10, 0.3).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        let c = make_blobs(10, 3, 5, 10, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_images_shapes() {
        let (ds, map) = make_tiny_images(3, 4, 8, 6).unwrap();
        assert_eq!(ds.dim(), 64);
        assert_eq!(map.num_segments(), 16);
        for s in 0..16 {
            assert_eq!(map.indices_of(s).len(), 4);
        }
        // Every pixel in exactly one segment is implied by the assignment
        // being a total function; check coverage explicitly anyway.
        let mut counts = vec![0usize; 16];
        for i in 0..64 {
            counts[map.segment_of(i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn grid_map_rejects_small_side() {
        assert!(SegmentMap::grid(3, 4).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let ds = make_blobs(1, 2, 3, 50, 0.5).unwrap();
        let (tr, te) = split(&ds, 0.5, 11).unwrap();
        assert_eq!(tr.len(), 50);
        assert_eq!(te.len(), 50);
        let (tr2, te2) = split(&ds, 0.5, 11).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);

        // Union equals the original multiset of (feature, label) pairs.
        let mut all: Vec<(Vec<u64>, usize)> = tr
            .features
            .iter()
            .zip(&tr.labels)
            .chain(te.features.iter().zip(&te.labels))
            .map(|(f, &l)| (f.iter().map(|v| v.to_bits()).collect(), l))
            .collect();
        let mut orig: Vec<(Vec<u64>, usize)> = ds
            .features
            .iter()
            .zip(&ds.labels)
            .map(|(f, &l)| (f.iter().map(|v| v.to_bits()).collect(), l))
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_degenerate() {
        let ds = make_blobs(1, 2, 3, 2, 0.5).unwrap();
        assert!(split(&ds, 0.05, 1).is_err());
        assert!(split(&ds, 1.5, 1).is_err());
    }

    #[test]
    fn dataset_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        let (ds, map) = make_tiny_images(5, 3, 4, 2).unwrap();
        dump_dataset(&ds, Some(&map), &path).unwrap();
        let (ds2, map2) = load_dataset(&path).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(Some(map), map2);
    }
}
