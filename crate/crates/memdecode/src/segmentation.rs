//! Sliding-window segmentation of clean traces with the trend and anomaly
//! quality filters and per-segment normalization.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::iforest;
use crate::preprocess::{zscore_columns, CleanTrace};
use crate::scalar::Scalar;
use crate::stats;

/// One fixed-length window cut from a trace.
#[derive(Debug, Clone)]
pub struct Segment<T: Scalar> {
    pub concept_id: String,
    pub day: u8,
    pub trace_id: String,
    /// Start sample index within the source trace.
    pub offset: usize,
    /// `[window, n_channels]`
    pub data: Array2<T>,
}

/// How many segments survived each stage of the quality pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub raw: usize,
    pub after_trend: usize,
    pub after_outlier: usize,
}

/// Segments of one trace plus their survival counts.
#[derive(Debug, Clone)]
pub struct SegmentSet<T: Scalar> {
    pub segments: Vec<Segment<T>>,
    pub provenance: Provenance,
}

/// Configuration of the segmentation pipeline.
#[derive(Debug, Clone)]
pub struct SegmentConfig {
    pub window: usize,
    pub stride: usize,
    pub trend_frac: f64,
    pub outlier_frac: f64,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    pub iforest_seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            window: 100,
            stride: 10,
            trend_frac: 0.05,
            outlier_frac: 0.05,
            iforest_trees: 100,
            iforest_subsample: 256,
            iforest_seed: 0,
        }
    }
}

/// Cuts windows at offsets 0, stride, 2*stride, ...;
/// count = floor((n - window)/stride) + 1.
pub fn slide_windows<T: Scalar>(
    clean: &CleanTrace<T>,
    window: usize,
    stride: usize,
) -> Result<SegmentSet<T>> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArg("window and stride must be positive".into()));
    }
    let n = clean.n_samples();
    if window > n {
        return Err(Error::Trace(format!(
            "trace of {n} samples shorter than window {window}"
        )));
    }
    let count = (n - window) / stride + 1;
    let trace_id = clean.trace_id();
    let mut segments = Vec::with_capacity(count);
    for i in 0..count {
        let offset = i * stride;
        let data = clean
            .samples
            .slice(ndarray::s![offset..offset + window, ..])
            .to_owned();
        segments.push(Segment {
            concept_id: clean.concept_id.clone(),
            day: clean.day,
            trace_id: trace_id.clone(),
            offset,
            data,
        });
    }
    Ok(SegmentSet {
        provenance: Provenance {
            raw: count,
            after_trend: count,
            after_outlier: count,
        },
        segments,
    })
}

/// Per channel, the absolute difference between the means of the second and
/// first half of the window; the segment score is the maximum over channels.
pub fn trend_score<T: Scalar>(segment: &Segment<T>) -> f64 {
    let w = segment.data.nrows();
    let half = w / 2;
    let mut max_trend = 0.0f64;
    for col in segment.data.axis_iter(Axis(1)) {
        let first: f64 = col.iter().take(half).map(|v| v.as_f64()).sum::<f64>() / half as f64;
        let second: f64 =
            col.iter().skip(half).map(|v| v.as_f64()).sum::<f64>() / (w - half) as f64;
        max_trend = max_trend.max((second - first).abs());
    }
    max_trend
}

/// Drops the floor(frac * n) highest-trend segments, ties broken by dropping
/// the lower offset first. Survivors keep their original order.
pub fn drop_trending<T: Scalar>(set: SegmentSet<T>, frac: f64) -> Result<SegmentSet<T>> {
    let scores: Vec<f64> = set.segments.iter().map(trend_score).collect();
    drop_top_scored(set, &scores, frac, DropStage::Trend)
}

/// Drops the floor(frac * n) most anomalous segments per the isolation
/// forest, using the per-channel standard deviation as the feature vector.
pub fn drop_anomalous<T: Scalar>(
    set: SegmentSet<T>,
    frac: f64,
    n_trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<SegmentSet<T>> {
    let n = set.segments.len();
    if n < 2 {
        // floor(frac * 1) = 0 for frac < 1: nothing can be dropped.
        let scores = vec![0.0; n];
        return drop_top_scored(set, &scores, frac, DropStage::Outlier);
    }
    let features: Vec<Vec<f64>> = set
        .segments
        .iter()
        .map(|s| channel_std_features(&s.data))
        .collect();
    let scores = iforest::iforest_fit_score(&features, n_trees, subsample, seed)?;
    drop_top_scored(set, &scores, frac, DropStage::Outlier)
}

/// Per-channel population standard deviation of a segment.
pub fn channel_std_features<T: Scalar>(data: &Array2<T>) -> Vec<f64> {
    data.axis_iter(Axis(1))
        .map(|col| {
            let values: Vec<T> = col.iter().copied().collect();
            stats::mean_pop_std(&values).1
        })
        .collect()
}

enum DropStage {
    Trend,
    Outlier,
}

fn drop_top_scored<T: Scalar>(
    mut set: SegmentSet<T>,
    scores: &[f64],
    frac: f64,
    stage: DropStage,
) -> Result<SegmentSet<T>> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::InvalidArg(format!(
            "drop fraction must be in [0, 1), got {frac}"
        )));
    }
    let n = set.segments.len();
    let n_drop = (frac * n as f64).floor() as usize;
    if n_drop > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("non-finite score")
                .then(set.segments[a].offset.cmp(&set.segments[b].offset))
        });
        let mut dropped = vec![false; n];
        for &i in order.iter().take(n_drop) {
            dropped[i] = true;
        }
        let mut kept = Vec::with_capacity(n - n_drop);
        for (i, seg) in set.segments.into_iter().enumerate() {
            if !dropped[i] {
                kept.push(seg);
            }
        }
        set.segments = kept;
    }
    match stage {
        DropStage::Trend => {
            set.provenance.after_trend = set.segments.len();
            set.provenance.after_outlier = set.segments.len();
        }
        DropStage::Outlier => set.provenance.after_outlier = set.segments.len(),
    }
    Ok(set)
}

/// Z-scores each channel of the segment independently (population std,
/// zero-variance guard at 1e-12).
pub fn zscore_segment<T: Scalar>(segment: &Segment<T>) -> Segment<T> {
    let mut out = segment.clone();
    zscore_columns(&mut out.data);
    out
}

/// slide -> drop_trending -> drop_anomalous -> zscore each survivor.
pub fn segment_pipeline<T: Scalar>(
    clean: &CleanTrace<T>,
    config: &SegmentConfig,
) -> Result<SegmentSet<T>> {
    let raw = slide_windows(clean, config.window, config.stride)?;
    let after_trend = drop_trending(raw, config.trend_frac)?;
    let mut after_outlier = drop_anomalous(
        after_trend,
        config.outlier_frac,
        config.iforest_trees,
        config.iforest_subsample,
        config.iforest_seed,
    )?;
    for seg in &mut after_outlier.segments {
        zscore_columns(&mut seg.data);
    }
    Ok(after_outlier)
}
