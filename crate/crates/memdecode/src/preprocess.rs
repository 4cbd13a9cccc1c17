//! The five-step trace preprocessing chain (clip, occipital re-reference,
//! FIR band-pass, per-channel z-score, edge trim) plus the channel/band
//! restrictions used by ablation studies.

use ndarray::{Array2, Axis};

use crate::dataset::{occipital_reference, ChannelSet, RawTrace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats;

/// A named frequency band in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

pub const BAND_NAMES: [&str; 6] = ["delta", "theta", "alpha", "beta", "gamma", "broadband"];

impl BandSpec {
    pub fn new(name: impl Into<String>, low_hz: f64, high_hz: f64) -> Result<Self> {
        if !(low_hz > 0.0 && low_hz < high_hz) {
            return Err(Error::InvalidArg(format!(
                "band must satisfy 0 < low < high, got {low_hz}..{high_hz}"
            )));
        }
        Ok(Self {
            name: name.into(),
            low_hz,
            high_hz,
        })
    }

    /// The standard EEG bands; `broadband` spans 1-100 Hz.
    pub fn named(name: &str) -> Result<Self> {
        let (low, high) = match name {
            "delta" => (1.0, 3.0),
            "theta" => (4.0, 7.0),
            "alpha" => (8.0, 12.0),
            "beta" => (13.0, 30.0),
            "gamma" => (30.0, 100.0),
            "broadband" => (1.0, 100.0),
            _ => {
                return Err(Error::InvalidArg(format!(
                    "unknown band {name:?}; expected one of {BAND_NAMES:?}"
                )))
            }
        };
        Self::new(name, low, high)
    }

    /// Upper cutoff after clamping against the sampling rate
    /// (min(high, 0.45 * rate)).
    pub fn effective_high(&self, sample_rate_hz: f64) -> f64 {
        self.high_hz.min(0.45 * sample_rate_hz)
    }
}

/// A preprocessed trace: 14 channels after re-referencing, normalized and
/// trimmed, with the applied step names recorded.
#[derive(Debug, Clone)]
pub struct CleanTrace<T: Scalar> {
    pub concept_id: String,
    pub day: u8,
    pub sample_rate_hz: f64,
    pub channels: ChannelSet,
    /// `[n_samples, n_channels]`
    pub samples: Array2<T>,
    pub steps_applied: Vec<String>,
}

impl<T: Scalar> CleanTrace<T> {
    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn trace_id(&self) -> String {
        format!("{}_d{}", self.concept_id, self.day)
    }
}

/// The canonical step sequence recorded in `steps_applied`.
pub const STEP_NAMES: [&str; 5] = ["clip", "rereference", "bandpass", "zscore", "trim"];

/// Configuration of the preprocessing chain.
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub band: BandSpec,
    pub n_taps: usize,
    pub trim_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo: 0.005,
            clip_hi: 0.995,
            band: BandSpec::named("broadband").unwrap(),
            n_taps: 501,
            trim_seconds: 4.0,
        }
    }
}

/// Replaces values outside the pooled `[lo, hi]` quantile range by the
/// range limits. Quantiles are computed over all samples of the trace as
/// a whole. The limits are the floor (lo) and ceil (hi) order statistics
/// at position `q * (n - 1)`, which makes clipping exactly idempotent;
/// an interpolated limit would drift inward on reapplication.
pub fn clip_quantiles<T: Scalar>(trace: &RawTrace<T>, lo: f64, hi: f64) -> Result<RawTrace<T>> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::InvalidArg(format!(
            "quantiles must satisfy 0 <= lo < hi <= 1, got {lo}, {hi}"
        )));
    }
    if trace.samples.is_empty() {
        return Err(Error::Trace("cannot clip an empty trace".into()));
    }
    let mut pooled: Vec<T> = trace.samples.iter().copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let n = pooled.len();
    let q_lo = pooled[(lo * (n - 1) as f64).floor() as usize];
    let q_hi = pooled[(hi * (n - 1) as f64).ceil() as usize];
    let mut out = trace.clone();
    out.samples.mapv_inplace(|v| {
        if v < q_lo {
            q_lo
        } else if v > q_hi {
            q_hi
        } else {
            v
        }
    });
    Ok(out)
}

/// Subtracts the ipsilateral occipital channel from every scalp channel and
/// removes O1/O2, leaving 14 channels.
pub fn rereference_occipital<T: Scalar>(trace: &RawTrace<T>) -> Result<RawTrace<T>> {
    let o1 = trace
        .channels
        .index_of("O1")
        .ok_or_else(|| Error::Trace("missing occipital channel O1".into()))?;
    let o2 = trace
        .channels
        .index_of("O2")
        .ok_or_else(|| Error::Trace("missing occipital channel O2".into()))?;
    let mut kept_labels = Vec::new();
    let mut kept_cols = Vec::new();
    for (i, label) in trace.channels.labels().iter().enumerate() {
        if label == "O1" || label == "O2" {
            continue;
        }
        let reference = occipital_reference(label).ok_or_else(|| {
            Error::Trace(format!("channel {label} has no ipsilateral occipital pairing"))
        })?;
        kept_labels.push(label.clone());
        kept_cols.push((i, if reference == "O1" { o1 } else { o2 }));
    }
    let n = trace.n_samples();
    let mut samples = Array2::<T>::zeros((n, kept_cols.len()));
    for (out_c, &(src_c, ref_c)) in kept_cols.iter().enumerate() {
        for t in 0..n {
            samples[[t, out_c]] = trace.samples[[t, src_c]] - trace.samples[[t, ref_c]];
        }
    }
    Ok(RawTrace {
        concept_id: trace.concept_id.clone(),
        day: trace.day,
        sample_rate_hz: trace.sample_rate_hz,
        channels: ChannelSet::new(kept_labels)?,
        samples,
    })
}

/// Designs linear-phase windowed-sinc band-pass taps as the difference of
/// two Hamming-windowed low-pass kernels. Taps sum to 0 (DC rejected).
pub fn design_fir_bandpass(
    low_hz: f64,
    high_hz: f64,
    sample_rate_hz: f64,
    n_taps: usize,
) -> Result<Vec<f64>> {
    if n_taps % 2 == 0 || n_taps < 3 {
        return Err(Error::InvalidArg(format!(
            "n_taps must be odd and >= 3, got {n_taps}"
        )));
    }
    let high_eff = high_hz.min(0.45 * sample_rate_hz);
    if !(low_hz > 0.0 && low_hz < high_eff) {
        return Err(Error::InvalidArg(format!(
            "cutoffs invalid after Nyquist clamp: low {low_hz} must be < effective high {high_eff}"
        )));
    }
    let lp_high = windowed_sinc_lowpass(high_eff / sample_rate_hz, n_taps);
    let lp_low = windowed_sinc_lowpass(low_hz / sample_rate_hz, n_taps);
    Ok(lp_high
        .iter()
        .zip(&lp_low)
        .map(|(h, l)| h - l)
        .collect())
}

/// Hamming-windowed sinc low-pass kernel, normalized to unit DC gain.
fn windowed_sinc_lowpass(cutoff: f64, n_taps: usize) -> Vec<f64> {
    let mid = (n_taps - 1) as f64 / 2.0;
    let omega = 2.0 * std::f64::consts::PI * cutoff;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let x = i as f64 - mid;
            let sinc = if x == 0.0 {
                omega / std::f64::consts::PI
            } else {
                (omega * x).sin() / (std::f64::consts::PI * x)
            };
            let window = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n_taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Magnitude of the taps' discrete-time Fourier transform at `freq_hz`.
pub fn fir_response(taps: &[f64], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for (n, &h) in taps.iter().enumerate() {
        re += h * (omega * n as f64).cos();
        im -= h * (omega * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// Per-channel FIR filtering with the group delay compensated, so the output
/// is aligned to the input and has the same length.
pub fn bandpass_fir<T: Scalar>(
    trace: &RawTrace<T>,
    band: &BandSpec,
    n_taps: usize,
) -> Result<RawTrace<T>> {
    if trace.n_samples() <= n_taps {
        return Err(Error::Trace(format!(
            "trace ({} samples) must be longer than the filter ({n_taps} taps)",
            trace.n_samples()
        )));
    }
    let taps = design_fir_bandpass(
        band.low_hz,
        band.high_hz,
        trace.sample_rate_hz,
        n_taps,
    )?;
    let filtered = apply_fir_same(&trace.samples, &taps);
    Ok(RawTrace {
        concept_id: trace.concept_id.clone(),
        day: trace.day,
        sample_rate_hz: trace.sample_rate_hz,
        channels: trace.channels.clone(),
        samples: filtered,
    })
}

/// Applies symmetric FIR taps to each column with zero padding and the
/// (n_taps - 1)/2 group delay removed.
fn apply_fir_same<T: Scalar>(samples: &Array2<T>, taps: &[f64]) -> Array2<T> {
    let n = samples.nrows();
    let n_ch = samples.ncols();
    let n_taps = taps.len();
    let half = (n_taps - 1) / 2;
    let mut out = Array2::<T>::zeros((n, n_ch));
    let mut padded = vec![0.0f64; n + 2 * half];
    for c in 0..n_ch {
        for t in 0..n {
            padded[half + t] = samples[[t, c]].as_f64();
        }
        for t in 0..n {
            // Symmetric taps make convolution equal to correlation, so the
            // delay-compensated output is a sliding dot product.
            out[[t, c]] = T::of_f64(stats::dot_f64(&padded[t..t + n_taps], taps));
        }
    }
    out
}

/// Z-scores each channel independently using the population standard
/// deviation; channels with std below 1e-12 become all zeros.
pub fn zscore_channels<T: Scalar>(trace: &RawTrace<T>) -> Result<RawTrace<T>> {
    let mut out = trace.clone();
    zscore_columns(&mut out.samples);
    Ok(out)
}

pub(crate) fn zscore_columns<T: Scalar>(samples: &mut Array2<T>) {
    for mut col in samples.axis_iter_mut(Axis(1)) {
        let values: Vec<T> = col.iter().copied().collect();
        let (mean, std) = stats::mean_pop_std(&values);
        if std < 1e-12 {
            col.fill(T::zero());
        } else {
            for v in col.iter_mut() {
                *v = T::of_f64((v.as_f64() - mean) / std);
            }
        }
    }
}

/// Removes `seconds` of samples from each end of the trace.
pub fn trim_edges<T: Scalar>(trace: &RawTrace<T>, seconds: f64) -> Result<RawTrace<T>> {
    if seconds < 0.0 {
        return Err(Error::InvalidArg("trim seconds must be nonnegative".into()));
    }
    let k = (seconds * trace.sample_rate_hz).round() as usize;
    let n = trace.n_samples();
    if n <= 2 * k {
        return Err(Error::Trace(format!(
            "trace of {n} samples too short to trim {k} from each end"
        )));
    }
    let mut out = trace.clone();
    out.samples = trace
        .samples
        .slice(ndarray::s![k..n - k, ..])
        .to_owned();
    Ok(out)
}

/// Runs the full chain clip -> rereference -> bandpass -> zscore -> trim.
pub fn preprocess<T: Scalar>(
    raw: &RawTrace<T>,
    config: &PreprocessConfig,
) -> Result<CleanTrace<T>> {
    let clipped = clip_quantiles(raw, config.clip_lo, config.clip_hi)?;
    let rereferenced = rereference_occipital(&clipped)?;
    let filtered = bandpass_fir(&rereferenced, &config.band, config.n_taps)?;
    let normalized = zscore_channels(&filtered)?;
    let trimmed = trim_edges(&normalized, config.trim_seconds)?;
    Ok(CleanTrace {
        concept_id: trimmed.concept_id,
        day: trimmed.day,
        sample_rate_hz: trimmed.sample_rate_hz,
        channels: trimmed.channels,
        samples: trimmed.samples,
        steps_applied: STEP_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Keeps only the listed channels, preserving the trace's channel order.
pub fn restrict_channels<T: Scalar>(
    clean: &CleanTrace<T>,
    subset: &[String],
) -> Result<CleanTrace<T>> {
    if subset.is_empty() {
        return Err(Error::InvalidArg("channel subset must not be empty".into()));
    }
    for label in subset {
        if !clean.channels.contains(label) {
            return Err(Error::InvalidArg(format!(
                "unknown channel label {label:?} (available: {:?})",
                clean.channels.labels()
            )));
        }
    }
    let kept: Vec<(usize, String)> = clean
        .channels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| subset.contains(l))
        .map(|(i, l)| (i, l.clone()))
        .collect();
    let n = clean.n_samples();
    let mut samples = Array2::<T>::zeros((n, kept.len()));
    for (out_c, (src_c, _)) in kept.iter().enumerate() {
        for t in 0..n {
            samples[[t, out_c]] = clean.samples[[t, *src_c]];
        }
    }
    Ok(CleanTrace {
        concept_id: clean.concept_id.clone(),
        day: clean.day,
        sample_rate_hz: clean.sample_rate_hz,
        channels: ChannelSet::new(kept.into_iter().map(|(_, l)| l))?,
        samples,
        steps_applied: clean.steps_applied.clone(),
    })
}
