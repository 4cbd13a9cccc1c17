//! The segment encoder and its training: architecture assembly, the
//! supervised contrastive loss and its variant, on-the-fly batch
//! generation, and the rmsprop training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neuralcore::modelio::{self, ModelMeta};
use crate::neuralcore::net::{Cache, FastNet, LayerSpec, Network, Tensor};
use crate::neuralcore::optim::RmsProp;
use crate::scalar::Scalar;
use crate::stats::derive_seed;

/// Length of the encoder's embedding vector.
pub const EMBED_DIM: usize = 32;

/// Encoder parameter total for the 14-channel input.
pub const ENCODER_PARAMS_14CH: usize = 655_136;

/// The segment encoder stack: four conv/pool blocks of 256 filters of size
/// 3, global max pooling down to a 256-vector, then dense 128-128-32.
/// Sequence lengths run 100 -> 50 -> 25 -> 12 -> 1 for the standard window.
pub fn encoder_specs(n_channels: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv1d {
            in_ch: n_channels,
            kernel: 3,
            out_ch: 256,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Conv1d {
            in_ch: 256,
            kernel: 3,
            out_ch: 256,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Conv1d {
            in_ch: 256,
            kernel: 3,
            out_ch: 256,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Conv1d {
            in_ch: 256,
            kernel: 3,
            out_ch: 256,
        },
        LayerSpec::Relu,
        LayerSpec::GlobalMaxPool,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 256,
            outputs: 128,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 128,
            outputs: 128,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 128,
            outputs: EMBED_DIM,
        },
    ]
}

/// The projection head used only during training: two 64-unit layers with
/// an L2-normalized output feeding the contrastive loss.
pub fn projection_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense {
            inputs: EMBED_DIM,
            outputs: 64,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 64,
            outputs: 64,
        },
        LayerSpec::L2Norm,
    ]
}

/// A trained (or freshly initialized) segment encoder.
#[derive(Debug)]
pub struct EncoderModel<T: Scalar> {
    pub net: Network<T>,
    pub n_channels: usize,
    pub seed: u64,
    compiled: OnceLock<FastNet>,
}

impl<T: Scalar> Clone for EncoderModel<T> {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            n_channels: self.n_channels,
            seed: self.seed,
            compiled: OnceLock::new(),
        }
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// The standard 14-channel encoder. The parameter count is a structural
    /// constant and is asserted at build time.
    pub fn build(seed: u64) -> Self {
        let model = Self::build_for_channels(14, seed);
        assert_eq!(
            model.param_count(),
            ENCODER_PARAMS_14CH,
            "14-channel encoder must have exactly {ENCODER_PARAMS_14CH} parameters"
        );
        model
    }

    /// Encoder over a restricted channel set (ablation studies).
    pub fn build_for_channels(n_channels: usize, seed: u64) -> Self {
        let net = Network::new(encoder_specs(n_channels), seed);
        Self {
            net,
            n_channels,
            seed,
            compiled: OnceLock::new(),
        }
    }

    fn from_net(net: Network<T>, n_channels: usize, seed: u64) -> Self {
        Self {
            net,
            n_channels,
            seed,
            compiled: OnceLock::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn fast(&self) -> &FastNet {
        self.compiled.get_or_init(|| self.net.compile())
    }

    fn to_input(&self, segment: &ArrayView2<T>) -> Result<Tensor> {
        if segment.ncols() != self.n_channels {
            return Err(Error::Shape(format!(
                "segment has {} channels, encoder expects {}",
                segment.ncols(),
                self.n_channels
            )));
        }
        let data: Vec<f64> = segment.iter().map(|v| v.as_f64()).collect();
        Ok(Tensor::seq(segment.nrows(), segment.ncols(), data))
    }

    /// Deterministic forward pass of one segment to its 32-dim embedding.
    /// The output is intentionally not L2-normalized.
    pub fn encode(&self, segment: &ArrayView2<T>) -> Result<Vec<T>> {
        let out = self.fast().forward(&self.to_input(segment)?)?;
        Ok(out.values().iter().map(|&v| T::of_f64(v)).collect())
    }

    /// Encodes many segments in parallel; row i is the embedding of
    /// segment i.
    pub fn encode_batch(&self, segments: &[ArrayView2<T>]) -> Result<Array2<T>> {
        let fast = self.fast();
        let inputs: Vec<Tensor> = segments
            .iter()
            .map(|s| self.to_input(s))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|t| fast.forward(t).map(|out| out.values().to_vec()))
            .collect::<Result<_>>()?;
        let mut out = Array2::<T>::zeros((segments.len(), EMBED_DIM));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != EMBED_DIM {
                return Err(Error::Shape("unexpected embedding length".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite embedding for segment {i}"
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = T::of_f64(v);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = ModelMeta::new();
        meta.insert("kind".into(), "segment-encoder".into());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("n_channels".into(), self.n_channels.to_string());
        modelio::save_network(&self.net, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = modelio::load_network::<T>(path)?;
        let n_channels = match net.specs.first() {
            Some(LayerSpec::Conv1d { in_ch, .. }) => *in_ch,
            _ => return Err(Error::ModelFile("model does not start with conv1d".into())),
        };
        let seed = meta
            .get("seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or_default();
        Ok(Self::from_net(net, n_channels, seed))
    }
}

/// Which index sets the contrastive loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// A(i) and P(i) both include i itself.
    Variant,
    /// A(i) and P(i) exclude i (the original definition).
    Standard,
}

/// Supervised contrastive loss over a batch of unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct SupConLoss {
    pub temperature: f64,
    pub mode: LossMode,
}

impl SupConLoss {
    pub fn new(temperature: f64, mode: LossMode) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature, mode })
    }

    /// Evaluates the loss and its gradient with respect to every embedding.
    ///
    /// L = sum_i (-1/|P(i)|) sum_{p in P(i)}
    ///       log( exp(z_i.z_p / tau) / sum_{a in A(i)} exp(z_i.z_a / tau) ),
    /// stabilized by subtracting each row's max logit.
    pub fn eval(&self, z: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
        let n = z.nrows();
        let d = z.ncols();
        if n < 2 {
            return Err(Error::InvalidArg(
                "contrastive loss needs at least 2 embeddings".into(),
            ));
        }
        if labels.len() != n {
            return Err(Error::Shape("one label per embedding required".into()));
        }
        for i in 0..n {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-2 {
                return Err(Error::InvalidArg(format!(
                    "embedding {i} is not unit-norm (|z| = {norm:.6})"
                )));
            }
        }
        let include_self = self.mode == LossMode::Variant;

        // logits[i, a] = z_i . z_a / tau
        let zs = z.as_standard_layout();
        let zv = zs.as_slice().expect("standard layout");
        let mut logits = vec![0.0f64; n * n];
        for i in 0..n {
            let zi = &zv[i * d..(i + 1) * d];
            for a in i..n {
                let za = &zv[a * d..(a + 1) * d];
                let dot: f64 = zi.iter().zip(za).map(|(x, y)| x * y).sum();
                let s = dot / self.temperature;
                logits[i * n + a] = s;
                logits[a * n + i] = s;
            }
        }

        let mut loss = 0.0f64;
        let mut grad_logits = vec![0.0f64; n * n];
        for i in 0..n {
            let row = &logits[i * n..(i + 1) * n];
            let in_a = |a: usize| include_self || a != i;
            let positives: Vec<usize> = (0..n)
                .filter(|&p| in_a(p) && labels[p] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let m = (0..n)
                .filter(|&a| in_a(a))
                .map(|a| row[a])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n)
                .filter(|&a| in_a(a))
                .map(|a| (row[a] - m).exp())
                .sum();
            let lse = m + denom.ln();
            let inv_p = 1.0 / positives.len() as f64;
            for &p in &positives {
                loss -= inv_p * (row[p] - lse);
            }
            let g = &mut grad_logits[i * n..(i + 1) * n];
            for a in (0..n).filter(|&a| in_a(a)) {
                g[a] = (row[a] - m).exp() / denom;
            }
            for &p in &positives {
                g[p] -= inv_p;
            }
        }

        // chain rule through logits[i, a] = z_i . z_a / tau
        let mut dz = Array2::<f64>::zeros((n, d));
        {
            let dzv = dz.as_slice_mut().expect("standard layout");
            for i in 0..n {
                for a in 0..n {
                    let g = grad_logits[i * n + a] / self.temperature;
                    if g == 0.0 {
                        continue;
                    }
                    let zi = &zv[i * d..(i + 1) * d];
                    let za = &zv[a * d..(a + 1) * d];
                    for j in 0..d {
                        dzv[i * d + j] += g * za[j];
                        dzv[a * d + j] += g * zi[j];
                    }
                }
            }
        }
        Ok((loss, dz))
    }
}

/// Training segments grouped by concept, in sorted concept order.
pub struct SegmentPool<'a, T: Scalar> {
    concepts: Vec<String>,
    segments: Vec<Vec<&'a Array2<T>>>,
}

impl<'a, T: Scalar> SegmentPool<'a, T> {
    pub fn from_groups(groups: BTreeMap<String, Vec<&'a Array2<T>>>) -> Self {
        let mut concepts = Vec::with_capacity(groups.len());
        let mut segments = Vec::with_capacity(groups.len());
        for (concept, segs) in groups {
            concepts.push(concept);
            segments.push(segs);
        }
        Self { concepts, segments }
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn segments_of(&self, concept_idx: usize) -> &[&'a Array2<T>] {
        &self.segments[concept_idx]
    }

    /// Keeps only the first `cap` segments of every concept.
    pub fn cap_per_concept(&mut self, cap: usize) {
        for segs in &mut self.segments {
            segs.truncate(cap);
        }
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if self.concepts.is_empty() {
            return Err(Error::Training("training pool has no concepts".into()));
        }
        let first = self
            .segments
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Training("training pool has no segments".into()))?;
        let shape = (first.nrows(), first.ncols());
        for (c, segs) in self.segments.iter().enumerate() {
            if segs.is_empty() {
                return Err(Error::Training(format!(
                    "concept {} has no training segments",
                    self.concepts[c]
                )));
            }
            for s in segs {
                if (s.nrows(), s.ncols()) != shape {
                    return Err(Error::Shape(
                        "all pool segments must share one window/channel shape".into(),
                    ));
                }
            }
        }
        Ok(shape)
    }
}

/// Training hyperparameters (defaults follow the reference regimen).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub per_concept: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub noise_variance: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_concept: 8,
            epochs: 8,
            steps_per_epoch: 500,
            noise_variance: 0.1,
            temperature: 0.1,
            learning_rate: 0.001,
            decay: 0.9,
            epsilon: 1e-7,
            seed: 0,
            loss_mode: LossMode::Variant,
        }
    }
}

/// Loss per training step.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<f64>,
}

impl TrainReport {
    pub fn epoch_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.curve
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

const BATCH_RNG_SALT: u64 = 0xBA7C4;

/// Samples `per_concept` segments per concept (without replacement when the
/// pool allows it) and adds zero-centered Gaussian noise of the configured
/// variance. Labels are concept indices in pool order.
pub fn make_batch<T: Scalar>(
    pool: &SegmentPool<'_, T>,
    per_concept: usize,
    noise_variance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if per_concept == 0 {
        return Err(Error::InvalidArg("per_concept must be positive".into()));
    }
    if noise_variance < 0.0 {
        return Err(Error::InvalidArg("noise variance must be nonnegative".into()));
    }
    let (window, ch) = pool.validate()?;
    let noise = if noise_variance > 0.0 {
        Some(Normal::new(0.0, noise_variance.sqrt()).expect("valid std"))
    } else {
        None
    };
    let mut batch = Vec::with_capacity(per_concept * pool.n_concepts());
    let mut labels = Vec::with_capacity(per_concept * pool.n_concepts());
    for c in 0..pool.n_concepts() {
        let segs = pool.segments_of(c);
        let picks: Vec<usize> = if segs.len() >= per_concept {
            rand::seq::index::sample(rng, segs.len(), per_concept).into_vec()
        } else {
            (0..per_concept).map(|_| rng.gen_range(0..segs.len())).collect()
        };
        for idx in picks {
            let mut data: Vec<f64> = segs[idx].iter().map(|v| v.as_f64()).collect();
            if let Some(n) = &noise {
                for v in &mut data {
                    *v += n.sample(rng);
                }
            }
            batch.push(Tensor::seq(window, ch, data));
            labels.push(c);
        }
    }
    Ok((batch, labels))
}

/// Number of gradient chunks the batch is split into. Chunk results are
/// reduced in index order, so training is deterministic for any thread
/// count.
const GRAD_CHUNKS: usize = 32;

fn backward_batch(
    fast: &FastNet,
    caches: &[Cache],
    dz: &Array2<f64>,
) -> Result<Vec<f64>> {
    let b = caches.len();
    let chunk_len = b.div_ceil(GRAD_CHUNKS);
    let n_chunks = b.div_ceil(chunk_len);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut grads = vec![0.0f64; fast.params.len()];
            let start = ci * chunk_len;
            let end = (start + chunk_len).min(b);
            for i in start..end {
                let dout = Tensor::flat(dz.row(i).to_vec());
                fast.backward(&caches[i], &dout, &mut grads)?;
            }
            Ok(grads)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0f64; fast.params.len()];
    for partial in partials {
        for (t, p) in total.iter_mut().zip(&partial) {
            *t += p;
        }
    }
    Ok(total)
}

/// Trains the encoder + projection head with supervised contrastive loss
/// and returns the bare encoder (head discarded) plus the loss curve.
pub fn train<T: Scalar>(
    pool: &SegmentPool<'_, T>,
    cfg: &TrainConfig,
) -> Result<(EncoderModel<T>, TrainReport)> {
    let (_, n_channels) = pool.validate()?;
    let enc_specs = encoder_specs(n_channels);
    let n_enc_layers = enc_specs.len();
    let mut specs = enc_specs;
    specs.extend(projection_specs());
    let mut net = Network::<T>::new(specs, cfg.seed);
    let mut fast = net.compile();

    let loss_fn = SupConLoss::new(cfg.temperature, cfg.loss_mode)?;
    let mut opt = RmsProp::new(cfg.learning_rate, cfg.decay, cfg.epsilon, fast.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BATCH_RNG_SALT));
    let total_steps = cfg.epochs * cfg.steps_per_epoch;
    let mut report = TrainReport {
        curve: Vec::with_capacity(total_steps),
    };

    for step in 0..total_steps {
        let (batch, labels) = make_batch(pool, cfg.per_concept, cfg.noise_variance, &mut rng)?;
        let caches: Vec<Cache> = batch
            .par_iter()
            .map(|t| fast.forward_cached(t))
            .collect::<Result<_>>()?;
        let head_dim = 64;
        let mut z = Array2::<f64>::zeros((caches.len(), head_dim));
        for (i, cache) in caches.iter().enumerate() {
            let out = fast.output_of(cache).values();
            if out.len() != head_dim {
                return Err(Error::Shape("unexpected projection output length".into()));
            }
            for (j, &v) in out.iter().enumerate() {
                z[[i, j]] = v;
            }
        }
        let (loss, dz) = loss_fn.eval(&z, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {step}; aborting"
            )));
        }
        let grads = backward_batch(&fast, &caches, &dz)?;
        opt.step(&mut fast.params, &grads).map_err(|e| {
            if let Error::Training(msg) = &e {
                if let Some(idx) = msg
                    .rsplit_once(' ')
                    .and_then(|(_, n)| n.parse::<usize>().ok())
                {
                    if let Some((layer, spec)) = fast.layer_of_param(idx) {
                        return Error::Training(format!(
                            "step {step}: non-finite gradient in layer {layer} ({})",
                            spec.kind_name()
                        ));
                    }
                }
            }
            e
        })?;
        report.curve.push(loss);
    }

    net.assign_from_fast(&fast)?;
    let encoder_net = Network {
        specs: net.specs[..n_enc_layers].to_vec(),
        params: net.params[..n_enc_layers].to_vec(),
    };
    Ok((
        EncoderModel::from_net(encoder_net, n_channels, cfg.seed),
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::gradcheck::max_rel_error;
    use approx::assert_abs_diff_eq;

    fn unit_rows(raw: Vec<Vec<f64>>) -> Array2<f64> {
        let n = raw.len();
        let d = raw[0].len();
        let mut z = Array2::<f64>::zeros((n, d));
        for (i, row) in raw.iter().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &v) in row.iter().enumerate() {
                z[[i, j]] = v / norm;
            }
        }
        z
    }

    fn random_unit_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit_rows(
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    /// Direct double-loop evaluation of the displayed equation, without
    /// stabilization: the independent oracle.
    fn supcon_oracle(
        z: &Array2<f64>,
        labels: &[usize],
        tau: f64,
        include_self: bool,
    ) -> f64 {
        let n = z.nrows();
        let dot = |i: usize, a: usize| -> f64 {
            z.row(i).iter().zip(z.row(a)).map(|(x, y)| x * y).sum()
        };
        let mut total = 0.0;
        for i in 0..n {
            let a_set: Vec<usize> = (0..n).filter(|&a| include_self || a != i).collect();
            let p_set: Vec<usize> = a_set
                .iter()
                .copied()
                .filter(|&p| labels[p] == labels[i])
                .collect();
            if p_set.is_empty() {
                continue;
            }
            let denom: f64 = a_set.iter().map(|&a| (dot(i, a) / tau).exp()).sum();
            let mut inner = 0.0;
            for &p in &p_set {
                inner += ((dot(i, p) / tau).exp() / denom).ln();
            }
            total += -inner / p_set.len() as f64;
        }
        total
    }

    #[test]
    fn encoder_parameter_count_is_exact() {
        let model = EncoderModel::<f64>::build(0);
        assert_eq!(model.param_count(), 655_136);
        // layer-by-layer arithmetic
        let specs = encoder_specs(14);
        let per_layer: Vec<usize> = specs.iter().map(|s| s.param_count()).collect();
        let convs: Vec<usize> = per_layer.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(convs, vec![11_008, 196_864, 196_864, 196_864, 32_896, 16_512, 4_128]);
    }

    #[test]
    fn encoder_output_is_32_dim() {
        let model = EncoderModel::<f64>::build(3);
        let seg = Array2::<f64>::from_shape_fn((100, 14), |(t, c)| {
            ((t * 7 + c * 13) % 19) as f64 * 0.1 - 0.9
        });
        let e = model.encode(&seg.view()).unwrap();
        assert_eq!(e.len(), 32);
        let e2 = model.encode(&seg.view()).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn encoder_sequence_lengths_shrink_as_documented() {
        // window 100 flows 100 -> 50 -> 25 -> 12 -> 1; reaching the dense
        // stack requires the documented pooling arithmetic to hold.
        assert_eq!((100 - 2) / 2 + 1, 50);
        assert_eq!((50 - 2) / 2 + 1, 25);
        assert_eq!((25 - 2) / 2 + 1, 12);
        let model = EncoderModel::<f64>::build_for_channels(2, 1);
        let seg = Array2::<f64>::from_elem((100, 2), 0.5);
        assert_eq!(model.encode(&seg.view()).unwrap().len(), 32);
    }

    #[test]
    fn projection_head_normalizes() {
        let net = Network::<f64>::new(projection_specs(), 5);
        let fast = net.compile();
        let out = fast
            .forward(&Tensor::flat((0..32).map(|i| i as f64 * 0.3 - 4.0).collect()))
            .unwrap();
        let norm: f64 = out.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn identical_embeddings_closed_form() {
        for n in [2usize, 4, 8] {
            let z = unit_rows(vec![vec![0.5, -0.5, 0.5, -0.5]; n]);
            let labels = vec![0usize; n];
            let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
            let (value, _) = loss.eval(&z, &labels).unwrap();
            assert_abs_diff_eq!(value, n as f64 * (n as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn matches_double_loop_oracle_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..25 {
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(2..=8);
            let n_classes = rng.gen_range(1..=4usize);
            let z = random_unit_batch(n, d, 1000 + case);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_classes)).collect();
            for (mode, include_self) in
                [(LossMode::Variant, true), (LossMode::Standard, false)]
            {
                let loss = SupConLoss::new(0.1, mode).unwrap();
                let (value, _) = loss.eval(&z, &labels).unwrap();
                let expect = supcon_oracle(&z, &labels, 0.1, include_self);
                assert_abs_diff_eq!(value, expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 8;
        let d = 4;
        let z = random_unit_batch(n, d, 7);
        let labels = vec![0, 0, 1, 1, 0, 1, 0, 1];
        let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
        let (_, dz) = loss.eval(&z, &labels).unwrap();

        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..d {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let (lp, _) = loss.eval(&zp, &labels).unwrap();
                zp[[i, j]] -= 2.0 * h;
                let (lm, _) = loss.eval(&zp, &labels).unwrap();
                let gn = (lp - lm) / (2.0 * h);
                worst = worst.max(max_rel_error(&[dz[[i, j]]], &[gn]));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn loss_invariant_under_rotation_and_permutation() {
        let n = 10;
        let d = 6;
        let z = random_unit_batch(n, d, 21);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
        let (base, _) = loss.eval(&z, &labels).unwrap();

        // orthogonal matrix via Gram-Schmidt on a random matrix
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut rotated = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                rotated[[i, j]] = (0..d).map(|k| q[j][k] * z[[i, k]]).sum();
            }
        }
        let (rot, _) = loss.eval(&rotated, &labels).unwrap();
        assert_abs_diff_eq!(base, rot, epsilon = 1e-9);

        // permutation of batch order
        let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
        let mut permuted = Array2::<f64>::zeros((n, d));
        let mut plabels = vec![0usize; n];
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..d {
                permuted[[i, j]] = z[[src, j]];
            }
            plabels[i] = labels[src];
        }
        let (p, _) = loss.eval(&permuted, &plabels).unwrap();
        assert_abs_diff_eq!(base, p, epsilon = 1e-9);
    }

    #[test]
    fn moving_same_class_embeddings_closer_does_not_increase_loss() {
        let n = 6;
        let d = 8;
        let z = random_unit_batch(n, d, 33);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
        let (base, _) = loss.eval(&z, &labels).unwrap();
        for eps in [1e-4, 1e-3] {
            let mut moved = z.clone();
            for pair in [(0usize, 1usize), (2, 3), (4, 5)] {
                for j in 0..d {
                    let a = z[[pair.0, j]];
                    let b = z[[pair.1, j]];
                    moved[[pair.0, j]] = a + eps * (b - a);
                    moved[[pair.1, j]] = b + eps * (a - b);
                }
            }
            // renormalize rows
            for i in 0..n {
                let norm: f64 = moved.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                for j in 0..d {
                    moved[[i, j]] /= norm;
                }
            }
            let (closer, _) = loss.eval(&moved, &labels).unwrap();
            assert!(
                closer <= base + 1e-9,
                "loss rose from {base} to {closer} at eps {eps}"
            );
        }
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        assert!(SupConLoss::new(0.0, LossMode::Variant).is_err());
        let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
        let z = Array2::<f64>::from_elem((2, 4), 3.0); // far from unit norm
        assert!(loss.eval(&z, &[0, 1]).is_err());
        let one = random_unit_batch(1, 4, 0);
        assert!(loss.eval(&one, &[0]).is_err());
    }

    fn tiny_pool_data(
        n_concepts: usize,
        per: usize,
        window: usize,
        ch: usize,
    ) -> Vec<(String, Array2<f64>)> {
        // separable data: concept k is a sinusoid of frequency k+1 on all
        // channels with small deterministic jitter
        let mut out = Vec::new();
        for k in 0..n_concepts {
            for s in 0..per {
                let data = Array2::from_shape_fn((window, ch), |(t, c)| {
                    let phase = (s * 13 + c * 7) as f64 * 0.31;
                    ((k + 1) as f64 * 0.5 * t as f64 + phase).sin()
                });
                out.push((format!("c{k:02}"), data));
            }
        }
        out
    }

    fn pool_from(data: &[(String, Array2<f64>)]) -> SegmentPool<'_, f64> {
        let mut groups: BTreeMap<String, Vec<&Array2<f64>>> = BTreeMap::new();
        for (concept, arr) in data {
            groups.entry(concept.clone()).or_default().push(arr);
        }
        SegmentPool::from_groups(groups)
    }

    #[test]
    fn batch_size_is_per_concept_times_concepts() {
        let data = tiny_pool_data(78, 1, 6, 2);
        let pool = pool_from(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (batch, labels) = make_batch(&pool, 8, 0.1, &mut rng).unwrap();
        assert_eq!(batch.len(), 624);
        assert_eq!(labels.len(), 624);
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 8);
    }

    #[test]
    fn zero_noise_copies_pool_segments() {
        let data = tiny_pool_data(3, 2, 5, 2);
        let pool = pool_from(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, labels) = make_batch(&pool, 2, 0.0, &mut rng).unwrap();
        for (tensor, &label) in batch.iter().zip(&labels) {
            let matched = pool.segments_of(label).iter().any(|seg| {
                seg.iter()
                    .zip(tensor.values())
                    .all(|(a, b)| (*a - *b).abs() == 0.0)
            });
            assert!(matched, "batch item is not an exact pool copy");
        }
    }

    #[test]
    fn noise_mean_square_matches_variance() {
        let data = tiny_pool_data(78, 1, 6, 2);
        let pool = pool_from(&data);
        let variance = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (noisy, labels) = make_batch(&pool, 8, variance, &mut rng).unwrap();
        // concept pools hold one segment each, so the clean counterpart is known
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for (tensor, &label) in noisy.iter().zip(&labels) {
            let clean = pool.segments_of(label)[0];
            for (a, b) in clean.iter().zip(tensor.values()) {
                let d = *a - *b;
                sq_sum += d * d;
                count += 1;
            }
        }
        let mse = sq_sum / count as f64;
        assert!(
            (mse - variance).abs() < 0.1 * variance,
            "measured {mse}, expected ~{variance}"
        );
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let data = tiny_pool_data(6, 4, 20, 2);
        let pool = pool_from(&data);
        let cfg = TrainConfig {
            per_concept: 4,
            epochs: 2,
            steps_per_epoch: 15,
            noise_variance: 0.01,
            seed: 5,
            ..Default::default()
        };
        let (model, report) = train(&pool, &cfg).unwrap();
        assert_eq!(model.n_channels, 2);
        let epochs = report.epoch_means(cfg.steps_per_epoch);
        assert!(
            epochs.last().unwrap() < epochs.first().unwrap(),
            "loss did not decrease: {epochs:?}"
        );
        assert_eq!(report.curve.len(), 30);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_pool_data(3, 3, 12, 2);
        let pool = pool_from(&data);
        let cfg = TrainConfig {
            per_concept: 2,
            epochs: 1,
            steps_per_epoch: 4,
            seed: 9,
            ..Default::default()
        };
        let (m1, r1) = train(&pool, &cfg).unwrap();
        let (m2, r2) = train(&pool, &cfg).unwrap();
        assert_eq!(r1.curve, r2.curve);
        assert_eq!(m1.net.flat_params(), m2.net.flat_params());
    }

    #[test]
    fn encoder_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        let model = EncoderModel::<f64>::build_for_channels(2, 77);
        model.save(&path).unwrap();
        let loaded = EncoderModel::<f64>::load(&path).unwrap();
        assert_eq!(loaded.n_channels, 2);
        assert_eq!(loaded.seed, 77);
        let seg = Array2::<f64>::from_shape_fn((100, 2), |(t, c)| {
            ((t + c) % 11) as f64 * 0.2 - 1.0
        });
        let a = model.encode(&seg.view()).unwrap();
        let b = loaded.encode(&seg.view()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
