//! f64 layer kernels. Sequence data is `[len, ch]` row-major; convolution
//! weights use the kernel-major layout `[k][in_ch][out_ch]` so that the
//! inner loops run over contiguous slices.

use crate::stats::dot_f64;

/// Time-axis tile: weight rows pulled into cache serve this many output
/// rows before the next block streams in.
const TIME_TILE: usize = 12;

/// Same-padding stride-1 1D convolution.
///
/// `out[t, o] = bias[o] + sum_{j,c} input[t + j - k/2, c] * w[j][c][o]`,
/// zero-padded at the edges. `out` must hold `len * out_ch` values.
pub fn conv1d_forward(
    input: &[f64],
    len: usize,
    in_ch: usize,
    weights: &[f64],
    bias: &[f64],
    kernel: usize,
    out_ch: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), len * in_ch);
    debug_assert_eq!(weights.len(), kernel * in_ch * out_ch);
    debug_assert_eq!(bias.len(), out_ch);
    debug_assert_eq!(out.len(), len * out_ch);
    let half = (kernel / 2) as isize;
    for t in 0..len {
        out[t * out_ch..(t + 1) * out_ch].copy_from_slice(bias);
    }
    let mut t0 = 0;
    while t0 < len {
        let t1 = (t0 + TIME_TILE).min(len);
        for j in 0..kernel {
            let w_block = &weights[j * in_ch * out_ch..][..in_ch * out_ch];
            for c in 0..in_ch {
                let w_row = &w_block[c * out_ch..][..out_ch];
                for t in t0..t1 {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xv = input[src as usize * in_ch + c];
                    if xv == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[t * out_ch..][..out_ch];
                    for (o, &w) in out_row.iter_mut().zip(w_row) {
                        *o += xv * w;
                    }
                }
            }
        }
        t0 = t1;
    }
}

/// Backward pass of [`conv1d_forward`]. `dinput` must be zeroed by the
/// caller; `dweights`/`dbias` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    input: &[f64],
    len: usize,
    in_ch: usize,
    weights: &[f64],
    kernel: usize,
    out_ch: usize,
    dout: &[f64],
    dinput: &mut [f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    let half = (kernel / 2) as isize;
    for t in 0..len {
        let dout_row = &dout[t * out_ch..][..out_ch];
        for (db, &d) in dbias.iter_mut().zip(dout_row) {
            *db += d;
        }
    }
    let mut t0 = 0;
    while t0 < len {
        let t1 = (t0 + TIME_TILE).min(len);
        for j in 0..kernel {
            let w_block = &weights[j * in_ch * out_ch..][..in_ch * out_ch];
            let dw_block = &mut dweights[j * in_ch * out_ch..][..in_ch * out_ch];
            for c in 0..in_ch {
                let w_row = &w_block[c * out_ch..][..out_ch];
                let dw_row = &mut dw_block[c * out_ch..][..out_ch];
                for t in t0..t1 {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = src as usize;
                    let dout_row = &dout[t * out_ch..][..out_ch];
                    dinput[s * in_ch + c] += dot_f64(dout_row, w_row);
                    let xv = input[s * in_ch + c];
                    if xv == 0.0 {
                        continue;
                    }
                    for (dw, &d) in dw_row.iter_mut().zip(dout_row) {
                        *dw += xv * d;
                    }
                }
            }
        }
        t0 = t1;
    }
}

/// Windowed per-channel max with floor semantics:
/// output length = (len - size)/stride + 1. Records the flat input index of
/// each winner (first index on ties) for the backward pass.
pub fn maxpool_forward(
    input: &[f64],
    len: usize,
    ch: usize,
    size: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let out_len = (len - size) / stride + 1;
    debug_assert_eq!(out.len(), out_len * ch);
    for t_out in 0..out_len {
        let start = t_out * stride;
        for c in 0..ch {
            let mut best = input[start * ch + c];
            let mut best_pos = (start * ch + c) as u32;
            for dt in 1..size {
                let pos = (start + dt) * ch + c;
                if input[pos] > best {
                    best = input[pos];
                    best_pos = pos as u32;
                }
            }
            out[t_out * ch + c] = best;
            argmax[t_out * ch + c] = best_pos;
        }
    }
}

/// Routes each output gradient to the argmax input position.
pub fn maxpool_backward(dout: &[f64], argmax: &[u32], dinput: &mut [f64]) {
    for (d, &pos) in dout.iter().zip(argmax) {
        dinput[pos as usize] += d;
    }
}

/// Per-channel max over time (first index on ties).
pub fn global_maxpool_forward(
    input: &[f64],
    len: usize,
    ch: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    for c in 0..ch {
        let mut best = input[c];
        let mut best_pos = c as u32;
        for t in 1..len {
            let pos = t * ch + c;
            if input[pos] > best {
                best = input[pos];
                best_pos = pos as u32;
            }
        }
        out[c] = best;
        argmax[c] = best_pos;
    }
}

/// `out = bias + input * weights`, weights `[inputs][outputs]` row-major.
pub fn dense_forward(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), inputs);
    debug_assert_eq!(out.len(), outputs);
    out.copy_from_slice(bias);
    for (i, &xv) in input.iter().enumerate() {
        let w_row = &weights[i * outputs..][..outputs];
        for (o, &w) in out.iter_mut().zip(w_row) {
            *o += xv * w;
        }
    }
}

/// Backward pass of [`dense_forward`]; `dinput` is overwritten,
/// `dweights`/`dbias` accumulated.
pub fn dense_backward(
    input: &[f64],
    weights: &[f64],
    inputs: usize,
    outputs: usize,
    dout: &[f64],
    dinput: &mut [f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) {
    for (db, &d) in dbias.iter_mut().zip(dout) {
        *db += d;
    }
    for i in 0..inputs {
        let w_row = &weights[i * outputs..][..outputs];
        let dw_row = &mut dweights[i * outputs..][..outputs];
        let xv = input[i];
        dinput[i] = dot_f64(dout, w_row);
        for (dw, &d) in dw_row.iter_mut().zip(dout) {
            *dw += xv * d;
        }
    }
}

pub fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

/// Gradient passes where the stored output is positive.
pub fn relu_backward(output: &[f64], dout: &[f64], dinput: &mut [f64]) {
    for ((dx, &y), &d) in dinput.iter_mut().zip(output).zip(dout) {
        *dx = if y > 0.0 { d } else { 0.0 };
    }
}

pub const L2_EPSILON: f64 = 1e-12;

/// `out = v / (||v|| + epsilon)`.
pub fn l2norm_forward(input: &[f64], out: &mut [f64]) {
    let norm = input.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm + L2_EPSILON;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x / denom;
    }
}

pub fn l2norm_backward(input: &[f64], dout: &[f64], dinput: &mut [f64]) {
    let norm = input.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm + L2_EPSILON;
    if norm < 1e-150 {
        for (dx, &d) in dinput.iter_mut().zip(dout) {
            *dx = d / denom;
        }
        return;
    }
    let dot: f64 = dout.iter().zip(input).map(|(d, x)| d * x).sum();
    let scale = dot / (norm * denom * denom);
    for ((dx, &d), &x) in dinput.iter_mut().zip(dout).zip(input) {
        *dx = d / denom - x * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::gradcheck::max_rel_error;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_identity_kernel() {
        let input: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let weights = [0.0, 1.0, 0.0]; // [k=3][in=1][out=1]
        let bias = [0.0];
        let mut out = vec![0.0; 12];
        conv1d_forward(&input, 12, 1, &weights, &bias, 3, 1, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_output_dims_match_stage_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_vec(&mut rng, 100 * 14);
        let weights = rand_vec(&mut rng, 3 * 14 * 256);
        let bias = rand_vec(&mut rng, 256);
        let mut out = vec![0.0; 100 * 256];
        conv1d_forward(&input, 100, 14, &weights, &bias, 3, 256, &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    /// Central finite differences on a random 8x3 -> 4 instance, against a
    /// scalar loss sum(w_l * out) with fixed random w_l.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, in_ch, out_ch, k) = (8, 3, 4, 3);
        let input = rand_vec(&mut rng, len * in_ch);
        let weights = rand_vec(&mut rng, k * in_ch * out_ch);
        let bias = rand_vec(&mut rng, out_ch);
        let loss_w = rand_vec(&mut rng, len * out_ch);

        let loss = |input: &[f64], weights: &[f64], bias: &[f64]| -> f64 {
            let mut out = vec![0.0; len * out_ch];
            conv1d_forward(input, len, in_ch, weights, bias, k, out_ch, &mut out);
            out.iter().zip(&loss_w).map(|(o, w)| o * w).sum()
        };

        let mut dinput = vec![0.0; input.len()];
        let mut dweights = vec![0.0; weights.len()];
        let mut dbias = vec![0.0; bias.len()];
        conv1d_backward(
            &input, len, in_ch, &weights, k, out_ch, &loss_w, &mut dinput, &mut dweights,
            &mut dbias,
        );

        let h = 1e-5;
        let fd = |f: &mut dyn FnMut(f64) -> f64| -> f64 { (f(h) - f(-h)) / (2.0 * h) };

        let mut worst = 0.0f64;
        for i in 0..input.len() {
            let mut probe = |d: f64| {
                let mut x = input.clone();
                x[i] += d;
                loss(&x, &weights, &bias)
            };
            worst = worst.max(max_rel_error(&[dinput[i]], &[fd(&mut probe)]));
        }
        for i in 0..weights.len() {
            let mut probe = |d: f64| {
                let mut w = weights.clone();
                w[i] += d;
                loss(&input, &w, &bias)
            };
            worst = worst.max(max_rel_error(&[dweights[i]], &[fd(&mut probe)]));
        }
        for i in 0..bias.len() {
            let mut probe = |d: f64| {
                let mut b = bias.clone();
                b[i] += d;
                loss(&input, &weights, &b)
            };
            worst = worst.max(max_rel_error(&[dbias[i]], &[fd(&mut probe)]));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn maxpool_direct_example() {
        let input = [1.0, 3.0, 2.0, 8.0];
        let mut out = vec![0.0; 2];
        let mut argmax = vec![0u32; 2];
        maxpool_forward(&input, 4, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(out, vec![3.0, 8.0]);
        assert_eq!(argmax, vec![1, 3]);
    }

    #[test]
    fn maxpool_floor_semantics() {
        let input: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let out_len = (25 - 2) / 2 + 1;
        assert_eq!(out_len, 12);
        let mut out = vec![0.0; out_len];
        let mut argmax = vec![0u32; out_len];
        maxpool_forward(&input, 25, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(out[11], 23.0); // the trailing element 24 is dropped
    }

    #[test]
    fn maxpool_ties_take_first_index() {
        let input = [5.0, 5.0];
        let mut out = vec![0.0; 1];
        let mut argmax = vec![0u32; 1];
        maxpool_forward(&input, 2, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(argmax[0], 0);
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_vec(&mut rng, 10 * 2);
        let mut out = vec![0.0; 5 * 2];
        let mut argmax = vec![0u32; 5 * 2];
        maxpool_forward(&input, 10, 2, 2, 2, &mut out, &mut argmax);
        let loss_w = rand_vec(&mut rng, out.len());
        let mut dinput = vec![0.0; input.len()];
        maxpool_backward(&loss_w, &argmax, &mut dinput);

        let h = 1e-5;
        for i in 0..input.len() {
            let probe = |d: f64| {
                let mut x = input.clone();
                x[i] += d;
                let mut o = vec![0.0; out.len()];
                let mut a = vec![0u32; out.len()];
                maxpool_forward(&x, 10, 2, 2, 2, &mut o, &mut a);
                o.iter().zip(&loss_w).map(|(v, w)| v * w).sum::<f64>()
            };
            let gn = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(
                max_rel_error(&[dinput[i]], &[gn]) < 1e-4,
                "input {i}: {} vs {gn}",
                dinput[i]
            );
        }
    }

    #[test]
    fn global_maxpool_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let len = 17;
        let ch = 5;
        let input = rand_vec(&mut rng, len * ch);
        let mut out = vec![0.0; ch];
        let mut argmax = vec![0u32; ch];
        global_maxpool_forward(&input, len, ch, &mut out, &mut argmax);

        // permute time steps
        let mut rows: Vec<&[f64]> = input.chunks(ch).collect();
        rows.rotate_left(9);
        rows.swap(0, 7);
        let permuted: Vec<f64> = rows.concat();
        let mut out_p = vec![0.0; ch];
        let mut argmax_p = vec![0u32; ch];
        global_maxpool_forward(&permuted, len, ch, &mut out_p, &mut argmax_p);
        assert_eq!(out, out_p);
    }

    #[test]
    fn global_maxpool_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (len, ch) = (9, 4);
        let input = rand_vec(&mut rng, len * ch);
        let loss_w = rand_vec(&mut rng, ch);
        let mut out = vec![0.0; ch];
        let mut argmax = vec![0u32; ch];
        global_maxpool_forward(&input, len, ch, &mut out, &mut argmax);
        let mut dinput = vec![0.0; input.len()];
        maxpool_backward(&loss_w, &argmax, &mut dinput);

        let h = 1e-5;
        for i in 0..input.len() {
            let probe = |d: f64| {
                let mut x = input.clone();
                x[i] += d;
                let mut o = vec![0.0; ch];
                let mut a = vec![0u32; ch];
                global_maxpool_forward(&x, len, ch, &mut o, &mut a);
                o.iter().zip(&loss_w).map(|(v, w)| v * w).sum::<f64>()
            };
            let gn = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(max_rel_error(&[dinput[i]], &[gn]) < 1e-4);
        }
    }

    #[test]
    fn dense_identity() {
        let input = [1.0, -2.0, 3.0];
        let mut weights = vec![0.0; 9];
        for i in 0..3 {
            weights[i * 3 + i] = 1.0;
        }
        let bias = [0.0; 3];
        let mut out = vec![0.0; 3];
        dense_forward(&input, &weights, &bias, 3, 3, &mut out);
        assert_eq!(out.as_slice(), input.as_slice());
    }

    #[test]
    fn dense_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n_in, n_out) = (7, 5);
        let input = rand_vec(&mut rng, n_in);
        let weights = rand_vec(&mut rng, n_in * n_out);
        let bias = rand_vec(&mut rng, n_out);
        let loss_w = rand_vec(&mut rng, n_out);

        let loss = |input: &[f64], weights: &[f64], bias: &[f64]| -> f64 {
            let mut out = vec![0.0; n_out];
            dense_forward(input, weights, bias, n_in, n_out, &mut out);
            out.iter().zip(&loss_w).map(|(o, w)| o * w).sum()
        };

        let mut dinput = vec![0.0; n_in];
        let mut dweights = vec![0.0; weights.len()];
        let mut dbias = vec![0.0; n_out];
        dense_backward(
            &input, &weights, n_in, n_out, &loss_w, &mut dinput, &mut dweights, &mut dbias,
        );

        let h = 1e-5;
        for i in 0..n_in {
            let mut x = input.clone();
            x[i] += h;
            let lp = loss(&x, &weights, &bias);
            x[i] -= 2.0 * h;
            let lm = loss(&x, &weights, &bias);
            let gn = (lp - lm) / (2.0 * h);
            assert!(max_rel_error(&[dinput[i]], &[gn]) < 1e-6);
        }
        for i in 0..weights.len() {
            let mut w = weights.clone();
            w[i] += h;
            let lp = loss(&input, &w, &bias);
            w[i] -= 2.0 * h;
            let lm = loss(&input, &w, &bias);
            let gn = (lp - lm) / (2.0 * h);
            assert!(max_rel_error(&[dweights[i]], &[gn]) < 1e-6);
        }
    }

    #[test]
    fn relu_and_its_gradient() {
        let input = [-1.0, 0.0, 2.0];
        let mut out = vec![0.0; 3];
        relu_forward(&input, &mut out);
        assert_eq!(out, vec![0.0, 0.0, 2.0]);
        let mut dinput = vec![0.0; 3];
        relu_backward(&out, &[1.0, 1.0, 1.0], &mut dinput);
        assert_eq!(dinput, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_345() {
        let input = [3.0, 4.0];
        let mut out = vec![0.0; 2];
        l2norm_forward(&input, &mut out);
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-12);
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn l2_normalize_zero_vector_guard() {
        let input = [0.0, 0.0];
        let mut out = vec![1.0; 2];
        l2norm_forward(&input, &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn l2norm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let input = rand_vec(&mut rng, n);
        let loss_w = rand_vec(&mut rng, n);
        let mut out = vec![0.0; n];
        l2norm_forward(&input, &mut out);
        let mut dinput = vec![0.0; n];
        l2norm_backward(&input, &loss_w, &mut dinput);

        let h = 1e-6;
        for i in 0..n {
            let probe = |d: f64| {
                let mut x = input.clone();
                x[i] += d;
                let mut o = vec![0.0; n];
                l2norm_forward(&x, &mut o);
                o.iter().zip(&loss_w).map(|(v, w)| v * w).sum::<f64>()
            };
            let gn = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(
                max_rel_error(&[dinput[i]], &[gn]) < 1e-4,
                "{} vs {gn}",
                dinput[i]
            );
        }
    }
}
