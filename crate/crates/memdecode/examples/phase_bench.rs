//! Per-phase timing of one training step.

use memdecode::encoder::{encoder_specs, projection_specs, LossMode, SupConLoss};
use memdecode::neuralcore::net::{Cache, Network, Tensor};
use ndarray::Array2;
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    let b = 120;
    let mut specs = encoder_specs(14);
    specs.extend(projection_specs());
    let net = Network::<f64>::new(specs, 1);
    let fast = net.compile();

    let batch: Vec<Tensor> = (0..b)
        .map(|s| {
            Tensor::seq(
                100,
                14,
                (0..1400)
                    .map(|i| ((i * 7 + s * 13) % 23) as f64 * 0.1 - 1.0)
                    .collect(),
            )
        })
        .collect();

    // warmup
    let _ = fast.forward(&batch[0]).unwrap();

    let t0 = Instant::now();
    let outs: Vec<Tensor> = batch.par_iter().map(|t| fast.forward(t).unwrap()).collect();
    let t_fwd = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let caches: Vec<Cache> = batch
        .par_iter()
        .map(|t| fast.forward_cached(t).unwrap())
        .collect();
    let t_fwd_cached = t0.elapsed().as_secs_f64();

    let mut z = Array2::<f64>::zeros((b, 64));
    for (i, c) in caches.iter().enumerate() {
        for (j, &v) in fast.output_of(c).values().iter().enumerate() {
            z[[i, j]] = v;
        }
    }
    let labels: Vec<usize> = (0..b).map(|i| i / 8).collect();
    let loss = SupConLoss::new(0.1, LossMode::Variant).unwrap();
    let t0 = Instant::now();
    let (_, dz) = loss.eval(&z, &labels).unwrap();
    let t_loss = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let chunk_len = b.div_ceil(32);
    let partials: Vec<Vec<f64>> = (0..b.div_ceil(chunk_len))
        .into_par_iter()
        .map(|ci| {
            let mut grads = vec![0.0f64; fast.params.len()];
            for i in ci * chunk_len..((ci + 1) * chunk_len).min(b) {
                let dout = Tensor::flat(dz.row(i).to_vec());
                fast.backward(&caches[i], &dout, &mut grads).unwrap();
            }
            grads
        })
        .collect();
    let t_bwd = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let mut total = vec![0.0f64; fast.params.len()];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let t_reduce = t0.elapsed().as_secs_f64();

    println!(
        "fwd {:.3}s  fwd_cached {:.3}s  loss {:.3}s  bwd {:.3}s  reduce {:.3}s  (outs {})",
        t_fwd,
        t_fwd_cached,
        t_loss,
        t_bwd,
        t_reduce,
        outs.len()
    );
}
