//! Quick training-step throughput probe.

use memdecode::encoder::{make_batch, train, SegmentPool, TrainConfig};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let n_concepts = 15;
    let per = 40;
    let mut data = Vec::new();
    for k in 0..n_concepts {
        for s in 0..per {
            let arr = Array2::from_shape_fn((100, 14), |(t, c)| {
                ((k + 1) as f64 * 0.2 * t as f64 + (s * 3 + c) as f64 * 0.17).sin()
            });
            data.push((format!("c{k:02}"), arr));
        }
    }
    let mut groups: BTreeMap<String, Vec<&Array2<f64>>> = BTreeMap::new();
    for (c, a) in &data {
        groups.entry(c.clone()).or_default().push(a);
    }
    let pool = SegmentPool::from_groups(groups);

    // warm-up single batch to page everything in
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let _ = make_batch(&pool, 8, 0.1, &mut rng).unwrap();

    let steps = 6;
    let cfg = TrainConfig {
        per_concept: 8,
        epochs: 1,
        steps_per_epoch: steps,
        seed: 1,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (_, report) = train(&pool, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} steps of batch {} in {:.2} s -> {:.2} s/step (losses {:?})",
        steps,
        8 * n_concepts,
        dt,
        dt / steps as f64,
        report.curve
    );
}
