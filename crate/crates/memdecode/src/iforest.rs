//! Isolation forest anomaly scoring.
//!
//! Trees are grown from a canonically sorted view of the input vectors, so
//! the fitted forest is a function of the data multiset alone. Permuting the
//! input therefore permutes the scores identically, and equal vectors always
//! receive equal scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stats::harmonic;

#[derive(Debug)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Average unsuccessful-search path length c(n) = 2H(n-1) - 2(n-1)/n.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64
}

fn build_tree(points: &mut [&[f64]], depth: usize, max_depth: usize, rng: &mut ChaCha8Rng) -> Node {
    if points.len() <= 1 || depth >= max_depth {
        return Node::Leaf { size: points.len() };
    }
    let dims = points[0].len();
    let splittable: Vec<usize> = (0..dims)
        .filter(|&d| {
            let first = points[0][d];
            points.iter().any(|p| p[d] != first)
        })
        .collect();
    if splittable.is_empty() {
        return Node::Leaf { size: points.len() };
    }
    let feature = splittable[rng.gen_range(0..splittable.len())];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points.iter() {
        lo = lo.min(p[feature]);
        hi = hi.max(p[feature]);
    }
    let value = rng.gen_range(lo..hi);
    // partition_point-style split preserving the canonical order
    let mut left: Vec<&[f64]> = Vec::new();
    let mut right: Vec<&[f64]> = Vec::new();
    for p in points.iter() {
        if p[feature] < value {
            left.push(p);
        } else {
            right.push(p);
        }
    }
    Node::Split {
        feature,
        value,
        left: Box::new(build_tree(&mut left, depth + 1, max_depth, rng)),
        right: Box::new(build_tree(&mut right, depth + 1, max_depth, rng)),
    }
}

fn path_length(node: &Node, point: &[f64], depth: f64) -> f64 {
    match node {
        Node::Leaf { size } => depth + average_path_length(*size),
        Node::Split {
            feature,
            value,
            left,
            right,
        } => {
            if point[*feature] < *value {
                path_length(left, point, depth + 1.0)
            } else {
                path_length(right, point, depth + 1.0)
            }
        }
    }
}

/// Fits an isolation forest and scores every input vector.
///
/// Scores are s(x) = 2^(-E[path]/c(subsample)) in (0, 1); higher means more
/// anomalous. Deterministic given the seed.
pub fn iforest_fit_score(
    features: &[Vec<f64>],
    n_trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::InvalidArg("isolation forest requires input points".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArg(
            "isolation forest requires at least 2 points".into(),
        ));
    }
    let dims = features[0].len();
    if dims == 0 || features.iter().any(|f| f.len() != dims) {
        return Err(Error::Shape(
            "isolation forest features must share a nonzero dimension".into(),
        ));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArg(
            "isolation forest features must be finite".into(),
        ));
    }
    if n_trees == 0 {
        return Err(Error::InvalidArg("n_trees must be positive".into()));
    }

    // Canonical (value-sorted) view: the forest becomes a function of the
    // data multiset, independent of input order.
    let mut canonical: Vec<&[f64]> = features.iter().map(|f| f.as_slice()).collect();
    canonical.sort_by(|a, b| {
        a.partial_cmp(b)
            .expect("finite features are totally ordered")
    });

    let psi = subsample.max(2).min(n);
    let max_depth = (psi as f64).log2().ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let picks = rand::seq::index::sample(&mut rng, n, psi);
        let mut sample: Vec<&[f64]> = picks.iter().map(|i| canonical[i]).collect();
        // keep canonical order inside the sample as well
        sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        trees.push(build_tree(&mut sample, 0, max_depth, &mut rng));
    }

    let c_norm = average_path_length(psi);
    let scores = features
        .iter()
        .map(|f| {
            let mean_path: f64 = trees
                .iter()
                .map(|t| path_length(t, f, 0.0))
                .sum::<f64>()
                / n_trees as f64;
            2f64.powf(-mean_path / c_norm)
        })
        .collect();
    Ok(scores)
}
