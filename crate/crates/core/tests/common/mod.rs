//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ldpfl_core::models::{Batch, Model};
use ldpfl_core::ParamVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random instance with at least `min_n` and at most 8 points of dimension
/// 1 to 3. Integer instances make every sum exact and ties common.
pub fn instance(rng: &mut ChaCha8Rng, integer: bool, min_n: usize) -> Vec<Vec<f64>> {
    let n = rng.gen_range(min_n..=8);
    let d = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if integer {
                        rng.gen_range(-4i32..=4) as f64
                    } else {
                        rng.gen_range(-10.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn to_params(pts: &[Vec<f64>]) -> Vec<ParamVector> {
    pts.iter().map(|p| ParamVector::from_flat(p.clone()).unwrap()).collect()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..a.len() {
        s += (a[j] - b[j]) * (a[j] - b[j]);
    }
    s
}

/// Multi-Krum scores. The `N - f - 2` nearest neighbours are ranked by
/// (distance, index) and summed in index order; an exhaustive search over
/// all neighbour subsets confirms the sum is minimal.
pub fn multikrum_scores(pts: &[Vec<f64>], f: usize) -> Vec<f64> {
    let n = pts.len();
    let m = n - f - 2;
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut ranked = others.clone();
            ranked.sort_by(|&a, &b| {
                sq(&pts[i], &pts[a]).partial_cmp(&sq(&pts[i], &pts[b])).unwrap().then(a.cmp(&b))
            });
            let mut chosen = ranked[..m].to_vec();
            chosen.sort_unstable();
            let best: f64 = chosen.iter().map(|&j| sq(&pts[i], &pts[j])).sum();
            let mut min_any = f64::INFINITY;
            for mask in 0u32..(1 << others.len()) {
                if mask.count_ones() as usize != m {
                    continue;
                }
                let s: f64 = (0..others.len())
                    .filter(|b| mask >> b & 1 == 1)
                    .map(|b| sq(&pts[i], &pts[others[b]]))
                    .sum();
                min_any = min_any.min(s);
            }
            assert!(best <= min_any + 1e-9 * min_any.abs().max(1.0));
            best
        })
        .collect()
}

/// `(aggregate, selected)` of Multi-Krum: lowest scores, ties to the lower
/// index, mean summed in ascending index order.
pub fn multikrum(pts: &[Vec<f64>], f: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let scores = multikrum_scores(pts, f);
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let chosen: Vec<&Vec<f64>> = selected.iter().map(|&i| &pts[i]).collect();
    (mean(&chosen), selected)
}

pub fn mean(pts: &[&Vec<f64>]) -> Vec<f64> {
    let d = pts[0].len();
    (0..d)
        .map(|j| {
            let mut s = pts[0][j];
            for p in &pts[1..] {
                s += p[j];
            }
            s / pts.len() as f64
        })
        .collect()
}

pub fn trimmed_mean(pts: &[Vec<f64>], beta: usize) -> Vec<f64> {
    let n = pts.len();
    (0..pts[0].len())
        .map(|j| {
            let mut col: Vec<f64> = pts.iter().map(|p| p[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let kept = &col[beta..n - beta];
            let mut s = 0.0;
            for v in kept {
                s += v;
            }
            s / kept.len() as f64
        })
        .collect()
}

/// Largest relative deviation between the analytic gradient of `sign * L`
/// and central differences with step 1e-5.
pub fn fd_max_rel_error(model: &Model, theta: &ParamVector, batch: &Batch<'_>, sign: f64) -> f64 {
    let h = 1e-5;
    let g = if sign > 0.0 {
        model.grad(theta, batch).unwrap()
    } else {
        model.reverse_grad(theta, batch).unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut values = theta.values().to_vec();
    for i in 0..theta.dim() {
        let orig = values[i];
        values[i] = orig + h;
        let up = model.loss(&theta.with_values(values.clone()).unwrap(), batch).unwrap();
        values[i] = orig - h;
        let down = model.loss(&theta.with_values(values.clone()).unwrap(), batch).unwrap();
        values[i] = orig;
        let fd = sign * (up - down) / (2.0 * h);
        let a = g.values()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

/// Random model parameters and a random batch of `n` samples.
pub fn random_instance(
    spec: ldpfl_core::ModelSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Model, ParamVector, Vec<f64>, Vec<usize>) {
    let model = Model::new(spec).unwrap();
    let theta = model
        .zeros()
        .with_values((0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let inputs = (0..n * spec.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..spec.num_classes)).collect();
    (model, theta, inputs, labels)
}
