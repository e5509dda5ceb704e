//! Finite-difference cases covering every differentiable graph primitive.

use cascade_core::tensor::{grad_check, GradCheckReport, Graph, Reduction, Tensor, Var};
use cascade_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ids: Vec<usize> = (0..5).map(|_| r.gen_range(0..6)).collect();
    let targets: Vec<Option<usize>> = (0..4).map(|i| (i != 2).then(|| r.gen_range(0..5))).collect();
    let mask: Vec<bool> = (0..6).map(|_| r.gen_bool(0.4)).collect();
    let drop_seed: u64 = r.gen();
    vec![
        ("matmul", vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (
            "matmul_batched",
            vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 4, 2])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_shared_rhs",
            vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[4, 3])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("add_broadcast", vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul_broadcast", vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[3])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![rand_tensor(r, &[5])], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        (
            "conv1d",
            vec![rand_tensor(r, &[2, 3, 9]), rand_tensor(r, &[4, 3, 5]), rand_tensor(r, &[4])],
            Box::new(|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 2)),
        ),
        (
            "embedding",
            vec![rand_tensor(r, &[6, 3])],
            Box::new(move |g, v| g.embedding(v[0], &ids)),
        ),
        ("layer_norm", vec![rand_tensor(r, &[3, 5])], Box::new(|g, v| g.layer_norm(v[0], 1e-5))),
        ("softmax_last", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, v| g.softmax(v[0], 2))),
        ("softmax_middle", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, v| g.softmax(v[0], 1))),
        ("relu", vec![away_from_zero(r, &[3, 4])], Box::new(|g, v| Ok(g.relu(v[0])))),
        (
            "cross_entropy_sum",
            vec![rand_tensor(r, &[4, 5])],
            Box::new({
                let t = targets.clone();
                move |g, v| g.cross_entropy(v[0], &t, 0.1, Reduction::Sum)
            }),
        ),
        (
            "cross_entropy_mean",
            vec![rand_tensor(r, &[2, 2, 5])],
            Box::new(move |g, v| g.cross_entropy(v[0], &targets, 0.0, Reduction::Mean)),
        ),
        ("reshape", vec![rand_tensor(r, &[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("permute", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![rand_tensor(r, &[2, 3, 4])], Box::new(|g, v| g.transpose(v[0], 1, 2))),
        (
            "masked_fill",
            vec![rand_tensor(r, &[2, 6])],
            Box::new(move |g, v| g.masked_fill(v[0], &mask, -2.5)),
        ),
        (
            "dropout",
            vec![rand_tensor(r, &[4, 4])],
            Box::new(move |g, v| {
                let mut drng = ChaCha8Rng::seed_from_u64(drop_seed);
                Ok(g.dropout(v[0], 0.3, &mut drng))
            }),
        ),
        ("sum", vec![rand_tensor(r, &[3, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "attention_block",
            vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 4]), rand_tensor(r, &[4, 4])],
            Box::new(|g, v| {
                let q = g.matmul(v[0], v[1])?;
                let k = g.matmul(v[0], v[2])?;
                let kt = g.transpose(k, 0, 1)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 0.5);
                let s = g.masked_fill(s, &[false, true, true, false, false, true, false, false, false], -1e9)?;
                let p = g.softmax(s, 1)?;
                let o = g.matmul(p, v[0])?;
                g.layer_norm(o, 1e-5)
            }),
        ),
    ]
}

/// Runs every case for each seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in seeds {
        for (name, inputs, f) in cases(seed) {
            let report = grad_check(&inputs, |g, v| f(g, v), EPS)?;
            out.push(CaseResult { name, seed, report });
        }
    }
    Ok(out)
}

pub fn primitive_names() -> Vec<&'static str> {
    cases(0).into_iter().map(|c| c.0).collect()
}
