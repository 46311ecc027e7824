//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use repnet::data::{generate_synthetic, Dataset, SyntheticSpec, TripletBatch, TripletSampler};
use repnet::layers::{
    fc_backward, fc_forward, relu, relu_backward, rep_backward, rep_forward, softmax_cross_entropy, triplet_loss,
    RepressionKind,
};
use repnet::network::{RepNet, RepNetConfig};
use repnet::par::Exec;
use repnet::retrieval::{EmbeddedSample, RankingList};
use repnet::Matrix;

pub const FD_STEP: f64 = 1e-5;

/// Worst-case comparison of analytic vs numeric gradient entries. An entry
/// passes when its absolute error is within `abs_tol` or its relative error
/// is within `rel_tol`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradTally {
    pub entries: usize,
    pub failures: usize,
    /// Largest relative error among entries whose magnitude exceeds the
    /// absolute floor.
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradTally {
    pub fn record(&mut self, analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.entries += 1;
        self.max_abs = self.max_abs.max(abs);
        if scale > abs_tol {
            self.max_rel = self.max_rel.max(rel);
        }
        if abs > abs_tol && rel > rel_tol {
            self.failures += 1;
        }
    }

    pub fn merge(&mut self, other: GradTally) {
        self.entries += other.entries;
        self.failures += other.failures;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
    }

    pub fn compare(&mut self, analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(numeric) {
            self.record(*a, *n, rel_tol, abs_tol);
        }
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries kept at least `gap` away from zero so ReLU kinks stay outside
/// the finite-difference stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// FC layer under the scalar probe `c · (Wᵀx + b)`.
pub fn check_fc(rng: &mut ChaCha8Rng, rel: f64, abs: f64) -> GradTally {
    let (din, dout) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let x = gaussian_vec(rng, din);
    let w = random_matrix(rng, din, dout);
    let b = gaussian_vec(rng, dout);
    let c = gaussian_vec(rng, dout);
    let g = fc_backward(&x, &w, &c).unwrap();
    let mut t = GradTally::default();
    t.compare(
        &g.d_inputs[0],
        &numeric_grad(&x, |x| dot(&c, &fc_forward(x, &w, &b).unwrap())),
        rel,
        abs,
    );
    let nw = numeric_grad(w.as_slice(), |wv| {
        let w = Matrix::new(din, dout, wv.to_vec()).unwrap();
        dot(&c, &fc_forward(&x, &w, &b).unwrap())
    });
    t.compare(g.d_weights.as_slice(), &nw, rel, abs);
    t.compare(
        &g.d_bias,
        &numeric_grad(&b, |b| dot(&c, &fc_forward(&x, &w, b).unwrap())),
        rel,
        abs,
    );
    t
}

pub fn check_relu(rng: &mut ChaCha8Rng, rel: f64, abs: f64) -> GradTally {
    let n = rng.random_range(1..=8);
    let x = away_from_zero(rng, n, 1e-3);
    let c = gaussian_vec(rng, n);
    let mut t = GradTally::default();
    t.compare(
        &relu_backward(&x, &c),
        &numeric_grad(&x, |x| dot(&c, &relu(x))),
        rel,
        abs,
    );
    t
}

pub fn check_softmax_ce(rng: &mut ChaCha8Rng, rel: f64, abs: f64) -> GradTally {
    let n = rng.random_range(1..=8);
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let label = rng.random_range(0..n);
    let (_, grad) = softmax_cross_entropy(&z, label).unwrap();
    let mut t = GradTally::default();
    t.compare(
        &grad,
        &numeric_grad(&z, |z| softmax_cross_entropy(z, label).unwrap().0),
        rel,
        abs,
    );
    t
}

pub fn check_triplet(rng: &mut ChaCha8Rng, rel: f64, abs: f64) -> GradTally {
    let n = rng.random_range(1..=8);
    // resample until the hinge is clearly on one side
    let (a, p, q, margin) = loop {
        let (a, p, q) = (gaussian_vec(rng, n), gaussian_vec(rng, n), gaussian_vec(rng, n));
        let margin = rng.random_range(0.05..1.0);
        let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        if (d(&a, &p) - d(&a, &q) + margin).abs() > 1e-3 {
            break (a, p, q, margin);
        }
    };
    let out = triplet_loss(&a, &p, &q, margin).unwrap();
    let mut t = GradTally::default();
    t.compare(
        &out.d_anchor,
        &numeric_grad(&a, |a| triplet_loss(a, &p, &q, margin).unwrap().loss),
        rel,
        abs,
    );
    t.compare(
        &out.d_positive,
        &numeric_grad(&p, |p| triplet_loss(&a, p, &q, margin).unwrap().loss),
        rel,
        abs,
    );
    t.compare(
        &out.d_negative,
        &numeric_grad(&q, |q| triplet_loss(&a, &p, q, margin).unwrap().loss),
        rel,
        abs,
    );
    t
}

/// Repression layer under `c · REP(s, a)` for both inputs and the weights.
pub fn check_rep(kind: RepressionKind, rng: &mut ChaCha8Rng, rel: f64, abs: f64) -> GradTally {
    let (d, dout) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let s = gaussian_vec(rng, d);
    let a = gaussian_vec(rng, d);
    let rows = kind.weight_rows(d);
    let w = random_matrix(rng, rows, dout);
    let c = gaussian_vec(rng, dout);
    let g = rep_backward(kind, &s, &a, &w, &c).unwrap();
    let mut t = GradTally::default();
    t.compare(
        &g.d_inputs[0],
        &numeric_grad(&s, |s| dot(&c, &rep_forward(kind, s, &a, &w).unwrap())),
        rel,
        abs,
    );
    t.compare(
        &g.d_inputs[1],
        &numeric_grad(&a, |a| dot(&c, &rep_forward(kind, &s, a, &w).unwrap())),
        rel,
        abs,
    );
    let nw = numeric_grad(w.as_slice(), |wv| {
        let w = Matrix::new(rows, dout, wv.to_vec()).unwrap();
        dot(&c, &rep_forward(kind, &s, &a, &w).unwrap())
    });
    t.compare(g.d_weights.as_slice(), &nw, rel, abs);
    t
}

/// Toy network (every width ≤ 8) with a margin wide enough that every
/// triplet hinge stays active for unit embeddings.
pub fn toy_config(kind: RepressionKind, seed: u64) -> RepNetConfig {
    RepNetConfig {
        input_dim: 6,
        base_dims: vec![5],
        d_acs: 4,
        d_sls1: 4,
        d_sls2: 3,
        d_sls3: 3,
        n_colors: 2,
        n_models: 3,
        rep_kind: kind,
        margin: 4.5,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

pub fn toy_dataset(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_colors: 2,
        n_models: 3,
        ids_per_combo: 2,
        samples_per_id: 3,
        feature_dim: 6,
        ..Default::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

/// Smallest |pre-activation| seen by any ReLU for the batch's samples.
pub fn min_relu_margin(net: &RepNet, dataset: &Dataset, batch: &TripletBatch) -> f64 {
    let mut m = f64::INFINITY;
    for t in &batch.triplets {
        for i in [t.anchor, t.positive, t.negative] {
            let tr = net.forward(&dataset.samples[i].features).unwrap();
            for v in tr
                .base_pre
                .iter()
                .flatten()
                .chain(&tr.acs_pre)
                .chain(&tr.sls1_pre)
                .chain(&tr.rep_pre)
            {
                m = m.min(v.abs());
            }
        }
    }
    m
}

/// Finite-difference check of every parameter of the whole network against
/// the batch-averaged total loss.
pub fn check_network(net: &mut RepNet, dataset: &Dataset, batch: &TripletBatch, rel: f64, abs: f64) -> GradTally {
    let (_, grads) = net.loss_and_grads(dataset, batch, Exec::Sequential).unwrap();
    let mut t = GradTally::default();
    let loss = |net: &RepNet| net.loss_and_grads(dataset, batch, Exec::Sequential).unwrap().0.total;
    for k in 0..net.params().layers.len() {
        for i in 0..net.params().layers[k].weights.as_slice().len() {
            let orig = net.params().layers[k].weights.as_slice()[i];
            net.params_mut().layers[k].weights.as_mut_slice()[i] = orig + FD_STEP;
            let up = loss(net);
            net.params_mut().layers[k].weights.as_mut_slice()[i] = orig - FD_STEP;
            let down = loss(net);
            net.params_mut().layers[k].weights.as_mut_slice()[i] = orig;
            t.record(grads.weights[k].as_slice()[i], (up - down) / (2.0 * FD_STEP), rel, abs);
        }
        for i in 0..net.params().layers[k].bias.len() {
            let orig = net.params().layers[k].bias[i];
            net.params_mut().layers[k].bias[i] = orig + FD_STEP;
            let up = loss(net);
            net.params_mut().layers[k].bias[i] = orig - FD_STEP;
            let down = loss(net);
            net.params_mut().layers[k].bias[i] = orig;
            t.record(grads.biases[k][i], (up - down) / (2.0 * FD_STEP), rel, abs);
        }
    }
    t
}

/// Draws a toy network and batch whose ReLU inputs keep clear of zero.
pub fn kink_free_toy(kind: RepressionKind, mut seed: u64) -> (RepNet, Dataset, TripletBatch) {
    use rand::SeedableRng;
    loop {
        let ds = toy_dataset(seed);
        let net = RepNet::new(toy_config(kind, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = TripletSampler::new(&ds).unwrap().sample(4, &mut rng);
        if min_relu_margin(&net, &ds, &batch) > 1e-3 {
            return (net, ds, batch);
        }
        seed += 1000;
    }
}

pub fn oracle_precision_at_k(hits: &[bool], k: usize) -> f64 {
    let mut count = 0usize;
    for i in 0..k {
        if i < hits.len() && hits[i] {
            count += 1;
        }
    }
    count as f64 / k as f64
}

/// `(1/T) Σ_{k=1..N} P(k)·rel(k)` in exact big-rational arithmetic with
/// every `P(k)` recounted from scratch, rounded to f64 once at the end.
pub fn oracle_average_precision(hits: &[bool], t: usize) -> Option<f64> {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::ToPrimitive;
    if t == 0 {
        return None;
    }
    let mut sum = BigRational::from_integer(BigInt::from(0));
    for k in 1..=hits.len() {
        if hits[k - 1] {
            let count = hits[..k].iter().filter(|h| **h).count();
            sum += BigRational::new(BigInt::from(count), BigInt::from(k));
        }
    }
    (sum / BigRational::from_integer(BigInt::from(t))).to_f64()
}

/// Descending-probability order with ties to the lower index.
pub fn oracle_top2(probs: &[f64]) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut out: Vec<u32> = idx.into_iter().take(2).map(|i| i as u32).collect();
    out.dedup();
    out
}

fn sort_and_cut(mut scored: Vec<(usize, f64)>, k: usize) -> RankingList {
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    RankingList { items: scored }
}

/// Filter-then-sort reference for linear search.
pub fn oracle_linear(query: &EmbeddedSample, gallery: &[EmbeddedSample], k: usize) -> RankingList {
    let q = [query.embedding.sls.clone(), query.embedding.acs.clone()].concat();
    let scored = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| g.labels.sample_idx != query.labels.sample_idx)
        .map(|(i, g)| {
            let v = [g.embedding.sls.clone(), g.embedding.acs.clone()].concat();
            let mut s = 0.0;
            for j in 0..v.len() {
                s += (q[j] - v[j]) * (q[j] - v[j]);
            }
            (i, s)
        })
        .collect();
    sort_and_cut(scored, k)
}

/// Filter-then-sort reference for bucket search.
pub fn oracle_bucket(query: &EmbeddedSample, gallery: &[EmbeddedSample], k: usize) -> RankingList {
    let colors = oracle_top2(&query.embedding.color_probs);
    let models = oracle_top2(&query.embedding.model_probs);
    let scored = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| g.labels.sample_idx != query.labels.sample_idx)
        .filter(|(_, g)| {
            colors.contains(&oracle_top2(&g.embedding.color_probs)[0])
                && models.contains(&oracle_top2(&g.embedding.model_probs)[0])
        })
        .map(|(i, g)| {
            let mut s = 0.0;
            for j in 0..g.embedding.sls.len() {
                s += (query.embedding.sls[j] - g.embedding.sls[j]) * (query.embedding.sls[j] - g.embedding.sls[j]);
            }
            (i, s)
        })
        .collect();
    sort_and_cut(scored, k)
}
