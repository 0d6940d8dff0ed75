//! First-order baseline: local minibatch SGD on cross-entropy, then
//! sample-weighted averaging.

use fedacnnl_core::data::Dataset;
use fedacnnl_core::fed::derive_seed;
use fedacnnl_core::model::{Activation, LayerSpec, ModelSpec, WeightSet};
use fedacnnl_core::numerics::{matmul, matmul_tn, Matrix};
use fedacnnl_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::FedAvgConfig;

fn dense_activations(spec: &ModelSpec) -> Result<Vec<Activation>> {
    spec.layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { activation, .. } => Ok(*activation),
            _ => Err(Error::Domain("the SGD baseline supports dense layers only".into())),
        })
        .collect()
}

/// Zeros for a single layer, seeded Glorot-uniform otherwise.
pub fn initial_weights(spec: &ModelSpec, seed: u64) -> WeightSet {
    let layers = spec.trainable_layers();
    if layers.len() == 1 {
        return WeightSet::from_layers(vec![Matrix::zeros(layers[0].in_dim, layers[0].out_dim)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightSet::from_layers(
        layers
            .iter()
            .map(|t| {
                let a = (6.0 / (t.in_dim + t.out_dim) as f64).sqrt();
                Matrix::from_fn(t.in_dim, t.out_dim, |_, _| rng.random_range(-a..a))
            })
            .collect(),
    )
}

fn derivative(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => f64::from(u8::from(z > 0.0)),
        Activation::LeakyRelu { slope } => {
            if z >= 0.0 {
                1.0
            } else {
                slope
            }
        }
        _ => 1.0,
    }
}

/// Mean cross-entropy of softmax outputs `p` against one-hot `y`.
fn cross_entropy(p: &Matrix, y: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (pv, yv) in p.row(i).iter().zip(y.row(i)) {
            if *yv > 0.0 {
                total -= yv * pv.max(1e-300).ln();
            }
        }
    }
    total / p.rows().max(1) as f64
}

/// One SGD step on the batch; returns the loss before the update.
pub fn sgd_step(weights: &mut [Matrix], acts: &[Activation], x: &Matrix, y: &Matrix, lr: f64) -> Result<f64> {
    let depth = weights.len();
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(depth);
    for (l, w) in weights.iter().enumerate() {
        let z = matmul(&inputs[l], w)?;
        let mut a = z.clone();
        let act = if l + 1 < depth { acts[l] } else { Activation::Softmax };
        act.apply(&mut a);
        inputs.push(a);
        pre.push(z);
    }
    let p = &inputs[depth];
    let loss = cross_entropy(p, y);
    let b = x.rows() as f64;
    let mut delta = p.sub(y)?.scaled(1.0 / b);
    for l in (0..depth).rev() {
        let grad = matmul_tn(&inputs[l], &delta)?;
        if l > 0 {
            let mut back = matmul(&delta, &weights[l].transpose())?;
            for (v, z) in back.as_mut_slice().iter_mut().zip(pre[l - 1].as_slice()) {
                *v *= derivative(acts[l - 1], *z);
            }
            delta = back;
        }
        let step = grad.scaled(-lr);
        weights[l].add_assign(&step)?;
    }
    Ok(loss)
}

/// Mean cross-entropy of `weights` over `data`.
pub fn dataset_loss(weights: &WeightSet, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    let p = fedacnnl_core::model::forward(&data.features, weights, spec)?;
    Ok(cross_entropy(&p, &data.labels))
}

#[derive(Clone, Debug)]
pub struct FedAvgRun {
    pub weights: WeightSet,
    /// Training loss over all clients after each round.
    pub losses: Vec<f64>,
}

/// Runs `cfg.rounds` rounds; `observe(round, model)` sees the averaged model
/// after each one.
pub fn run_fedavg(
    clients: &[Dataset],
    spec: &ModelSpec,
    cfg: &FedAvgConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &WeightSet) -> Result<()>,
) -> Result<FedAvgRun> {
    let acts = dense_activations(spec)?;
    if clients.is_empty() {
        return Err(Error::EmptySet);
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Domain("learning rate and batch size must be positive".into()));
    }
    let mut global: Vec<Matrix> = initial_weights(spec, seed).matrices()?.into_iter().cloned().collect();
    let total: usize = clients.iter().map(Dataset::len).sum();
    let union = Dataset::concat(&clients.iter().collect::<Vec<_>>())?;
    let mut losses = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let mut sum: Vec<Matrix> = global.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        for (c, data) in clients.iter().enumerate() {
            let mut local = global.clone();
            for epoch in 0..cfg.local_epochs {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &[round as u64, c as u64, epoch as u64],
                )));
                for chunk in order.chunks(cfg.batch_size) {
                    let x = data.features.select_rows(chunk);
                    let y = data.labels.select_rows(chunk);
                    sgd_step(&mut local, &acts, &x, &y, cfg.lr)?;
                }
            }
            let share = data.len() as f64 / total as f64;
            for (s, w) in sum.iter_mut().zip(&local) {
                s.add_assign(&w.scaled(share))?;
            }
        }
        global = sum;
        for w in &global {
            w.ensure_finite("averaged weights")?;
        }
        let model = WeightSet::from_layers(global.clone());
        losses.push(dataset_loss(&model, spec, &union)?);
        observe(round, &model)?;
    }
    Ok(FedAvgRun {
        weights: WeightSet::from_layers(global),
        losses,
    })
}

/// Multiply-adds per sample for one SGD step: a forward pass plus two
/// backward products per layer.
pub fn sgd_flops_per_sample(spec: &ModelSpec) -> f64 {
    spec.trainable_layers()
        .iter()
        .map(|t| 3 * t.in_dim * t.out_dim)
        .sum::<usize>() as f64
}
