//! Personalized federated training: group clients by their encoded label
//! distributions, train one meta-model per group, then let every client
//! pull its group's model toward its own data, layer by layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acnnl::layer_stats;
use crate::encoding::{encode_distribution, select_encoder, EncodingSet};
use crate::error::{Error, Result};
use crate::fed::{run_grouped, ClientState, FedConfig, FedRun, RoundClock};
use crate::model::{ModelSpec, WeightSet};
use crate::numerics::{solve_regularized_ls, LayerStats, Matrix};

const MAX_LLOYD_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// Members of each group, as indices into the clustered points, ascending.
    pub groups: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster SSE after each Lloyd iteration.
    pub sse_trace: Vec<f64>,
}

impl GroupAssignment {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    /// Group index of every point.
    pub fn labels(&self) -> Vec<usize> {
        let n = self.groups.iter().map(Vec::len).sum();
        let mut out = vec![0; n];
        for (k, g) in self.groups.iter().enumerate() {
            for &i in g {
                out[i] = k;
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Seeded k-means++ then Lloyd iterations under Euclidean distance.
///
/// An empty cluster takes the point farthest from its own centroid among
/// clusters that can spare one.
pub fn cluster_clients(points: &[Vec<f64>], k: usize, seed: u64) -> Result<GroupAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::domain(format!("cannot form {k} groups from {n} clients")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("points differ in dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite clustering feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assign = vec![0; n];
    let mut sse_trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest(p, &centroids).0;
        }
        for j in 0..k {
            if assign.contains(&j) {
                continue;
            }
            let mut sizes = vec![0usize; k];
            for &a in &assign {
                sizes[a] += 1;
            }
            let donor = (0..n)
                .filter(|&i| sizes[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centroids[assign[a]]);
                    let db = sq_dist(&points[b], &centroids[assign[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("k <= n leaves a donor");
            assign[donor] = j;
            centroids[j] = points[donor].clone();
        }

        let mut next = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (acc, v) in next[assign[i]].iter_mut().zip(p) {
                *acc += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            for v in &mut next[j] {
                *v /= counts[j] as f64;
            }
            shift = shift.max(sq_dist(&next[j], &centroids[j]).sqrt());
        }
        centroids = next;
        sse_trace.push(points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum());
        if shift < SHIFT_TOL {
            break;
        }
    }

    let mut groups = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        groups[a].push(i);
    }
    Ok(GroupAssignment {
        groups,
        centroids,
        sse_trace,
    })
}

/// The encoder used to summarize label distributions. Models without hidden
/// layers have no encoding matrices, so the class frequencies are used as is.
pub fn distribution_encoder(enc: &EncodingSet, classes: usize) -> Matrix {
    match select_encoder(enc) {
        Ok(q) => q.clone(),
        Err(_) => Matrix::identity(classes),
    }
}

/// `(G + εI)⁻¹ (H + εM)`.
pub fn personalize_layer(stats: &LayerStats, epsilon: f64, meta: &Matrix) -> Result<Matrix> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if meta.shape() != stats.cross.shape() {
        return Err(Error::shape(format!(
            "meta weights are {:?}, layer moments imply {:?}",
            meta.shape(),
            stats.cross.shape()
        )));
    }
    let mut rhs = meta.scaled(epsilon);
    rhs.add_assign(&stats.cross)?;
    solve_regularized_ls(&stats.gram, &rhs, epsilon)
}

/// Personalizes every layer in order, forwarding through the layers already
/// personalized.
pub fn personalize_client(
    state: &ClientState,
    meta: &WeightSet,
    spec: &ModelSpec,
    enc: &EncodingSet,
    epsilon: f64,
) -> Result<WeightSet> {
    let order: Vec<usize> = (0..state.data.len()).collect();
    let mut own = WeightSet::empty(spec);
    for layer in 0..spec.depth() {
        let (stats, _) = layer_stats(&state.data, &order, state.batch_size, &own, spec, enc, layer)?;
        own.install(spec, layer, personalize_layer(&stats, epsilon, meta.get(layer)?)?)?;
    }
    Ok(own)
}

/// Group-wise meta-models; `groups` lists client ids.
pub fn train_group_meta(
    clients: &mut [ClientState],
    groups: &[Vec<usize>],
    spec: &ModelSpec,
    enc: &EncodingSet,
    cfg: &FedConfig,
    clock: &dyn RoundClock,
) -> Result<FedRun> {
    run_grouped(clients, groups, spec, enc, cfg, clock)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfedConfig {
    pub fed: FedConfig,
    pub epsilon: f64,
    pub k: usize,
    pub cluster_seed: u64,
}

#[derive(Clone, Debug)]
pub struct PfedRun {
    /// Groups as client ids.
    pub groups: Vec<Vec<usize>>,
    pub assignment: GroupAssignment,
    pub meta: FedRun,
    /// One model per client, in the order of the input slice.
    pub personalized: Vec<WeightSet>,
}

impl PfedRun {
    /// Group index of each client id.
    pub fn group_of(&self, client_id: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&client_id))
    }
}

pub fn run_pfedacnnl(
    clients: &mut [ClientState],
    spec: &ModelSpec,
    enc: &EncodingSet,
    cfg: &PfedConfig,
    clock: &dyn RoundClock,
) -> Result<PfedRun> {
    let q = distribution_encoder(enc, spec.classes());
    let h: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| encode_distribution(&c.data.labels, &q))
        .collect::<Result<_>>()?;
    let assignment = cluster_clients(&h, cfg.k, cfg.cluster_seed)?;
    let groups: Vec<Vec<usize>> = assignment
        .groups
        .iter()
        .map(|g| {
            let mut ids: Vec<usize> = g.iter().map(|&i| clients[i].id).collect();
            ids.sort_unstable();
            ids
        })
        .collect();

    let meta = train_group_meta(clients, &groups, spec, enc, &cfg.fed, clock)?;
    let labels = assignment.labels();
    let personalize = |(i, c): (usize, &ClientState)| {
        personalize_client(c, &meta.group_weights[labels[i]], spec, enc, cfg.epsilon)
    };
    let personalized: Vec<WeightSet> = if cfg.fed.parallel {
        clients.par_iter().enumerate().map(personalize).collect::<Result<_>>()?
    } else {
        clients.iter().enumerate().map(personalize).collect::<Result<_>>()?
    };
    Ok(PfedRun {
        groups,
        assignment,
        meta,
        personalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acnnl::train_acnnl;
    use crate::data::Dataset;
    use crate::encoding::make_encoding_set;
    use crate::fed::{run_fedacnnl, NullClock};
    use crate::numerics::relative_frobenius;
    use crate::numerics::tests::{dense_inverse, naive_matmul, random_matrix, random_spd};
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..per {
            for (c, ctr) in centers.iter().enumerate() {
                pts.push(vec![ctr[0] + noise.sample(&mut rng), ctr[1] + noise.sample(&mut rng)]);
                truth.push(c);
            }
        }
        (pts, truth)
    }

    fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let dim = points[0].len();
        let mut total = 0.0;
        for j in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        total
    }

    /// Canonical form: relabel groups by first appearance.
    fn canon(labels: &[usize]) -> Vec<usize> {
        let mut map = Vec::new();
        labels
            .iter()
            .map(|&l| match map.iter().position(|&m| m == l) {
                Some(p) => p,
                None => {
                    map.push(l);
                    map.len() - 1
                }
            })
            .collect()
    }

    /// Tries all k^n labelings and keeps the lowest SSE.
    fn exhaustive_best(points: &[Vec<f64>], k: usize) -> Vec<usize> {
        let n = points.len();
        let mut labels = vec![0; n];
        let mut best = (f64::INFINITY, labels.clone());
        loop {
            let s = sse(points, &labels, k);
            if s < best.0 {
                best = (s, labels.clone());
            }
            let mut i = 0;
            loop {
                if i == n {
                    return canon(&best.1);
                }
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn planted_blobs_match_exhaustive_oracle() {
        let (pts, truth) = blobs(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]], 4, 0.01, 3);
        let got = cluster_clients(&pts, 3, 11).unwrap();
        assert_eq!(canon(&got.labels()), canon(&truth));
        assert_eq!(canon(&got.labels()), exhaustive_best(&pts, 3));
    }

    #[test]
    fn degenerate_cluster_counts() {
        let same = vec![vec![1.0, 2.0]; 5];
        let one = cluster_clients(&same, 1, 0).unwrap();
        assert_eq!(one.groups, vec![vec![0, 1, 2, 3, 4]]);

        let distinct: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * i as f64, 1.0]).collect();
        let singles = cluster_clients(&distinct, 6, 4).unwrap();
        assert!(singles.groups.iter().all(|g| g.len() == 1));

        let dup = vec![vec![0.0]; 4];
        let repaired = cluster_clients(&dup, 3, 1).unwrap();
        assert!(repaired.groups.iter().all(|g| !g.is_empty()));

        assert!(cluster_clients(&same, 6, 0).is_err());
        assert!(cluster_clients(&same, 0, 0).is_err());
    }

    #[test]
    fn lloyd_sse_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
            let a = cluster_clients(&pts, 5, trial).unwrap();
            assert!(a.sse_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", a.sse_trace);
            assert_eq!(a, cluster_clients(&pts, 5, trial).unwrap());
        }
    }

    #[test]
    fn personalize_layer_extremes() {
        let meta = random_matrix(4, 3, 1);
        let zero = LayerStats::zeros(4, 3);
        assert_eq!(personalize_layer(&zero, 2.5, &meta).unwrap(), meta);

        let gram = random_spd(4, 2);
        let fit = LayerStats {
            cross: naive_matmul(&gram, &meta),
            gram,
        };
        assert!(relative_frobenius(&personalize_layer(&fit, 7.0, &meta).unwrap(), &meta).unwrap() < 1e-9);

        assert!(personalize_layer(&zero, 0.0, &meta).is_err());
        assert!(personalize_layer(&zero, 1.0, &random_matrix(3, 3, 0)).is_err());
    }

    #[test]
    fn personalize_layer_sweep_against_oracle() {
        for seed in 0..10 {
            let gram = random_spd(5, seed);
            let stats = LayerStats {
                gram: gram.clone(),
                cross: random_matrix(5, 2, seed + 100),
            };
            let meta = random_matrix(5, 2, seed + 200);
            let mut last = f64::INFINITY;
            for eps in [1.0, 100.0, 1e6] {
                let w = personalize_layer(&stats, eps, &meta).unwrap();
                let mut a = gram.clone();
                for i in 0..5 {
                    a.set(i, i, a.get(i, i) + eps);
                }
                let mut rhs = meta.scaled(eps);
                rhs.add_assign(&stats.cross).unwrap();
                let oracle = naive_matmul(&dense_inverse(&a), &rhs);
                for (x, y) in w.as_slice().iter().zip(oracle.as_slice()) {
                    assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()));
                }
                let dist = w.sub(&meta).unwrap().frobenius_norm();
                assert!(dist <= last);
                last = dist;
            }
        }
    }

    fn toy(n: usize, classes: &[usize], seed: u64) -> Dataset {
        let x = random_matrix(n, 4, seed);
        let labels: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
        Dataset::from_classes(x, &labels, 4).unwrap()
    }

    fn make_clients(sets: Vec<Dataset>, spec: &ModelSpec) -> Vec<ClientState> {
        sets.into_iter()
            .enumerate()
            .map(|(i, d)| ClientState::new(i, d, spec, 8, 64).unwrap())
            .collect()
    }

    fn cfg(k: usize, epsilon: f64) -> PfedConfig {
        PfedConfig {
            fed: FedConfig::new(0.5),
            epsilon,
            k,
            cluster_seed: 3,
        }
    }

    #[test]
    fn one_group_with_huge_epsilon_is_fedacnnl() {
        let spec = ModelSpec::mlp(4, &[5], 4);
        let enc = make_encoding_set(2, &spec);
        let sets: Vec<Dataset> = (0..4).map(|i| toy(20, &[i, (i + 1) % 4], i as u64)).collect();
        let mut a = make_clients(sets.clone(), &spec);
        let mut b = make_clients(sets, &spec);
        let fed = run_fedacnnl(&mut a, &spec, &enc, &FedConfig::new(0.5), &NullClock).unwrap();
        let p = run_pfedacnnl(&mut b, &spec, &enc, &cfg(1, 1e12), &NullClock).unwrap();
        assert_eq!(p.meta.global(), fed.global());
        for w in &p.personalized {
            for l in 0..2 {
                assert!(relative_frobenius(w.get(l).unwrap(), fed.global().get(l).unwrap()).unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn group_meta_equals_group_union_training() {
        let spec = ModelSpec::mlp(4, &[5], 4);
        let enc = make_encoding_set(2, &spec);
        let sets: Vec<Dataset> = (0..6).map(|i| toy(15, &[i % 4], i as u64 + 10)).collect();
        let groups = vec![vec![0, 2, 4], vec![1, 3, 5]];
        let mut cs = make_clients(sets.clone(), &spec);
        let run = train_group_meta(&mut cs, &groups, &spec, &enc, &FedConfig::new(0.5), &NullClock).unwrap();
        for (k, g) in groups.iter().enumerate() {
            let parts: Vec<&Dataset> = g.iter().map(|&i| &sets[i]).collect();
            let union = Dataset::concat(&parts).unwrap();
            let central = train_acnnl(&union, &spec, &enc, 0.5, 7).unwrap();
            for l in 0..2 {
                let d = relative_frobenius(run.group_weights[k].get(l).unwrap(), central.get(l).unwrap()).unwrap();
                assert!(d < 1e-9);
            }
        }
        // dropping group 1 leaves group 0 untouched
        let mut only0 = make_clients(vec![sets[0].clone(), sets[2].clone(), sets[4].clone()], &spec);
        for (c, id) in only0.iter_mut().zip([0, 2, 4]) {
            c.id = id;
        }
        let solo = train_group_meta(&mut only0, &groups[..1], &spec, &enc, &FedConfig::new(0.5), &NullClock).unwrap();
        for l in 0..2 {
            let d = relative_frobenius(solo.group_weights[0].get(l).unwrap(), run.group_weights[0].get(l).unwrap()).unwrap();
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn group_meta_ignores_within_group_partition() {
        let spec = ModelSpec::mlp(4, &[5], 4);
        let enc = make_encoding_set(2, &spec);
        let a = toy(30, &[0, 1], 21);
        let b = toy(18, &[2, 3], 22);
        let groups = vec![vec![0, 1], vec![2]];
        let split = |d: &Dataset, at: usize| (d.subset(&(0..at).collect::<Vec<_>>()), d.subset(&(at..d.len()).collect::<Vec<_>>()));
        let mut metas = Vec::new();
        for at in [3, 15, 27] {
            let (x, y) = split(&a, at);
            let mut cs = make_clients(vec![x, y, b.clone()], &spec);
            let run = train_group_meta(&mut cs, &groups, &spec, &enc, &FedConfig::new(0.5), &NullClock).unwrap();
            metas.push(run.group_weights);
        }
        for m in &metas[1..] {
            for k in 0..2 {
                for l in 0..2 {
                    let d = relative_frobenius(m[k].get(l).unwrap(), metas[0][k].get(l).unwrap()).unwrap();
                    assert!(d < 1e-9);
                }
            }
        }
    }

    #[test]
    fn duplicate_clients_personalize_identically() {
        let spec = ModelSpec::mlp(4, &[5], 4);
        let enc = make_encoding_set(2, &spec);
        let d = toy(12, &[0, 1], 1);
        let mut sets = vec![d.clone(), d];
        sets.extend((2..5).map(|i| toy(12, &[2, 3], i)));
        let mut cs = make_clients(sets, &spec);
        let run = run_pfedacnnl(&mut cs, &spec, &enc, &cfg(2, 10.0), &NullClock).unwrap();
        assert_eq!(run.group_of(0), run.group_of(1));
        assert_eq!(run.personalized[0], run.personalized[1]);
        let again = run_pfedacnnl(&mut make_clients(cs.iter().map(|c| c.data.clone()).collect(), &spec), &spec, &enc, &cfg(2, 10.0), &NullClock).unwrap();
        assert_eq!(again.personalized, run.personalized);
        assert_eq!(again.groups, run.groups);
    }

    #[test]
    fn single_sample_client_is_finite() {
        let spec = ModelSpec::mlp(4, &[5], 4);
        let enc = make_encoding_set(2, &spec);
        let meta = WeightSet::random(&spec, 1);
        let c = ClientState::new(0, toy(1, &[3], 4), &spec, 1, 1).unwrap();
        let w = personalize_client(&c, &meta, &spec, &enc, 2500.0).unwrap();
        assert!(w.matrices().unwrap().iter().all(|m| m.is_finite()));
    }

    #[test]
    fn logistic_uses_class_frequencies() {
        let spec = ModelSpec::logistic(4, 4);
        let enc = make_encoding_set(0, &spec);
        assert_eq!(distribution_encoder(&enc, 4), Matrix::identity(4));
        let sets: Vec<Dataset> = (0..4).map(|i| toy(10, &[i / 2], i as u64)).collect();
        let mut cs = make_clients(sets, &spec);
        let run = run_pfedacnnl(&mut cs, &spec, &enc, &cfg(2, 5.0), &NullClock).unwrap();
        assert_eq!(run.group_of(0), run.group_of(1));
        assert_eq!(run.group_of(2), run.group_of(3));
        assert_ne!(run.group_of(0), run.group_of(2));
        assert_eq!(run.personalized.len(), 4);
    }
}
