//! Independent oracles and property checks shared by the integration tests
//! and the acceptance runner. Each check returns a one-line summary on
//! success and a description of the first violation on failure.
#![allow(dead_code)]

use std::collections::BTreeMap;

use edgegnn::gnn::{
    default_registry, gcn_layer, gcn_normalize, permute_rows, permute_square, sage_round, Activation, GcnKernel,
    GraphTopology, GCN_OP,
};
use edgegnn::ir::{deserialize, serialize, ExecError, ExecMode, ModelGraph, OperatorRegistry, Session, TensorMap};
use edgegnn::models::{ArchKind, ArchSpec, NormStats, Params, TrainedModel, INPUT, OUTPUT};
use edgegnn::par::Parallelism;
use edgegnn::pipeline::{capacity_score, capacity_rmse, window, StationSeries};
use edgegnn::training::{backward, forward_loss, init_params};
use edgegnn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Random symmetric binary adjacency with zero diagonal.
pub fn random_adjacency(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    a
}

/// Random topology in which every node has at least one neighbor (n >= 2).
pub fn random_connected(n: usize, rng: &mut ChaCha8Rng) -> GraphTopology {
    let mut a = random_adjacency(n, 0.4, rng);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for w in order.windows(2) {
        a[w[0]][w[1]] = 1.0;
        a[w[1]][w[0]] = 1.0;
    }
    GraphTopology::new(Tensor::from_rows(&a)).unwrap()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, p, q) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; q]; n];
    for i in 0..n {
        for j in 0..q {
            let mut s = 0.0;
            for k in 0..p {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `D^-1/2 (A + I) D^-1/2` as two explicit dense products.
pub fn oracle_gcn_normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut tilde = a.to_vec();
    for (i, row) in tilde.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        d[i][i] = 1.0 / tilde[i].iter().sum::<f64>().sqrt();
    }
    mat_mul(&mat_mul(&d, &tilde), &d)
}

pub fn oracle_gcn_layer(a_hat: &[Vec<f64>], h: &[Vec<f64>], w: &[Vec<f64>], relu: bool) -> Vec<Vec<f64>> {
    let mut out = mat_mul(&mat_mul(a_hat, h), w);
    if relu {
        out.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
    }
    out
}

/// Per-node loop: mean of neighbor rows, concatenation, dot product per
/// output column.
pub fn oracle_sage_round(h: &[Vec<f64>], lists: &[Vec<usize>], w: &[Vec<f64>], relu: bool) -> Vec<Vec<f64>> {
    let d = h[0].len();
    let d_out = w[0].len();
    let mut out = Vec::new();
    for (v, list) in lists.iter().enumerate() {
        let mut agg = vec![0.0; d];
        for &u in list {
            for j in 0..d {
                agg[j] += h[u][j];
            }
        }
        for a in agg.iter_mut() {
            *a /= list.len() as f64;
        }
        let z: Vec<f64> = h[v].iter().chain(agg.iter()).copied().collect();
        let mut row = vec![0.0; d_out];
        for (c, r) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, zj) in z.iter().enumerate() {
                s += zj * w[j][c];
            }
            *r = if relu { s.max(0.0) } else { s };
        }
        out.push(row);
    }
    out
}

fn max_diff(a: &[Vec<f64>], b: &Tensor<f64>) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn adjacency_lists(a: &[Vec<f64>]) -> Vec<Vec<usize>> {
    a.iter()
        .map(|row| row.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(j, _)| j).collect())
        .collect()
}

/// GCN normalization and layer against dense products, SAGE against the
/// per-node loop, on 100 random graphs with N <= 8.
pub fn oracle_equivalence(seed: u64) -> Check {
    let mut rng = rng(seed);
    let (mut worst_norm, mut worst_gcn) = (0.0f64, 0.0f64);
    for trial in 0..100 {
        let n = rng.random_range(1..=8);
        let a = random_adjacency(n, rng.random_range(0.1..0.9), &mut rng);
        let a_hat = gcn_normalize(&Tensor::from_rows(&a)).map_err(|e| e.to_string())?;
        let oracle_a = oracle_gcn_normalize(&a);
        worst_norm = worst_norm.max(max_diff(&oracle_a, &a_hat));

        let (d, d_out) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let h = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let w = random_tensor(&[d, d_out], -1.0, 1.0, &mut rng);
        for (act, relu) in [(Activation::Relu, true), (Activation::None, false)] {
            let got = gcn_layer(&a_hat, &h, &w, act).map_err(|e| e.to_string())?;
            let want = oracle_gcn_layer(&to_rows(&a_hat), &to_rows(&h), &to_rows(&w), relu);
            worst_gcn = worst_gcn.max(max_diff(&want, &got));
        }

        if n >= 2 {
            let topo = random_connected(n, &mut rng);
            let lists = adjacency_lists(&to_rows(topo.adjacency()));
            let neighbors = topo.neighbors();
            let w2 = random_tensor(&[2 * d, d_out], -1.0, 1.0, &mut rng);
            for (act, relu) in [(Activation::Relu, true), (Activation::None, false)] {
                let got = sage_round(&h, &w2, &neighbors, act).map_err(|e| e.to_string())?;
                let want = oracle_sage_round(&to_rows(&h), &lists, &to_rows(&w2), relu);
                let identical = want.iter().flatten().zip(got.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                if !identical {
                    return Err(format!("trial {trial}: sage_round differs from per-node oracle"));
                }
            }
        }
    }
    if worst_norm >= 1e-12 || worst_gcn >= 1e-12 {
        return Err(format!("max deviation: normalize {worst_norm:e}, layer {worst_gcn:e} (limit 1e-12)"));
    }
    Ok(format!(
        "100 graphs: normalize {worst_norm:.1e}, gcn_layer {worst_gcn:.1e}, sage_round bit-identical"
    ))
}

fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// `f(P·A·Pᵀ, P·H) == P·f(A, H)` for both layer types.
pub fn permutation_equivariance(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let (d, d_out) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let topo = random_connected(n, &mut rng);
        let perm = random_permutation(n, &mut rng);
        let h = random_tensor(&[n, d], -2.0, 2.0, &mut rng);
        let ph = permute_rows(&h, &perm);

        let a_hat = topo.normalized();
        let w = random_tensor(&[d, d_out], -1.0, 1.0, &mut rng);
        let base = gcn_layer(&a_hat, &h, &w, Activation::Relu).unwrap();
        let moved = gcn_layer(&permute_square(&a_hat, &perm), &ph, &w, Activation::Relu).unwrap();
        worst = worst.max(permute_rows(&base, &perm).max_abs_diff(&moved).unwrap());

        let permuted_topo = GraphTopology::new(permute_square(topo.adjacency(), &perm)).unwrap();
        let w2 = random_tensor(&[2 * d, d_out], -1.0, 1.0, &mut rng);
        let base = sage_round(&h, &w2, &topo.neighbors(), Activation::Relu).unwrap();
        let moved = sage_round(&ph, &w2, &permuted_topo.neighbors(), Activation::Relu).unwrap();
        worst = worst.max(permute_rows(&base, &perm).max_abs_diff(&moved).unwrap());
    }
    if worst < 1e-9 {
        Ok(format!("200 random graphs, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:e} exceeds 1e-9"))
    }
}

fn two_rounds(kind: ArchKind, topo: &GraphTopology, h: &Tensor<f64>, ws: &[Tensor<f64>; 2]) -> Tensor<f64> {
    match kind {
        ArchKind::Gcn2 => {
            let a = topo.normalized();
            let h1 = gcn_layer(&a, h, &ws[0], Activation::Relu).unwrap();
            gcn_layer(&a, &h1, &ws[1], Activation::Relu).unwrap()
        }
        ArchKind::Sage2 => {
            let nb = topo.neighbors();
            let h1 = sage_round(h, &ws[0], &nb, Activation::Relu).unwrap();
            sage_round(&h1, &ws[1], &nb, Activation::Relu).unwrap()
        }
    }
}

/// On a path graph, two rounds see exactly the 2-hop neighborhood.
pub fn k_hop_locality(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut checked = 0usize;
    for _ in 0..50 {
        let n = rng.random_range(4..=10);
        let d = rng.random_range(1..=4);
        let topo = GraphTopology::path(n);
        for kind in [ArchKind::Gcn2, ArchKind::Sage2] {
            let fan = if kind == ArchKind::Sage2 { 2 } else { 1 };
            let ws = [
                random_tensor(&[fan * d, d], 0.1, 1.0, &mut rng),
                random_tensor(&[fan * d, d], 0.1, 1.0, &mut rng),
            ];
            let h = random_tensor(&[n, d], 0.1, 1.0, &mut rng);
            let base = two_rounds(kind, &topo, &h, &ws);
            let target = rng.random_range(0..n);
            for far in 0..n {
                let mut data = h.data().to_vec();
                data[far * d..(far + 1) * d].iter_mut().for_each(|v| *v += 1.0);
                let changed = two_rounds(kind, &topo, &Tensor::new(vec![n, d], data).unwrap(), &ws);
                let same = base.row(target) == changed.row(target);
                let distance = far.abs_diff(target);
                if distance > 2 && !same {
                    return Err(format!("{kind}: node {far} at distance {distance} changed node {target}"));
                }
                if distance <= 2 && same {
                    return Err(format!("{kind}: node {far} at distance {distance} had no effect on {target}"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} perturbations on path graphs respect the 2-hop receptive field"))
}

/// Scaling `y`, `ŷ` and `Cap` by `c` leaves both outputs unchanged.
pub fn metric_scale_consistency(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..100);
        let cap = rng.random_range(1.0..20.0);
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..cap)).collect();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..cap)).collect();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let base = capacity_score(&y, &p, cap).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
        let scaled = capacity_score(&ys, &ps, cap * c).unwrap();
        worst = worst
            .max((base.accuracy_pct - scaled.accuracy_pct).abs())
            .max((base.error_pct - scaled.error_pct).abs());
    }
    if worst < 1e-12 {
        Ok(format!("1000 random scalings, max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:e} exceeds 1e-12"))
    }
}

/// `accuracy + error == 100` exactly and `error == 100·rmse/Cap` within 1e-12.
pub fn metric_complement(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let len = rng.random_range(1..100);
        let cap = rng.random_range(1.0..20.0);
        let y: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..cap)).collect();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..cap)).collect();
        let m = capacity_score(&y, &p, cap).unwrap();
        if m.accuracy_pct + m.error_pct != 100.0 || m.error_pct < 0.0 {
            return Err(format!("trial {trial}: {m:?}"));
        }
        let rmse = capacity_rmse(&y, &p, cap).unwrap();
        worst = worst.max((m.error_pct - 100.0 * rmse).abs());
    }
    if worst < 1e-12 {
        Ok(format!("1000 random cases sum to exactly 100, |error - 100·rmse| <= {worst:.1e}"))
    } else {
        Err(format!("error_pct deviates from 100·rmse by {worst:e}"))
    }
}

pub fn station(id: &str, power: Vec<f64>) -> StationSeries {
    let start = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let len = power.len();
    StationSeries {
        station_id: id.into(),
        capacity_kw: 100.0,
        timestamps: (0..len).map(|i| start + chrono::TimeDelta::minutes(15 * i as i64)).collect(),
        imputed: vec![false; len],
        power,
    }
}

/// Sample count is `max(0, T - (k-1) - h)` and every window reads back
/// from the source series.
pub fn windowing_count(seed: u64) -> Check {
    let mut rng = rng(seed);
    for trial in 0..300 {
        let t_len = rng.random_range(1..60);
        let k = rng.random_range(1..12);
        let h = rng.random_range(1..12);
        let n = rng.random_range(1..4);
        let series: Vec<StationSeries> = (0..n)
            .map(|i| station(&format!("s{i}"), (0..t_len).map(|_| rng.random_range(0.0..100.0)).collect()))
            .collect();
        let ds = window(&series, k, h).map_err(|e| e.to_string())?;
        let expected = (t_len as i64 - (k as i64 - 1) - h as i64).max(0) as usize;
        if ds.len() != expected {
            return Err(format!("trial {trial}: T={t_len} k={k} h={h} gave {} samples, expected {expected}", ds.len()));
        }
        for s in &ds.samples {
            for (i, st) in series.iter().enumerate() {
                for j in 0..k {
                    if s.x.get2(i, j).to_bits() != st.power[s.anchor - j].to_bits() {
                        return Err(format!("trial {trial}: X[{i}][{j}] at anchor {} does not read back", s.anchor));
                    }
                }
                if s.y.data()[i].to_bits() != st.power[s.anchor + h].to_bits() {
                    return Err(format!("trial {trial}: y[{i}] at anchor {} does not read back", s.anchor));
                }
            }
        }
    }
    Ok("300 random (T, k, h, n): count formula holds and windows read back exactly".into())
}

/// Analytic gradients against central differences (step 1e-5) on a random
/// n=3, k=4, d=5, B=2 instance. Returns the worst relative error.
pub fn gradient_check(kind: ArchKind, seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let spec = ArchSpec::new(kind, 4, 1, 5, GraphTopology::fully_connected(3)).unwrap();
    let params = init_params(&spec, &mut rng);
    // non-zero bias so the head gradient is not trivially symmetric
    let mut params = params;
    params.set("head.bias", random_tensor(&[1, 3], -0.5, 0.5, &mut rng));
    let xs: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&[3, 4], -1.0, 1.0, &mut rng)).collect();
    let ys: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&[1, 3], -1.0, 1.0, &mut rng)).collect();
    let (_, cache) = forward_loss(&spec, &params, &xs, &ys).map_err(|e| e.to_string())?;
    let grads = backward(&spec, &params, &cache).map_err(|e| e.to_string())?;

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
    for name in names {
        let original = params.get(&name).clone();
        for idx in 0..original.len() {
            let eval = |delta: f64| {
                let mut data = original.data().to_vec();
                data[idx] += delta;
                let mut p = params.clone();
                p.set(&name, Tensor::new(original.shape().to_vec(), data).unwrap());
                forward_loss(&spec, &p, &xs, &ys).unwrap().0
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let analytic = grads.get(&name).data()[idx];
            if analytic.abs() + numeric.abs() > 1e-8 {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                if rel >= 1e-4 {
                    return Err(format!(
                        "{kind} {name}[{idx}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
                    ));
                }
                worst = worst.max(rel);
                coords += 1;
            }
        }
    }
    if coords == 0 {
        return Err(format!("{kind}: every gradient coordinate vanished"));
    }
    Ok(worst)
}

/// A random exported model (either architecture, random sizes, weights and
/// normalization).
pub fn random_model(rng: &mut ChaCha8Rng) -> (TrainedModel, ModelGraph) {
    let kind = if rng.random_bool(0.5) { ArchKind::Gcn2 } else { ArchKind::Sage2 };
    let n = rng.random_range(2..=5);
    let topo = random_connected(n, rng);
    let spec = ArchSpec::new(kind, rng.random_range(1..=8), rng.random_range(1..=96), rng.random_range(1..=8), topo)
        .unwrap();
    let params = init_params(&spec, rng);
    let norm = NormStats {
        mean: (0..n).map(|_| rng.random_range(0.0..5.0)).collect(),
        scale: (0..n).map(|_| rng.random_range(0.1..3.0)).collect(),
    };
    let caps = (0..n).map(|_| rng.random_range(1.0..20.0)).collect();
    let model = TrainedModel::new(spec, params, norm, caps).unwrap();
    let graph = model.to_graph().unwrap();
    (model, graph)
}

pub fn random_feed(graph: &ModelGraph, batch: usize, rng: &mut ChaCha8Rng) -> TensorMap {
    let shape = &graph.inputs[0].shape;
    let mut dims = vec![batch];
    dims.extend(shape.iter().skip(1).map(|d| match d {
        edgegnn::ir::Dim::Fixed(v) => *v,
        edgegnn::ir::Dim::Batch => batch,
    }));
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    TensorMap::from([(INPUT.to_owned(), Tensor::new(dims, data).unwrap())])
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// 1000 random models: serialize→deserialize→serialize is the identity on
/// bytes and execution before/after is bit-identical.
pub fn serialization_round_trip(seed: u64) -> Check {
    let mut rng = rng(seed);
    let registry = default_registry();
    for trial in 0..1000 {
        let (_, graph) = random_model(&mut rng);
        let bytes = serialize(&graph).map_err(|e| format!("trial {trial}: {e}"))?;
        let back = deserialize(&bytes).map_err(|e| format!("trial {trial}: {e}"))?;
        if back != graph {
            return Err(format!("trial {trial}: decoded graph differs"));
        }
        if serialize(&back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("trial {trial}: re-serialized bytes differ"));
        }
        let feeds = random_feed(&graph, rng.random_range(1..=4), &mut rng);
        let before = Session::new(&graph, &registry).unwrap().run(&feeds, ExecMode::Batched).unwrap();
        let after = Session::new(&back, &registry).unwrap().run(&feeds, ExecMode::Batched).unwrap();
        if bits(&before[OUTPUT]) != bits(&after[OUTPUT]) {
            return Err(format!("trial {trial}: outputs differ after round trip"));
        }
    }
    Ok("1000 random models: bytes and outputs bit-identical after round trip".into())
}

/// A default-shaped SAGE2 model with random weights.
pub fn sage_model(seed: u64) -> ModelGraph {
    let mut rng = rng(seed);
    let spec = ArchSpec::new(ArchKind::Sage2, 16, 4, 16, GraphTopology::fully_connected(3)).unwrap();
    let params = init_params(&spec, &mut rng);
    TrainedModel::new(spec, params, NormStats::identity(3), vec![5.0, 8.0, 10.0])
        .unwrap()
        .to_graph()
        .unwrap()
}

/// SAGE2: 100 random B=8 batches agree within 1e-6 across modes; B=1 is
/// bit-identical. Serialized runs both sequentially and with the data-parallel loop.
pub fn mode_equivalence(seed: u64) -> Check {
    let graph = sage_model(seed);
    let registry = default_registry();
    let sequential = Session::new(&graph, &registry).map_err(|e| e.to_string())?;
    let parallel = Session::new(&graph, &registry).unwrap().with_parallelism(Parallelism::Parallel);
    let mut rng = rng(seed ^ 0x5eed);
    let mut worst = 0.0f32;
    for trial in 0..100 {
        let feeds = random_feed(&graph, 8, &mut rng);
        let batched = sequential.run(&feeds, ExecMode::Batched).map_err(|e| e.to_string())?;
        for session in [&sequential, &parallel] {
            let serial = session.run(&feeds, ExecMode::Serialized).map_err(|e| e.to_string())?;
            let diff = batched[OUTPUT]
                .max_abs_diff(&serial[OUTPUT])
                .ok_or_else(|| format!("trial {trial}: output shapes differ"))?;
            worst = worst.max(diff);
        }
        let single = random_feed(&graph, 1, &mut rng);
        let a = sequential.run(&single, ExecMode::Batched).unwrap();
        let b = sequential.run(&single, ExecMode::Serialized).unwrap();
        if bits(&a[OUTPUT]) != bits(&b[OUTPUT]) {
            return Err(format!("trial {trial}: B=1 outputs are not bit-identical"));
        }
    }
    if worst < 1e-6 {
        Ok(format!("100 batches of 8: max divergence {worst:.1e}; B=1 bit-identical"))
    } else {
        Err(format!("max divergence {worst:e} exceeds 1e-6"))
    }
}

/// A GCN2 graph rejected by a builtins-only registry, then accepted once
/// the kernel is registered.
pub fn custom_operator_lifecycle(seed: u64) -> Check {
    let mut rng = rng(seed);
    let spec = ArchSpec::new(ArchKind::Gcn2, 4, 1, 4, GraphTopology::fully_connected(3)).unwrap();
    let params: Params = init_params(&spec, &mut rng);
    let model = TrainedModel::new(spec, params, NormStats::identity(3), vec![1.0; 3]).unwrap();
    let graph = deserialize(&serialize(&model.to_graph().unwrap()).unwrap()).map_err(|e| e.to_string())?;

    let mut registry = OperatorRegistry::with_builtins();
    match Session::new(&graph, &registry) {
        Err(ExecError::UnknownOperator { op_types }) if op_types == [GCN_OP] => {}
        Err(other) => return Err(format!("expected UnknownOperator, got {other}")),
        Ok(_) => return Err("model executed without the custom kernel".into()),
    }
    registry.register_op(GcnKernel).map_err(|e| e.to_string())?;
    let feeds = random_feed(&graph, 2, &mut rng);
    let out = Session::new(&graph, &registry)
        .and_then(|s| s.run(&feeds, ExecMode::Batched))
        .map_err(|e| e.to_string())?;
    if out[OUTPUT].shape() != [2, 3] {
        return Err(format!("unexpected output shape {:?}", out[OUTPUT].shape()));
    }
    Ok(format!("UnknownOperator([{GCN_OP}]) before register_op, executes after"))
}

pub fn param_map(pairs: &[(&str, Tensor<f64>)]) -> Params {
    Params::new(pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<BTreeMap<_, _>>())
}
