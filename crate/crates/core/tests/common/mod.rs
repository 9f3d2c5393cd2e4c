//! Oracles and invariant checks shared by the integration suites and the
//! acceptance runner.
#![allow(dead_code)]

use coen::autodiff::Graph;
use coen::enhance::{cem_forward, CemConfig, EnhancementParams};
use coen::eval::{compute_map_cmc, distance_matrix, Metric, ReidSet};
use coen::params::{ParamStore, Session};
use coen::proxy::ProxyFeature;
use coen::quality::{all_orders, apply_sort, inverse_sort, quality_scores, QualityRanking};
use coen::vit::EmbTokens;
use coen::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub struct Instance {
    pub dist: Tensor,
    pub q_labels: Vec<usize>,
    pub g_labels: Vec<usize>,
    pub q_cams: Vec<usize>,
    pub g_cams: Vec<usize>,
    pub q_uids: Vec<u64>,
    pub g_uids: Vec<u64>,
    /// Camera exclusion when true, uid exclusion otherwise.
    pub by_cam: bool,
}

/// Random retrieval problem. Integer-valued distances on some instances
/// force many ties.
pub fn random_instance(rng: &mut ChaCha8Rng, max_q: usize, max_g: usize) -> Instance {
    let nq = rng.random_range(1..=max_q);
    let ng = rng.random_range(1..=max_g);
    let ids = rng.random_range(1..=20usize);
    let cams = rng.random_range(1..=4usize);
    let ties = rng.random_bool(0.3);
    let data = (0..nq * ng)
        .map(|_| {
            if ties {
                rng.random_range(0..5) as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let q_labels: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ids)).collect();
    let g_labels: Vec<usize> = (0..ng).map(|_| rng.random_range(0..ids)).collect();
    let q_cams = (0..nq).map(|_| rng.random_range(0..cams)).collect();
    let g_cams = (0..ng).map(|_| rng.random_range(0..cams)).collect();
    let q_uids = (0..nq).map(|_| rng.random_range(0..(nq as u64 * 2))).collect();
    let g_uids = (0..ng).map(|_| rng.random_range(0..(nq as u64 * 2))).collect();
    Instance {
        dist: Tensor::new(vec![nq, ng], data).unwrap(),
        q_labels,
        g_labels,
        q_cams,
        g_cams,
        q_uids,
        g_uids,
        by_cam: rng.random_bool(0.5),
    }
}

/// Brute-force reference: materialise each query's filtered ranking as a
/// relevance vector and read AP and CMC off it.
pub fn oracle_map_cmc(inst: &Instance, ranks: &[usize]) -> Option<(f64, Vec<f64>)> {
    let (nq, ng) = inst.dist.dims2();
    let mut aps = Vec::new();
    let mut hits = vec![0usize; ranks.len()];
    for i in 0..nq {
        let mut order: Vec<(f64, usize)> = (0..ng).map(|j| (inst.dist.get(i, j), j)).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = order
            .iter()
            .filter(|&&(_, j)| {
                let same = inst.g_labels[j] == inst.q_labels[i];
                if inst.by_cam {
                    !(same && inst.g_cams[j] == inst.q_cams[i])
                } else {
                    inst.g_uids[j] != inst.q_uids[i]
                }
            })
            .map(|&(_, j)| inst.g_labels[j] == inst.q_labels[i])
            .collect();
        let n_rel = relevance.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        let mut precisions = 0.0;
        for k in 0..relevance.len() {
            if relevance[k] {
                let found = relevance[..=k].iter().filter(|&&r| r).count();
                precisions += found as f64 / (k + 1) as f64;
            }
        }
        aps.push(precisions / n_rel as f64);
        let first = relevance.iter().position(|&r| r).unwrap() + 1;
        for (h, &k) in hits.iter_mut().zip(ranks) {
            *h += usize::from(first <= k);
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some((aps.iter().sum::<f64>() / n, hits.iter().map(|&h| h as f64 / n).collect()))
}

pub fn run_instance(inst: &Instance, ranks: &[usize]) -> coen::Result<coen::eval::RetrievalMetrics> {
    let (q, g) = if inst.by_cam {
        (
            ReidSet::new(&inst.q_labels).with_cams(&inst.q_cams),
            ReidSet::new(&inst.g_labels).with_cams(&inst.g_cams),
        )
    } else {
        (
            ReidSet::new(&inst.q_labels).with_uids(&inst.q_uids),
            ReidSet::new(&inst.g_labels).with_uids(&inst.g_uids),
        )
    };
    compute_map_cmc(&inst.dist, q, g, ranks)
}

/// Compares the evaluator with the oracle; mAP and CMC must agree exactly.
pub fn oracle_agrees(inst: &Instance, ranks: &[usize]) -> Check {
    let got = run_instance(inst, ranks);
    match (oracle_map_cmc(inst, ranks), got) {
        (None, Err(coen::Error::Eval(_))) => Ok(()),
        (None, other) => Err(format!("oracle has no valid query, evaluator gave {other:?}")),
        (Some(_), Err(e)) => Err(format!("evaluator failed: {e}")),
        (Some((map, cmc)), Ok(m)) => {
            ensure!(m.map == map, "mAP {} vs oracle {}", m.map, map);
            let got: Vec<f64> = m.cmc.iter().map(|(_, v)| *v).collect();
            ensure!(got == cmc, "CMC {got:?} vs oracle {cmc:?}");
            Ok(())
        }
    }
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Apply then invert every ordering on labelled sentinels.
pub fn sort_round_trip() -> Check {
    for order in all_orders() {
        let r = QualityRanking::with_order([0.0; 3], order);
        let items = [10u32, 20, 30];
        let sorted = apply_sort(&r, items);
        for (k, s) in order.iter().enumerate() {
            ensure!(sorted[k] == items[s.index()], "apply_sort {order:?} gave {sorted:?}");
        }
        ensure!(inverse_sort(&r, sorted) == items, "round trip failed for {order:?}");
    }
    Ok(())
}

/// Scores lie in [-1, 1] and the order survives positive rescaling of any
/// token matrix.
pub fn cosine_range_and_scale(rng: &mut ChaCha8Rng) -> Check {
    let n = rng.random_range(1..6);
    let d = rng.random_range(1..8);
    let [p, r, nn, t] = std::array::from_fn(|_| uniform(&[n, d], rng));
    let base = quality_scores(&p, &r, &nn, &t).map_err(|e| e.to_string())?;
    for s in base.scores {
        ensure!((-1.0..=1.0).contains(&s), "score {s} outside [-1, 1]");
    }
    let k: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..100.0));
    let scaled = quality_scores(&p.map(|v| v * k[0]), &r.map(|v| v * k[1]), &nn.map(|v| v * k[2]), &t.map(|v| v * k[3]))
        .map_err(|e| e.to_string())?;
    for (a, b) in base.scores.iter().zip(scaled.scores) {
        ensure!((a - b).abs() < 1e-12, "scores moved under scaling: {a} vs {b}");
    }
    ensure!(base.order == scaled.order, "order changed under scaling");
    Ok(())
}

/// With every attention weight zero the value projections vanish, so the
/// enhancement returns its inputs unchanged under any ranking.
pub fn cem_zero_weight_identity(rng: &mut ChaCha8Rng) -> Check {
    let d = rng.random_range(2..6);
    let n = rng.random_range(1..5);
    let split = rng.random_bool(0.5);
    let mut store = ParamStore::new();
    let params = EnhancementParams::new(&mut store, d, split, rng);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let inputs: [Tensor; 3] = std::array::from_fn(|_| uniform(&[n, d], rng));
    let proxy = uniform(&[n, d], rng);
    let order = all_orders()[rng.random_range(0..6)];
    let ranking = QualityRanking::with_order([0.0; 3], order);
    let mut s = Session::new(&store, true, ChaCha8Rng::seed_from_u64(rng.random()));
    let toks = inputs.clone().map(|t| EmbTokens(s.graph.constant(t).unwrap()));
    let p = ProxyFeature(s.graph.constant(proxy).unwrap());
    let out = cem_forward(&mut s, toks, p, &ranking, &params, &CemConfig::default()).map_err(|e| e.to_string())?;
    for (o, x) in out.iter().zip(&inputs) {
        ensure!(s.graph.value(o.0) == x, "zero-weight CEM changed its input");
    }
    Ok(())
}

pub fn softmax_rows_normalised(rng: &mut ChaCha8Rng) -> Check {
    let r = rng.random_range(1..6);
    let c = rng.random_range(1..40);
    let scale = rng.random_range(0.1..300.0);
    let mut g = Graph::new();
    let x = g.constant(uniform(&[r, c], rng).map(|v| v * scale)).unwrap();
    let y = g.softmax_rows(x).unwrap();
    let t = g.value(y);
    for i in 0..r {
        let sum: f64 = t.row(i).iter().sum();
        ensure!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        ensure!(t.row(i).iter().all(|&v| v >= 0.0), "negative probability");
    }
    Ok(())
}

pub fn cmc_monotone(rng: &mut ChaCha8Rng) -> Check {
    let inst = random_instance(rng, 30, 60);
    let ranks: Vec<usize> = (1..=inst.dist.cols()).collect();
    let Ok(m) = run_instance(&inst, &ranks) else {
        return Ok(());
    };
    for w in m.cmc.windows(2) {
        ensure!(w[0].1 <= w[1].1, "CMC decreases from rank {} to {}", w[0].0, w[1].0);
    }
    ensure!(m.cmc.last().unwrap().1 == 1.0, "CMC at the full gallery is below 1");
    Ok(())
}

/// Random features through the real distance path, for evaluator checks.
pub fn feature_instance(rng: &mut ChaCha8Rng, metric: Metric) -> (Tensor, Tensor, Tensor) {
    let d = rng.random_range(1..10);
    let q = uniform(&[rng.random_range(1..20), d], rng);
    let g = uniform(&[rng.random_range(1..40), d], rng);
    let dist = distance_matrix(&q, &g, metric).unwrap();
    (q, g, dist)
}
