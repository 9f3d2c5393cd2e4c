//! Identity and batch-hard triplet losses, the weighted three-stage total,
//! classifier heads and the momentum SGD optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamStore, Session};
use crate::spectral::Spectrum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the enhanced-feature stage; the backbone stage gets `1 - λ`.
    pub lambda: f64,
    pub margin: f64,
    pub label_smoothing: f64,
    /// Steps over which the triplet weight ramps linearly from 0 to 1.
    pub triplet_warmup: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            margin: 0.3,
            label_smoothing: 0.1,
            triplet_warmup: 100,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss.lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("loss.margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "loss.label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Multiplier on every triplet term at optimiser step `step`.
    pub fn triplet_scale(&self, step: u64) -> f64 {
        if self.triplet_warmup == 0 {
            1.0
        } else {
            (step as f64 / self.triplet_warmup as f64).min(1.0)
        }
    }
}

/// Mean (label-smoothed) cross-entropy of `softmax(logits)`.
///
/// The smoothed target puts `1 - ε + ε/C` on the true class and `ε/C`
/// elsewhere.
pub fn id_loss(s: &mut Session<'_>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let (b, c) = s.graph.value(logits).dims2();
    if labels.len() != b {
        return Err(Error::Shape {
            op: "id_loss",
            left: vec![b, c],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let off = smoothing / c as f64;
    let mut target = Tensor::full(&[b, c], off);
    for (i, &l) in labels.iter().enumerate() {
        target.data_mut()[i * c + l] += 1.0 - smoothing;
    }
    let target = s.graph.constant(target)?;
    let logp = s.graph.log_softmax_rows(logits)?;
    let weighted = s.graph.mul(logp, target)?;
    let total = s.graph.sum(weighted)?;
    s.graph.scale(total, -1.0 / b as f64)
}

/// Rejects batches the batch-hard triplet loss cannot mine.
pub fn check_batch_composition(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Data(
            "batch composition: triplet loss needs at least two identities".into(),
        ));
    }
    if let Some((l, k)) = counts.iter().find(|(_, &k)| k < 2) {
        return Err(Error::Data(format!(
            "batch composition: identity {l} has {k} sample(s), need at least 2"
        )));
    }
    Ok(())
}

/// Batch-hard triplet loss on Euclidean distances, averaged over anchors:
/// `mean_a max(0, m + max_p D(a,p) - min_n D(a,n))`.
pub fn triplet_loss(s: &mut Session<'_>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let b = s.graph.value(features).rows();
    if labels.len() != b {
        return Err(Error::Shape {
            op: "triplet_loss",
            left: s.graph.shape(features).to_vec(),
            right: vec![labels.len()],
        });
    }
    check_batch_composition(labels)?;
    let dist = s.graph.pairwise_dist(features)?;
    let d = s.graph.value(dist);
    let mut hard_pos = Vec::with_capacity(b);
    let mut hard_neg = Vec::with_capacity(b);
    for a in 0..b {
        let row = d.row(a);
        let mut pos = (f64::NEG_INFINITY, 0);
        let mut neg = (f64::INFINITY, 0);
        for j in 0..b {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if row[j] > pos.0 {
                    pos = (row[j], j);
                }
            } else if row[j] < neg.0 {
                neg = (row[j], j);
            }
        }
        hard_pos.push(a * b + pos.1);
        hard_neg.push(a * b + neg.1);
    }
    let dp = s.graph.gather(dist, &hard_pos)?;
    let dn = s.graph.gather(dist, &hard_neg)?;
    let gap = s.graph.sub(dp, dn)?;
    let m = s.graph.constant(Tensor::full(&[b], margin))?;
    let pre = s.graph.add(gap, m)?;
    let hinge = s.graph.relu(pre)?;
    s.graph.mean(hinge)
}

/// Where a classified feature comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    /// Penultimate-layer class token of the shared backbone.
    Backbone(Spectrum),
    /// Final-block class token after enhancement.
    Enhanced(Spectrum),
    Proxy,
}

impl Branch {
    pub fn name(&self) -> String {
        match self {
            Branch::Backbone(s) => format!("vit.{}", s.dir_name()),
            Branch::Enhanced(s) => format!("cem.{}", s.dir_name()),
            Branch::Proxy => "proxy".to_string(),
        }
    }
}

/// Linear classifier `D -> C` for one branch.
#[derive(Clone, Debug)]
pub struct ClassifierHead(pub Linear);

/// The seven heads: backbone and enhanced stage per spectrum, plus proxy.
#[derive(Clone, Debug)]
pub struct Heads {
    pub backbone: [ClassifierHead; 3],
    pub enhanced: [ClassifierHead; 3],
    pub proxy: ClassifierHead,
    pub classes: usize,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut mk = |name: String| ClassifierHead(Linear::new(store, &name, dim, classes, true, rng));
        let backbone = Spectrum::ALL.map(|s| mk(format!("head.{}", Branch::Backbone(s).name())));
        let enhanced = Spectrum::ALL.map(|s| mk(format!("head.{}", Branch::Enhanced(s).name())));
        let proxy = mk("head.proxy".to_string());
        Self {
            backbone,
            enhanced,
            proxy,
            classes,
        }
    }

    pub fn head(&self, branch: Branch) -> &ClassifierHead {
        match branch {
            Branch::Backbone(s) => &self.backbone[s.index()],
            Branch::Enhanced(s) => &self.enhanced[s.index()],
            Branch::Proxy => &self.proxy,
        }
    }
}

/// Batch features per branch, each `B×D`.
#[derive(Clone, Debug)]
pub struct BranchFeatures {
    pub backbone: [Var; 3],
    pub enhanced: [Var; 3],
    /// Absent when the proxy generator is disabled.
    pub proxy: Option<Var>,
}

impl BranchFeatures {
    pub fn iter(&self) -> impl Iterator<Item = (Branch, Var)> + '_ {
        let bb = Spectrum::ALL.into_iter().map(|s| (Branch::Backbone(s), self.backbone[s.index()]));
        let en = Spectrum::ALL.into_iter().map(|s| (Branch::Enhanced(s), self.enhanced[s.index()]));
        bb.chain(en).chain(self.proxy.map(|p| (Branch::Proxy, p)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub branch: Branch,
    pub kind: &'static str,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    /// `key=value` pairs in a fixed order, for the training log.
    pub fn log_fields(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .terms
            .iter()
            .map(|t| (format!("{}.{}", t.branch.name(), t.kind), t.value))
            .collect();
        out.push(("total".to_string(), self.total));
        out
    }
}

/// `(1-λ)·L_ReID^ViT + λ·L_ReID^CEM + L_ReID^P`, each stage summing
/// `L_id + L_tri` over its spectra. Triplet terms are further scaled by
/// `tri_scale`.
pub fn total_loss(
    s: &mut Session<'_>,
    feats: &BranchFeatures,
    heads: &Heads,
    labels: &[usize],
    cfg: &LossConfig,
    tri_scale: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut weighted = Vec::new();
    let mut terms = Vec::new();
    for (branch, f) in feats.iter() {
        let weight = match branch {
            Branch::Backbone(_) => 1.0 - cfg.lambda,
            Branch::Enhanced(_) => cfg.lambda,
            Branch::Proxy => 1.0,
        };
        let logits = heads.head(branch).0.forward(s, f)?;
        let id = id_loss(s, logits, labels, cfg.label_smoothing)?;
        let tri = triplet_loss(s, f, labels, cfg.margin)?;
        for (kind, v, w) in [("id", id, weight), ("tri", tri, weight * tri_scale)] {
            terms.push(LossTerm {
                branch,
                kind,
                value: s.graph.value(v).item(),
                weight: w,
            });
            weighted.push(s.graph.scale(v, w)?);
        }
    }
    let stacked = s.graph.concat_rows(&weighted)?;
    let total = s.graph.sum(stacked)?;
    let breakdown = LossBreakdown {
        total: s.graph.value(total).item(),
        terms,
    };
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Learning-rate schedule; only `"none"` (constant) is implemented.
    pub schedule: String,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 120,
            schedule: "none".to_string(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("optim.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("optim.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        if self.schedule != "none" {
            return Err(Error::Config(format!(
                "optim.schedule {:?} is not supported (only \"none\")",
                self.schedule
            )));
        }
        Ok(())
    }
}

/// SGD with classic momentum: `v ← μv + g + wd·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: OptimizerConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let velocity = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { cfg, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Usage(format!(
                "sgd_step: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let (lr, mu, wd) = (self.cfg.lr, self.cfg.momentum, self.cfg.weight_decay);
        for ((id, g), v) in store.ids().zip(grads).zip(&mut self.velocity) {
            let w = store.get_mut(id);
            if g.shape() != w.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: w.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            if !w.is_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(store: &ParamStore) -> Session<'_> {
        Session::eval(store)
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let store = ParamStore::new();
        let mut s = session(&store);
        let logits = s.graph.constant(Tensor::zeros(&[3, 5])).unwrap();
        let l = id_loss(&mut s, logits, &[0, 2, 4], 0.0).unwrap();
        assert!((s.graph.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let store = ParamStore::new();
        let mut s = session(&store);
        let logits = s
            .graph
            .constant(Tensor::from_rows(&[&[200.0, 0.0, 0.0], &[0.0, 0.0, 200.0]]))
            .unwrap();
        let l = id_loss(&mut s, logits, &[0, 2], 0.0).unwrap();
        assert!(s.graph.value(l).item() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let store = ParamStore::new();
        let mut s = session(&store);
        let logits = s.graph.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(id_loss(&mut s, logits, &[3], 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn identical_features_give_margin() {
        let store = ParamStore::new();
        let mut s = session(&store);
        let f = s.graph.constant(Tensor::full(&[4, 3], 0.7)).unwrap();
        let l = triplet_loss(&mut s, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((s.graph.value(l).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bad_batch_composition() {
        let store = ParamStore::new();
        let mut s = session(&store);
        let f = s.graph.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(triplet_loss(&mut s, f, &[0, 0, 1], 0.3), Err(Error::Data(_))));
        assert!(matches!(triplet_loss(&mut s, f, &[0, 0, 0], 0.3), Err(Error::Data(_))));
    }

    #[test]
    fn sgd_plain_descent() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[&[1.0, -2.0]]));
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Sgd::new(cfg, &store);
        opt.step(&mut store, &[Tensor::from_rows(&[&[0.5, 1.0]])]).unwrap();
        let w = store.get(store.id("w").unwrap()).data();
        assert!((w[0] - 0.95).abs() < 1e-15 && (w[1] + 2.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_velocity_decays_geometrically() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[&[0.0]]));
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Sgd::new(cfg, &store);
        opt.velocity[0] = Tensor::from_rows(&[&[1.0]]);
        for k in 1..=3 {
            opt.step(&mut store, &[Tensor::zeros(&[1, 1])]).unwrap();
            assert!((opt.velocity[0].item() - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: -0.1, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { schedule: "cosine".into(), ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn triplet_warmup_ramps_linearly() {
        let cfg = LossConfig { triplet_warmup: 4, ..Default::default() };
        let got: Vec<f64> = (0..6).map(|k| cfg.triplet_scale(k)).collect();
        assert_eq!(got, [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        assert_eq!(LossConfig { triplet_warmup: 0, ..Default::default() }.triplet_scale(0), 1.0);
    }
}
