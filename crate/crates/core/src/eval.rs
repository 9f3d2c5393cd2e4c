//! Retrieval metrics: distance matrices, mAP / CMC, inference-feature
//! assembly and intra/inter distance histograms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        row.to_vec()
    } else {
        row.iter().map(|v| v / n).collect()
    }
}

/// `Nq×Ng` distances between query and gallery rows.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Tensor> {
    let (nq, dq) = q.dims2();
    let (ng, dg) = g.dims2();
    if dq != dg {
        return Err(Error::Shape {
            op: "distance_matrix",
            left: q.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(nq * ng);
    match metric {
        Metric::Euclidean => {
            for i in 0..nq {
                let a = q.row(i);
                for j in 0..ng {
                    let d2: f64 = a.iter().zip(g.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                    out.push(d2.sqrt());
                }
            }
        }
        Metric::Cosine => {
            let gn: Vec<Vec<f64>> = (0..ng).map(|j| normalized(g.row(j))).collect();
            for i in 0..nq {
                let a = normalized(q.row(i));
                for b in &gn {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    out.push(1.0 - dot);
                }
            }
        }
    }
    Tensor::new(vec![nq, ng], out)
}

/// Labels and optional exclusion keys for one side of a retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct ReidSet<'a> {
    pub labels: &'a [usize],
    /// When both sides carry cameras, gallery items sharing the query's
    /// identity and camera are excluded.
    pub cams: Option<&'a [usize]>,
    /// When both sides carry uids, a gallery item with the query's uid (the
    /// same sample) is excluded.
    pub uids: Option<&'a [u64]>,
}

impl<'a> ReidSet<'a> {
    pub fn new(labels: &'a [usize]) -> Self {
        Self {
            labels,
            cams: None,
            uids: None,
        }
    }

    pub fn with_cams(mut self, cams: &'a [usize]) -> Self {
        self.cams = Some(cams);
        self
    }

    pub fn with_uids(mut self, uids: &'a [u64]) -> Self {
        self.uids = Some(uids);
        self
    }

    fn check(&self, n: usize, side: &str) -> Result<()> {
        let bad = |what: &str, len: usize| {
            Err(Error::Eval(format!("{side} {what} has {len} entries, expected {n}")))
        };
        if self.labels.len() != n {
            return bad("labels", self.labels.len());
        }
        if let Some(c) = self.cams.filter(|c| c.len() != n) {
            return bad("cams", c.len());
        }
        if let Some(u) = self.uids.filter(|u| u.len() != n) {
            return bad("uids", u.len());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(k, CMC@k)` in the requested order.
    pub cmc: Vec<(usize, f64)>,
    pub evaluated: usize,
    /// Queries with no valid gallery match after exclusion.
    pub skipped: usize,
}

impl RetrievalMetrics {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

/// Gallery indices sorted by ascending distance; ties keep gallery order.
pub fn ranked_gallery(dist_row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist_row.len()).collect();
    idx.sort_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]));
    idx
}

/// mAP and CMC over every query with at least one valid match.
///
/// AP is the mean of precision at each relevant rank.
pub fn compute_map_cmc(
    dist: &Tensor,
    query: ReidSet<'_>,
    gallery: ReidSet<'_>,
    ranks: &[usize],
) -> Result<RetrievalMetrics> {
    let (nq, ng) = dist.dims2();
    query.check(nq, "query")?;
    gallery.check(ng, "gallery")?;
    if ranks.contains(&0) {
        return Err(Error::Eval("CMC ranks must be >= 1".into()));
    }
    let cams = query.cams.zip(gallery.cams);
    let uids = query.uids.zip(gallery.uids);
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ranks.len()];
    let mut evaluated = 0;
    let mut skipped = 0;
    for i in 0..nq {
        let ql = query.labels[i];
        let mut first_hit = None;
        let mut n_rel = 0usize;
        let mut precision_sum = 0.0;
        let mut pos = 0usize;
        for j in ranked_gallery(dist.row(i)) {
            if uids.is_some_and(|(qu, gu)| qu[i] == gu[j]) {
                continue;
            }
            let same_id = gallery.labels[j] == ql;
            if same_id && cams.is_some_and(|(qc, gc)| qc[i] == gc[j]) {
                continue;
            }
            pos += 1;
            if same_id {
                n_rel += 1;
                precision_sum += n_rel as f64 / pos as f64;
                first_hit.get_or_insert(pos);
            }
        }
        let Some(first) = first_hit else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += precision_sum / n_rel as f64;
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if first <= k {
                *h += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Eval(format!(
            "no query has a valid gallery match ({skipped} skipped)"
        )));
    }
    let n = evaluated as f64;
    Ok(RetrievalMetrics {
        map: ap_sum / n,
        cmc: ranks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect(),
        evaluated,
        skipped,
    })
}

/// Branches that can contribute to an inference feature, in concatenation
/// order.
pub const FEATURE_BRANCHES: [&str; 4] = ["RGB", "NIR", "TIR", "Proxy"];

/// A non-empty subset of [`FEATURE_BRANCHES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InferenceMode(pub [bool; 4]);

impl InferenceMode {
    pub const ALL: InferenceMode = InferenceMode([true; 4]);

    /// The single-branch, three-spectrum and all-branch rows of the usual
    /// ablation table.
    pub fn standard() -> Vec<InferenceMode> {
        ["RGB", "NIR", "TIR", "Proxy", "RGB-NIR-TIR", "RGB-NIR-TIR-Proxy"]
            .iter()
            .map(|s| s.parse().expect("built-in mode"))
            .collect()
    }

    pub fn uses_proxy(&self) -> bool {
        self.0[3]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = FEATURE_BRANCHES
            .iter()
            .zip(self.0)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        f.write_str(&names.join("-"))
    }
}

impl FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = [false; 4];
        for part in s.split(['-', '+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let idx = FEATURE_BRANCHES
                .iter()
                .position(|b| b.eq_ignore_ascii_case(part))
                .ok_or_else(|| Error::Config(format!("unknown inference branch {part:?} in {s:?}")))?;
            flags[idx] = true;
        }
        if !flags.iter().any(|&b| b) {
            return Err(Error::Config(format!("empty inference mode {s:?}")));
        }
        Ok(InferenceMode(flags))
    }
}

impl Serialize for InferenceMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InferenceMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Concatenates the selected branch vectors, each L2-normalised, in the
/// fixed order RGB, NIR, TIR, Proxy.
pub fn assemble_inference_feature(branches: &[Option<&[f64]>; 4], mode: InferenceMode) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ((name, on), v) in FEATURE_BRANCHES.iter().zip(mode.0).zip(branches) {
        if !on {
            continue;
        }
        let v = v.ok_or_else(|| Error::Eval(format!("mode {mode} needs the {name} feature")))?;
        out.extend(normalized(v));
    }
    Ok(out)
}

/// Histograms of same-identity and different-identity pair distances over
/// shared bin edges spanning `[0, max distance]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceHistograms {
    pub edges: Vec<f64>,
    pub intra: Vec<u64>,
    pub inter: Vec<u64>,
}

impl DistanceHistograms {
    pub fn intra_total(&self) -> u64 {
        self.intra.iter().sum()
    }

    pub fn inter_total(&self) -> u64 {
        self.inter.iter().sum()
    }

    /// One line per bin: `lo hi intra inter`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# bin_lo bin_hi intra inter\n");
        for (i, (a, b)) in self.intra.iter().zip(&self.inter).enumerate() {
            s.push_str(&format!("{:.6} {:.6} {a} {b}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

pub fn distance_distributions(
    feats: &Tensor,
    labels: &[usize],
    metric: Metric,
    bins: usize,
) -> Result<DistanceHistograms> {
    let n = feats.rows();
    if labels.len() != n {
        return Err(Error::Eval(format!("{} labels for {n} features", labels.len())));
    }
    if bins == 0 {
        return Err(Error::Config("histogram bins must be >= 1".into()));
    }
    let d = distance_matrix(feats, feats, metric)?;
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((d.get(i, j).max(0.0), labels[i] == labels[j]));
        }
    }
    let hi = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| k as f64 * width).collect();
    let mut intra = vec![0; bins];
    let mut inter = vec![0; bins];
    for (v, same) in pairs {
        let b = ((v / width) as usize).min(bins - 1);
        if same {
            intra[b] += 1;
        } else {
            inter[b] += 1;
        }
    }
    Ok(DistanceHistograms { edges, intra, inter })
}
