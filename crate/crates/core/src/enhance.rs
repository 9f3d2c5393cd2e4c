//! Collaborative enhancement: primary-based and proxy-based cross-attention
//! followed by residual aggregation.
//!
//! Every attention path is single-head with `d_C = D`. By default one `D×D`
//! matrix projects query, key and value alike; `split_qkv` gives each its
//! own matrix instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::INIT_STD;
use crate::params::{ParamId, ParamStore, Session};
use crate::proxy::ProxyFeature;
use crate::quality::{apply_sort, inverse_sort, QualityRanking};
use crate::vit::EmbTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub primary_enabled: bool,
    pub proxy_enabled: bool,
    /// Dropout rate applied to the attention output.
    pub gamma: f64,
    pub split_qkv: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            primary_enabled: true,
            proxy_enabled: true,
            gamma: 0.5,
            split_qkv: false,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "cem.gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum AttnWeights {
    Shared(ParamId),
    Split { q: ParamId, k: ParamId, v: ParamId },
}

impl AttnWeights {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        split: bool,
        rng: &mut R,
    ) -> Self {
        let mut mk = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                Tensor::trunc_normal(&[dim, dim], INIT_STD, rng),
            )
        };
        if split {
            AttnWeights::Split {
                q: mk("w_q"),
                k: mk("w_k"),
                v: mk("w_v"),
            }
        } else {
            AttnWeights::Shared(mk("w"))
        }
    }

    fn ids(&self) -> (ParamId, ParamId, ParamId) {
        match *self {
            AttnWeights::Shared(w) => (w, w, w),
            AttnWeights::Split { q, k, v } => (q, k, v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnhancementParams {
    pub primary: AttnWeights,
    pub proxy: AttnWeights,
}

impl EnhancementParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        split_qkv: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            primary: AttnWeights::new(store, "cem.primary", dim, split_qkv, rng),
            proxy: AttnWeights::new(store, "cem.proxy", dim, split_qkv, rng),
        }
    }
}

/// `Dropout_γ(softmax(Q·Kᵀ/√D)·V)` with `Q = query·W_q`, `K = source·W_k`,
/// `V = source·W_v`.
pub fn cross_enhance(
    s: &mut Session<'_>,
    query: EmbTokens,
    source: EmbTokens,
    weights: &AttnWeights,
    gamma: f64,
) -> Result<EmbTokens> {
    let (qs, ss) = (s.graph.shape(query.0).to_vec(), s.graph.shape(source.0).to_vec());
    if qs.len() != 2 || qs != ss {
        return Err(Error::Shape {
            op: "cross_enhance",
            left: qs,
            right: ss,
        });
    }
    let att = attention_matrix(s, query, source, weights)?;
    let (_, _, wv) = weights.ids();
    let wv = s.param(wv)?;
    let v = s.graph.matmul(source.0, wv)?;
    let out = s.graph.matmul(att, v)?;
    let training = s.training;
    let out = s.graph.dropout(out, gamma, training, &mut s.rng)?;
    Ok(EmbTokens(out))
}

/// Row-stochastic attention weights of [`cross_enhance`], before `V`.
pub fn attention_matrix(
    s: &mut Session<'_>,
    query: EmbTokens,
    source: EmbTokens,
    weights: &AttnWeights,
) -> Result<Var> {
    let (wq, wk, _) = weights.ids();
    let d = s.graph.value(query.0).cols();
    let wq = s.param(wq)?;
    let wk = s.param(wk)?;
    let q = s.graph.matmul(query.0, wq)?;
    let k = s.graph.matmul(source.0, wk)?;
    let kt = s.graph.transpose(k)?;
    let logits = s.graph.matmul(q, kt)?;
    let logits = s.graph.scale(logits, 1.0 / (d as f64).sqrt())?;
    s.graph.softmax_rows(logits)
}

fn zeros_like(s: &mut Session<'_>, x: EmbTokens) -> Result<EmbTokens> {
    let shape = s.graph.shape(x.0).to_vec();
    Ok(EmbTokens(s.graph.constant(Tensor::zeros(&shape))?))
}

/// `(F_2nd^1st, F_3rd^1st)`: the lower-ranked spectra attend to the primary.
/// Zeros when the path is disabled.
pub fn primary_enhance(
    s: &mut Session<'_>,
    sorted: [EmbTokens; 3],
    params: &EnhancementParams,
    cfg: &CemConfig,
) -> Result<[EmbTokens; 2]> {
    let [f1, f2, f3] = sorted;
    if !cfg.primary_enabled {
        return Ok([zeros_like(s, f2)?, zeros_like(s, f3)?]);
    }
    Ok([
        cross_enhance(s, f2, f1, &params.primary, cfg.gamma)?,
        cross_enhance(s, f3, f1, &params.primary, cfg.gamma)?,
    ])
}

/// `(F_1st^P, F_2nd^P, F_3rd^P)`: every spectrum attends to the proxy.
/// Zeros when the path is disabled.
pub fn proxy_enhance(
    s: &mut Session<'_>,
    sorted: [EmbTokens; 3],
    proxy: ProxyFeature,
    params: &EnhancementParams,
    cfg: &CemConfig,
) -> Result<[EmbTokens; 3]> {
    let mut out = Vec::with_capacity(3);
    for f in sorted {
        out.push(if cfg.proxy_enabled {
            cross_enhance(s, f, EmbTokens(proxy.0), &params.proxy, cfg.gamma)?
        } else {
            zeros_like(s, f)?
        });
    }
    Ok([out[0], out[1], out[2]])
}

/// Residual join. The primary spectrum gets only its proxy term.
pub fn aggregate(
    s: &mut Session<'_>,
    sorted: [EmbTokens; 3],
    from_proxy: [EmbTokens; 3],
    from_primary: [EmbTokens; 2],
) -> Result<[EmbTokens; 3]> {
    let g = &mut s.graph;
    let f1 = g.add(sorted[0].0, from_proxy[0].0)?;
    let f2 = g.add(sorted[1].0, from_proxy[1].0)?;
    let f2 = g.add(f2, from_primary[0].0)?;
    let f3 = g.add(sorted[2].0, from_proxy[2].0)?;
    let f3 = g.add(f3, from_primary[1].0)?;
    Ok([EmbTokens(f1), EmbTokens(f2), EmbTokens(f3)])
}

/// Sort, enhance, aggregate and restore the RGB/NIR/TIR labelling.
pub fn cem_forward(
    s: &mut Session<'_>,
    tokens: [EmbTokens; 3],
    proxy: ProxyFeature,
    ranking: &QualityRanking,
    params: &EnhancementParams,
    cfg: &CemConfig,
) -> Result<[EmbTokens; 3]> {
    let sorted = apply_sort(ranking, tokens);
    let from_primary = primary_enhance(s, sorted, params, cfg)?;
    let from_proxy = proxy_enhance(s, sorted, proxy, params, cfg)?;
    let enhanced = aggregate(s, sorted, from_proxy, from_primary)?;
    Ok(inverse_sort(ranking, enhanced))
}
