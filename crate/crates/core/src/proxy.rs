//! Proxy generator: fuses the three spectra's patch tokens into one
//! `N_p×D` proxy feature.
//!
//! Tokens are rows throughout. Concatenation order is always RGB, NIR, TIR,
//! so the projection modes are order-sensitive while `sum` is not.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{ParamStore, Session};
use crate::vit::EmbTokens;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyMode {
    /// `3D -> mid_dim -> D`, each step affine + GELU + layer norm.
    Progressive,
    /// Single affine `3D -> D`.
    Direct,
    /// Elementwise mean of the three spectra.
    Sum,
}

impl fmt::Display for ProxyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyMode::Progressive => "progressive",
            ProxyMode::Direct => "direct",
            ProxyMode::Sum => "sum",
        })
    }
}

impl FromStr for ProxyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(ProxyMode::Progressive),
            "direct" => Ok(ProxyMode::Direct),
            "sum" => Ok(ProxyMode::Sum),
            other => Err(Error::Config(format!("unknown proxy mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    /// Disabling the generator also disables quality sorting, enhancement
    /// and the proxy loss (the plain-backbone ablation).
    pub enabled: bool,
    pub mode: ProxyMode,
    /// Intermediate width of the progressive mode; `0` means `2·D`.
    pub mid_dim: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: ProxyMode::Progressive,
            mid_dim: 0,
        }
    }
}

impl ProxyConfig {
    pub fn resolved_mid_dim(&self, embed_dim: usize) -> usize {
        if self.mid_dim == 0 {
            2 * embed_dim
        } else {
            self.mid_dim
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.mode == ProxyMode::Progressive {
            let mid = self.resolved_mid_dim(embed_dim);
            if !(embed_dim < mid && mid < 3 * embed_dim) {
                return Err(Error::Config(format!(
                    "proxy.mid_dim must lie strictly between D={embed_dim} and 3D={}, got {mid}",
                    3 * embed_dim
                )));
            }
        }
        Ok(())
    }
}

/// Fused patch-token proxy, `N_p×D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProxyFeature(pub Var);

#[derive(Clone, Debug)]
struct ProjStep {
    linear: Linear,
    norm: LayerNorm,
}

impl ProjStep {
    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.linear.forward(s, x)?;
        let y = s.graph.gelu(y)?;
        self.norm.forward(s, y)
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Progressive { proj_a: ProjStep, proj_b: ProjStep },
    Direct(Linear),
    Sum,
}

#[derive(Clone, Debug)]
pub struct ProxyGenerator {
    fusion: Fusion,
    embed_dim: usize,
}

impl ProxyGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ProxyConfig,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(embed_dim)?;
        let d = embed_dim;
        let fusion = match cfg.mode {
            ProxyMode::Progressive => {
                let mid = cfg.resolved_mid_dim(d);
                Fusion::Progressive {
                    proj_a: ProjStep {
                        linear: Linear::new(store, "proxy.proj_a", 3 * d, mid, true, rng),
                        norm: LayerNorm::new(store, "proxy.proj_a.norm", mid),
                    },
                    proj_b: ProjStep {
                        linear: Linear::new(store, "proxy.proj_b", mid, d, true, rng),
                        norm: LayerNorm::new(store, "proxy.proj_b.norm", d),
                    },
                }
            }
            ProxyMode::Direct => {
                Fusion::Direct(Linear::new(store, "proxy.direct", 3 * d, d, true, rng))
            }
            ProxyMode::Sum => Fusion::Sum,
        };
        Ok(Self {
            fusion,
            embed_dim,
        })
    }

    pub fn mode(&self) -> ProxyMode {
        match self.fusion {
            Fusion::Progressive { .. } => ProxyMode::Progressive,
            Fusion::Direct(_) => ProxyMode::Direct,
            Fusion::Sum => ProxyMode::Sum,
        }
    }

    /// Widths visited by the fused features, starting from the
    /// concatenation: `[3D, mid, D]`, `[3D, D]` or `[D]`.
    pub fn stage_widths(&self) -> Vec<usize> {
        let d = self.embed_dim;
        match &self.fusion {
            Fusion::Progressive { proj_a, .. } => vec![3 * d, proj_a.linear.out_dim, d],
            Fusion::Direct(_) => vec![3 * d, d],
            Fusion::Sum => vec![d],
        }
    }

    pub fn fuse(
        &self,
        s: &mut Session<'_>,
        r: EmbTokens,
        n: EmbTokens,
        t: EmbTokens,
    ) -> Result<ProxyFeature> {
        let shape = s.graph.shape(r.0).to_vec();
        for other in [n, t] {
            if s.graph.shape(other.0) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "proxy_fuse",
                    left: shape,
                    right: s.graph.shape(other.0).to_vec(),
                });
            }
        }
        let out = match &self.fusion {
            Fusion::Progressive { proj_a, proj_b } => {
                let init = s.graph.concat_cols(&[r.0, n.0, t.0])?;
                let mid = proj_a.forward(s, init)?;
                proj_b.forward(s, mid)?
            }
            Fusion::Direct(lin) => {
                let init = s.graph.concat_cols(&[r.0, n.0, t.0])?;
                lin.forward(s, init)?
            }
            Fusion::Sum => {
                let rn = s.graph.add(r.0, n.0)?;
                let rnt = s.graph.add(rn, t.0)?;
                s.graph.scale(rnt, 1.0 / 3.0)?
            }
        };
        Ok(ProxyFeature(out))
    }
}

/// Class-level proxy feature: mean over the token rows, `1×D`.
pub fn proxy_class_feature(s: &mut Session<'_>, p: ProxyFeature) -> Result<Var> {
    s.graph.mean_rows(p.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: ProxyMode, d: usize) -> (ParamStore, ProxyGenerator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ProxyConfig {
            mode,
            ..Default::default()
        };
        let pg = ProxyGenerator::new(&mut store, &cfg, d, &mut rng).unwrap();
        (store, pg)
    }

    fn tokens(s: &mut Session<'_>, n: usize, d: usize, seed: u64) -> EmbTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbTokens(s.graph.constant(Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng)).unwrap())
    }

    #[test]
    fn output_shape_for_every_mode() {
        for mode in [ProxyMode::Progressive, ProxyMode::Direct, ProxyMode::Sum] {
            let (store, pg) = setup(mode, 64);
            let mut s = Session::eval(&store);
            let (r, n, t) = (tokens(&mut s, 32, 64, 1), tokens(&mut s, 32, 64, 2), tokens(&mut s, 32, 64, 3));
            let p = pg.fuse(&mut s, r, n, t).unwrap();
            assert_eq!(s.graph.shape(p.0), &[32, 64], "{mode}");
        }
    }

    #[test]
    fn progressive_stage_widths_at_default_config() {
        let (_, pg) = setup(ProxyMode::Progressive, 64);
        assert_eq!(pg.stage_widths(), vec![192, 128, 64]);
        assert!(pg.stage_widths().iter().all(|&w| w <= 192));
    }

    #[test]
    fn sum_of_identical_inputs_is_identity() {
        let (store, pg) = setup(ProxyMode::Sum, 8);
        let mut s = Session::eval(&store);
        let x = tokens(&mut s, 4, 8, 5);
        let p = pg.fuse(&mut s, x, x, x).unwrap();
        assert!(s.graph.value(p.0).max_abs_diff(s.graph.value(x.0)) < 1e-15);
    }

    #[test]
    fn sum_is_permutation_invariant_projection_is_not() {
        for (mode, invariant) in [(ProxyMode::Sum, true), (ProxyMode::Direct, false), (ProxyMode::Progressive, false)] {
            let (store, pg) = setup(mode, 8);
            let mut s = Session::eval(&store);
            let (a, b, c) = (tokens(&mut s, 4, 8, 1), tokens(&mut s, 4, 8, 2), tokens(&mut s, 4, 8, 3));
            let p1 = pg.fuse(&mut s, a, b, c).unwrap();
            let p2 = pg.fuse(&mut s, c, a, b).unwrap();
            let diff = s.graph.value(p1.0).max_abs_diff(s.graph.value(p2.0));
            assert_eq!(diff < 1e-12, invariant, "{mode}: diff {diff}");
        }
    }

    #[test]
    fn mid_dim_bounds_are_enforced() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mid in [64, 192, 300] {
            let cfg = ProxyConfig {
                mid_dim: mid,
                ..Default::default()
            };
            assert!(ProxyGenerator::new(&mut store, &cfg, 64, &mut rng).is_err());
        }
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let (store, pg) = setup(ProxyMode::Sum, 8);
        let mut s = Session::eval(&store);
        let a = tokens(&mut s, 4, 8, 1);
        let b = tokens(&mut s, 3, 8, 2);
        assert!(matches!(pg.fuse(&mut s, a, b, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn class_feature_is_row_mean() {
        let store = ParamStore::new();
        let mut s = Session::eval(&store);
        let p = s
            .graph
            .constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0], &[2.0, 2.0, 2.0]]))
            .unwrap();
        let c = proxy_class_feature(&mut s, ProxyFeature(p)).unwrap();
        assert_eq!(s.graph.value(c).data(), &[1.0, 1.0, 1.0]);

        let single = s.graph.constant(Tensor::from_rows(&[&[0.5, -1.0]])).unwrap();
        let c = proxy_class_feature(&mut s, ProxyFeature(single)).unwrap();
        assert_eq!(s.graph.value(c).data(), &[0.5, -1.0]);
    }

    #[test]
    fn gradient_reaches_all_three_inputs() {
        for mode in [ProxyMode::Progressive, ProxyMode::Direct, ProxyMode::Sum] {
            let (store, pg) = setup(mode, 8);
            let mut s = Session::eval(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let ins: Vec<Var> = (0..3)
                .map(|_| s.graph.param(Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng)).unwrap())
                .collect();
            let p = pg
                .fuse(&mut s, EmbTokens(ins[0]), EmbTokens(ins[1]), EmbTokens(ins[2]))
                .unwrap();
            let w = s.graph.constant(Tensor::uniform(&[4, 8], -1.0, 1.0, &mut rng)).unwrap();
            let prod = s.graph.mul(p.0, w).unwrap();
            let l = s.graph.sum(prod).unwrap();
            s.graph.backward(l).unwrap();
            for v in ins {
                assert!(s.graph.grad(v).unwrap().norm() > 0.0, "{mode}");
            }
        }
    }
}
