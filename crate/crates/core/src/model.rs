//! The assembled network: backbone, proxy generator, quality ranking,
//! enhancement and classifier heads.

use rand::Rng;

use crate::autodiff::Var;
use crate::data::Sample;
use crate::enhance::{cem_forward, CemConfig, EnhancementParams};
use crate::error::{Error, Result};
use crate::objectives::{BranchFeatures, Heads};
use crate::params::{ParamStore, Session};
use crate::proxy::{proxy_class_feature, ProxyConfig, ProxyGenerator};
use crate::quality::{quality_scores, QualityRanking};
use crate::spectral::{SpectralImage, Spectrum};
use crate::vit::{Backbone, ModelConfig};

/// Architecture switches that decide which parameters exist.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub model: ModelConfig,
    pub proxy: ProxyConfig,
    pub cem: CemConfig,
    pub classes: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.proxy.validate(self.model.embed_dim)?;
        self.cem.validate()?;
        if !self.proxy.enabled && (self.cem.primary_enabled || self.cem.proxy_enabled) {
            return Err(Error::Config(
                "cem paths need the proxy: set proxy.enabled = true or disable cem.primary_enabled and cem.proxy_enabled"
                    .into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 training identities, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    fn cem_active(&self) -> bool {
        self.cem.primary_enabled || self.cem.proxy_enabled
    }
}

#[derive(Clone, Debug)]
pub struct Coen {
    pub arch: Architecture,
    pub backbone: Backbone,
    pub proxy: Option<ProxyGenerator>,
    pub cem: Option<EnhancementParams>,
    pub heads: Heads,
}

/// Per-sample branch features (each `1×D`) and the ranking used.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub backbone: [Var; 3],
    pub enhanced: [Var; 3],
    pub proxy: Option<Var>,
    pub ranking: Option<QualityRanking>,
}

/// Stacked batch features (`B×D` per branch) and per-sample rankings.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub features: BranchFeatures,
    pub rankings: Vec<Option<QualityRanking>>,
}

impl Coen {
    /// Registers every parameter in `store`. Registration order is fixed, so
    /// the same seed yields the same initial weights.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let d = arch.model.embed_dim;
        let backbone = Backbone::new(store, &arch.model, rng)?;
        let proxy = if arch.proxy.enabled {
            Some(ProxyGenerator::new(store, &arch.proxy, d, rng)?)
        } else {
            None
        };
        let cem = arch
            .cem_active()
            .then(|| EnhancementParams::new(store, d, arch.cem.split_qkv, rng));
        let heads = Heads::new(store, d, arch.classes, rng);
        Ok(Self {
            arch,
            backbone,
            proxy,
            cem,
            heads,
        })
    }

    pub fn forward_sample(&self, s: &mut Session<'_>, images: [&SpectralImage; 3]) -> Result<SampleOutput> {
        let seqs = self.backbone.encode_shared(s, images.map(Some))?;
        let mut backbone = Vec::with_capacity(3);
        let mut emb = Vec::with_capacity(3);
        let mut cls = Vec::with_capacity(3);
        for seq in &seqs {
            backbone.push(self.backbone.backbone_feature(s, seq)?);
            emb.push(seq.embedding(s)?);
            cls.push(seq.class_token(s)?);
        }
        let emb = [emb[0], emb[1], emb[2]];
        let (tokens, proxy, ranking) = match &self.proxy {
            Some(pg) => {
                let p = pg.fuse(s, emb[0], emb[1], emb[2])?;
                let ranking = {
                    let g = &s.graph;
                    quality_scores(
                        g.value(p.0),
                        g.value(emb[0].0),
                        g.value(emb[1].0),
                        g.value(emb[2].0),
                    )?
                };
                let tokens = match &self.cem {
                    Some(params) => cem_forward(s, emb, p, &ranking, params, &self.arch.cem)?,
                    None => emb,
                };
                (tokens, Some(proxy_class_feature(s, p)?), Some(ranking))
            }
            None => (emb, None, None),
        };
        let mut enhanced = Vec::with_capacity(3);
        for sp in Spectrum::ALL {
            let i = sp.index();
            enhanced.push(self.backbone.finalize_spectrum(s, tokens[i], cls[i], sp)?);
        }
        Ok(SampleOutput {
            backbone: [backbone[0], backbone[1], backbone[2]],
            enhanced: [enhanced[0], enhanced[1], enhanced[2]],
            proxy,
            ranking,
        })
    }

    pub fn forward_batch(&self, s: &mut Session<'_>, samples: &[&Sample]) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut outs = Vec::with_capacity(samples.len());
        for sample in samples {
            let [r, n, t] = &sample.images;
            outs.push(self.forward_sample(s, [r, n, t])?);
        }
        let stack = |s: &mut Session<'_>, pick: &dyn Fn(&SampleOutput) -> Var| -> Result<Var> {
            let rows: Vec<Var> = outs.iter().map(pick).collect();
            s.graph.concat_rows(&rows)
        };
        let mut backbone = Vec::with_capacity(3);
        let mut enhanced = Vec::with_capacity(3);
        for i in 0..3 {
            backbone.push(stack(s, &|o| o.backbone[i])?);
            enhanced.push(stack(s, &|o| o.enhanced[i])?);
        }
        let proxy = match self.proxy {
            Some(_) => Some(stack(s, &|o| o.proxy.expect("proxy enabled"))?),
            None => None,
        };
        Ok(BatchOutput {
            features: BranchFeatures {
                backbone: [backbone[0], backbone[1], backbone[2]],
                enhanced: [enhanced[0], enhanced[1], enhanced[2]],
                proxy,
            },
            rankings: outs.into_iter().map(|o| o.ranking).collect(),
        })
    }
}

/// Retrieval features of one sample: enhanced RGB/NIR/TIR class tokens and
/// the proxy class feature when present.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedFeatures {
    pub branches: [Option<Vec<f64>>; 4],
    pub ranking: Option<QualityRanking>,
}

impl ExtractedFeatures {
    pub fn as_slices(&self) -> [Option<&[f64]>; 4] {
        std::array::from_fn(|i| self.branches[i].as_deref())
    }
}

/// Runs the model in eval mode on each sample in turn.
pub fn extract_features(model: &Coen, store: &ParamStore, samples: &[Sample]) -> Result<Vec<ExtractedFeatures>> {
    samples
        .iter()
        .map(|sample| {
            let mut s = Session::eval(store);
            let [r, n, t] = &sample.images;
            let out = model.forward_sample(&mut s, [r, n, t])?;
            let get = |v: Var| s.graph.value(v).data().to_vec();
            Ok(ExtractedFeatures {
                branches: [
                    Some(get(out.enhanced[0])),
                    Some(get(out.enhanced[1])),
                    Some(get(out.enhanced[2])),
                    out.proxy.map(get),
                ],
                ranking: out.ranking,
            })
        })
        .collect()
}
