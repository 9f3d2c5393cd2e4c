//! Shared patch-embedding transformer trunk and the per-spectrum final blocks.
//!
//! The trunk runs `depth - 1` blocks with one set of weights for all three
//! spectra and hands back the penultimate-layer token sequences. The last
//! block is instantiated three times with independent weights and is only
//! applied after enhancement, in [`Backbone::finalize_spectrum`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Block, LayerNorm, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore, Session};
use crate::spectral::{SpectralImage, Spectrum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    /// Pixels enter the patch projection as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 64,
            patch: 8,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 2.0,
            input_mean: 0.5,
            input_std: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || self.image_h == 0 || self.image_w == 0 {
            return bad("model: image and patch sizes must be positive".into());
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return bad(format!(
                "model: image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.heads == 0 {
            return bad("model: channels, embed_dim and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "model: embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth < 2 {
            return bad(format!("model: depth must be >= 2, got {}", self.depth));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("model: mlp_ratio must be positive".into());
        }
        if !(self.input_std > 0.0) || !self.input_mean.is_finite() {
            return bad("model: input_std must be positive and input_mean finite".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Splits an image into non-overlapping patches in raster order, one row
/// per patch, each flattened channel-major (all of channel 0, then 1, ...).
pub fn patchify(image: &SpectralImage, cfg: &ModelConfig) -> Result<Tensor> {
    if image.channels != cfg.channels || image.height != cfg.image_h || image.width != cfg.image_w
    {
        return Err(Error::Shape {
            op: "patchify",
            left: vec![image.channels, image.height, image.width],
            right: vec![cfg.channels, cfg.image_h, cfg.image_w],
        });
    }
    let p = cfg.patch;
    let (rows, cols) = (cfg.image_h / p, cfg.image_w / p);
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..rows {
        for pc in 0..cols {
            for c in 0..image.channels {
                for y in 0..p {
                    for x in 0..p {
                        out.push(image.at(c, pr * p + y, pc * p + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, cfg.patch_dim()], out)
}

/// Penultimate-layer tokens of one spectrum: row 0 is the class token, rows
/// `1..=N_p` the patch tokens in raster order.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub spectrum: Spectrum,
}

/// Patch-token rows of a [`TokenSeq`] (class token excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbTokens(pub Var);

impl TokenSeq {
    pub fn class_token(&self, s: &mut Session<'_>) -> Result<Var> {
        s.graph.slice_rows(self.tokens, 0, 1)
    }

    pub fn embedding(&self, s: &mut Session<'_>) -> Result<EmbTokens> {
        let n = s.graph.value(self.tokens).rows() - 1;
        Ok(EmbTokens(s.graph.slice_rows(self.tokens, 1, n)?))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    /// Shared blocks `1..depth-1`.
    pub trunk: Vec<Block>,
    /// Independent final blocks, indexed by [`Spectrum::index`].
    pub finals: [Block; 3],
    /// Normalises the penultimate class token into the backbone-stage feature.
    pub mid_norm: LayerNorm,
    /// Per-spectrum output norms after the final blocks.
    pub final_norms: [LayerNorm; 3],
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let patch_embed = Linear::new(store, "vit.patch_embed", cfg.patch_dim(), d, true, rng);
        let cls_token = store.add("vit.cls_token", Tensor::trunc_normal(&[1, d], INIT_STD, rng));
        let pos_embed = store.add(
            "vit.pos_embed",
            Tensor::trunc_normal(&[cfg.n_patches() + 1, d], INIT_STD, rng),
        );
        let trunk = (0..cfg.depth - 1)
            .map(|i| Block::new(store, &format!("vit.blocks.{i}"), d, cfg.heads, hidden, rng))
            .collect();
        let finals = Spectrum::ALL.map(|sp| {
            Block::new(
                store,
                &format!("vit.final.{}", sp.dir_name()),
                d,
                cfg.heads,
                hidden,
                rng,
            )
        });
        let mid_norm = LayerNorm::new(store, "vit.mid_norm", d);
        let final_norms =
            Spectrum::ALL.map(|sp| LayerNorm::new(store, &format!("vit.final.{}.out_norm", sp.dir_name()), d));
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            trunk,
            finals,
            mid_norm,
            final_norms,
        })
    }

    /// Patch projection, class token, positional embedding and the shared
    /// blocks for a single image.
    pub fn encode_one(
        &self,
        s: &mut Session<'_>,
        image: &SpectralImage,
        spectrum: Spectrum,
    ) -> Result<TokenSeq> {
        let (mean, std) = (self.cfg.input_mean, self.cfg.input_std);
        let patches = patchify(image, &self.cfg)?.map(|v| (v - mean) / std);
        let patches = s.graph.constant(patches)?;
        let emb = self.patch_embed.forward(s, patches)?;
        let cls = s.param(self.cls_token)?;
        let x = s.graph.concat_rows(&[cls, emb])?;
        let pos = s.param(self.pos_embed)?;
        let mut x = s.graph.add(x, pos)?;
        for block in &self.trunk {
            x = block.forward(s, x)?;
        }
        Ok(TokenSeq {
            tokens: x,
            spectrum,
        })
    }

    /// Encodes RGB, NIR and TIR (in that order) through the same weights.
    pub fn encode_shared(
        &self,
        s: &mut Session<'_>,
        images: [Option<&SpectralImage>; 3],
    ) -> Result<[TokenSeq; 3]> {
        let mut out = Vec::with_capacity(3);
        for (img, sp) in images.into_iter().zip(Spectrum::ALL) {
            let img = img.ok_or_else(|| {
                Error::Data(format!("missing {sp} image; all three spectra are required"))
            })?;
            out.push(self.encode_one(s, img, sp)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Normalised penultimate class token (`1×D`).
    pub fn backbone_feature(&self, s: &mut Session<'_>, seq: &TokenSeq) -> Result<Var> {
        let cls = seq.class_token(s)?;
        self.mid_norm.forward(s, cls)
    }

    /// Re-attaches the class token to enhanced patch tokens, runs the
    /// spectrum's own final block and returns the normalised class-token row
    /// (`1×D`).
    pub fn finalize_spectrum(
        &self,
        s: &mut Session<'_>,
        tokens: EmbTokens,
        cls: Var,
        which: Spectrum,
    ) -> Result<Var> {
        let x = s.graph.concat_rows(&[cls, tokens.0])?;
        let y = self.finals[which.index()].forward(s, x)?;
        let cls = s.graph.slice_rows(y, 0, 1)?;
        self.final_norms[which.index()].forward(s, cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_8x16() -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 16,
            patch: 8,
            channels: 1,
            embed_dim: 4,
            heads: 1,
            depth: 2,
            mlp_ratio: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let cfg = ModelConfig {
            image_w: 8,
            ..cfg_8x16()
        };
        let data: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let img = SpectralImage::new(1, 8, 8, data.clone()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 64]);
        assert_eq!(p.data(), data.as_slice());
    }

    #[test]
    fn raster_order_left_half_first() {
        let cfg = cfg_8x16();
        let mut img = SpectralImage::filled(1, 8, 16, 0.0);
        for y in 0..8 {
            for x in 8..16 {
                *img.at_mut(0, y, x) = 1.0;
            }
        }
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[2, 64]);
        assert!(p.row(0).iter().all(|&v| v == 0.0));
        assert!(p.row(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let cfg = ModelConfig::default();
        let img = SpectralImage::filled(3, 32, 64, 0.42);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[32, 192]);
        assert!(p.data().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn channel_major_flattening() {
        let cfg = ModelConfig {
            image_w: 8,
            channels: 2,
            ..cfg_8x16()
        };
        let mut img = SpectralImage::filled(2, 8, 8, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                *img.at_mut(1, y, x) = 1.0;
            }
        }
        let p = patchify(&img, &cfg).unwrap();
        assert!(p.row(0)[..64].iter().all(|&v| v == 0.0));
        assert!(p.row(0)[64..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let img = SpectralImage::filled(3, 32, 32, 0.0);
        assert!(patchify(&img, &ModelConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().n_patches(), 32);
        let bad = [
            ModelConfig { image_h: 30, ..Default::default() },
            ModelConfig { heads: 5, ..Default::default() },
            ModelConfig { depth: 1, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}
