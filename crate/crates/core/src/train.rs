//! Training loop state, augmentation and checkpoint conversion.
//!
//! Every random draw of step `t` comes from streams keyed by `(seed, t)` or
//! `(seed, epoch)`, so resuming from a checkpoint taken after step `t`
//! replays step `t + 1` bit for bit.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{make_batches, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{Architecture, Coen};
use crate::objectives::{total_loss, LossBreakdown, Sgd};
use crate::params::{stream_rng, streams, ParamStore, Session};
use crate::spectral::SpectralImage;

const MOMENTUM_PREFIX: &str = "momentum/";

/// Applies the configured flip / translation / erasing identically to all
/// three spectra of a sample.
pub fn augment<R: Rng + ?Sized>(images: &[SpectralImage; 3], cfg: &TrainConfig, rng: &mut R) -> [SpectralImage; 3] {
    let mut out = images.clone();
    if cfg.flip && rng.random_bool(0.5) {
        out = out.map(|img| img.hflip());
    }
    if cfg.crop_pad > 0 {
        let pad = cfg.crop_pad as i64;
        let dy = rng.random_range(-pad..=pad);
        let dx = rng.random_range(-pad..=pad);
        out = out.map(|img| shift(&img, dy, dx));
    }
    if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob) {
        let (h, w) = (out[0].height, out[0].width);
        let eh = rng.random_range(1..=(h / 2).max(1));
        let ew = rng.random_range(1..=(w / 2).max(1));
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for img in &mut out {
            for c in 0..img.channels {
                for y in y0..y0 + eh {
                    for x in x0..x0 + ew {
                        *img.at_mut(c, y, x) = 0.5;
                    }
                }
            }
        }
    }
    out
}

fn shift(img: &SpectralImage, dy: i64, dx: i64) -> SpectralImage {
    let mut out = SpectralImage::filled(img.channels, img.height, img.width, 0.0);
    for c in 0..img.channels {
        for y in 0..img.height {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= img.height as i64 {
                continue;
            }
            for x in 0..img.width {
                let sx = x as i64 - dx;
                if sx >= 0 && sx < img.width as i64 {
                    *out.at_mut(c, y, x) = img.at(c, sy as usize, sx as usize);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct StepReport {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: LossBreakdown,
    /// How often each spectrum was ranked first in the batch.
    pub primary_counts: [usize; 3],
}

impl StepReport {
    pub fn log_line(&self) -> String {
        let mut line = format!("step={}", self.step);
        for (k, v) in self.loss.log_fields() {
            line.push_str(&format!(" {k}={v:.6}"));
        }
        let [r, n, t] = self.primary_counts;
        line.push_str(&format!(" first.rgb={r} first.nir={n} first.tir={t}"));
        line
    }
}

pub struct Trainer<'d> {
    pub cfg: RunConfig,
    pub model: Coen,
    pub store: ParamStore,
    pub opt: Sgd,
    /// Steps completed so far.
    pub step: u64,
    data: &'d Split,
    labels: Vec<usize>,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d Split) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let labels = data.labels();
        let arch = Architecture {
            model: cfg.model.clone(),
            proxy: cfg.proxy.clone(),
            cem: cfg.cem.clone(),
            classes: data.n_classes(),
        };
        if let Some(s) = data.samples.iter().find(|s| {
            s.images
                .iter()
                .any(|i| i.height != cfg.model.image_h || i.width != cfg.model.image_w)
        }) {
            return Err(Error::Data(format!(
                "sample {} does not match the model image size {}x{}",
                s.file_stem(),
                cfg.model.image_h,
                cfg.model.image_w
            )));
        }
        let mut store = ParamStore::new();
        let model = Coen::new(&mut store, arch, &mut stream_rng(cfg.seed, streams::INIT, 0))?;
        let opt = Sgd::new(cfg.optim.clone(), &store);
        let mut t = Self {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            step: 0,
            data,
            labels,
            epoch_cache: None,
        };
        // Surface batch-composition errors before step 0.
        t.batch_for(0)?;
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> usize {
        let ids = self.data.n_classes();
        ids.div_ceil(self.cfg.train.batch_p)
    }

    pub fn total_steps(&self) -> u64 {
        if self.cfg.train.steps > 0 {
            self.cfg.train.steps as u64
        } else {
            (self.cfg.optim.epochs * self.batches_per_epoch()) as u64
        }
    }

    fn batch_for(&mut self, step: u64) -> Result<Vec<usize>> {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = step / per_epoch;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = stream_rng(self.cfg.seed, streams::EPOCH, epoch);
            let batches = make_batches(&self.labels, self.cfg.train.batch_p, self.cfg.train.batch_k, &mut rng)?;
            self.epoch_cache = Some((epoch, batches));
        }
        let (_, batches) = self.epoch_cache.as_ref().expect("filled above");
        Ok(batches[(step % per_epoch) as usize].clone())
    }

    fn augmenting(&self) -> bool {
        let t = &self.cfg.train;
        t.flip || t.crop_pad > 0 || t.erase_prob > 0.0
    }

    /// Forward, backward and one optimiser update on the next batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let idx = self.batch_for(step)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let augmented: Vec<Sample>;
        let samples: Vec<&Sample> = if self.augmenting() {
            let mut rng = stream_rng(self.cfg.seed, streams::AUGMENT, step);
            augmented = idx
                .iter()
                .map(|&i| {
                    let s = &self.data.samples[i];
                    Sample {
                        images: augment(&s.images, &self.cfg.train, &mut rng),
                        ..s.clone()
                    }
                })
                .collect();
            augmented.iter().collect()
        } else {
            idx.iter().map(|&i| &self.data.samples[i]).collect()
        };
        let (grads, loss, primary_counts) = {
            let mut s = Session::new(&self.store, true, stream_rng(self.cfg.seed, streams::DROPOUT, step));
            let out = self.model.forward_batch(&mut s, &samples)?;
            let (total, loss) = total_loss(&mut s, &out.features, &self.model.heads, &labels, &self.cfg.loss, self.cfg.loss.triplet_scale(step))?;
            s.graph.backward(total)?;
            let mut counts = [0; 3];
            for r in out.rankings.iter().flatten() {
                counts[r.primary().index()] += 1;
            }
            (s.grads(), loss, counts)
        };
        self.opt.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            primary_counts,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for ((name, _), v) in self.store.iter().zip(&self.opt.velocity) {
            entries.push((format!("{MOMENTUM_PREFIX}{name}"), v.clone()));
        }
        Checkpoint {
            step: self.step,
            entries,
        }
    }

    /// Restores weights, momentum and the step counter.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.store.load_from(&params_from_checkpoint(ck))?;
        for (id, v) in self.store.ids().zip(&mut self.opt.velocity) {
            let key = format!("{MOMENTUM_PREFIX}{}", self.store.name(id));
            let m = ck
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state {key}")))?;
            if m.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {:?} does not match {:?}",
                    m.shape(),
                    v.shape()
                )));
            }
            *v = m.clone();
        }
        self.step = ck.step;
        Ok(())
    }
}

/// Parameter tensors of a checkpoint, without optimiser state.
pub fn params_from_checkpoint(ck: &Checkpoint) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, t) in &ck.entries {
        if !name.starts_with(MOMENTUM_PREFIX) {
            store.add(name.clone(), t.clone());
        }
    }
    store
}

/// Rebuilds a model for inference from a checkpoint. The class count is read
/// off the classifier heads.
pub fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Coen, ParamStore)> {
    let saved = params_from_checkpoint(ck);
    let head = saved
        .id("head.proxy.weight")
        .or_else(|| saved.id("head.vit.rgb.weight"))
        .ok_or_else(|| Error::Checkpoint("checkpoint has no classifier heads".into()))?;
    let classes = saved.get(head).shape()[1];
    let arch = Architecture {
        model: cfg.model.clone(),
        proxy: cfg.proxy.clone(),
        cem: cfg.cem.clone(),
        classes,
    };
    let mut store = ParamStore::new();
    let model = Coen::new(&mut store, arch, &mut stream_rng(cfg.seed, streams::INIT, 0))?;
    store.load_from(&saved)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shift_moves_content() {
        let mut img = SpectralImage::filled(1, 3, 3, 0.0);
        *img.at_mut(0, 1, 1) = 1.0;
        let s = shift(&img, 1, -1);
        assert_eq!(s.at(0, 2, 0), 1.0);
        assert_eq!(s.data.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn augmentation_off_is_identity() {
        let imgs = std::array::from_fn(|i| SpectralImage::filled(3, 4, 4, i as f64 / 4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&imgs, &TrainConfig::default(), &mut rng), imgs);
    }

    #[test]
    fn augmentation_keeps_spectra_aligned() {
        let mut base = SpectralImage::filled(3, 8, 8, 0.0);
        *base.at_mut(0, 2, 1) = 1.0;
        let imgs = [base.clone(), base.clone(), base];
        let cfg = TrainConfig {
            flip: true,
            crop_pad: 2,
            erase_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&imgs, &cfg, &mut rng);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[1], out[2]);
    }
}
