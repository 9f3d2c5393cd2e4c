//! Multi-spectral samples, P×K batch sampling, the procedural generator and
//! the on-disk layout.

mod io;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::spectral::SpectralImage;

pub use io::{load_dataset, load_split, write_dataset, METADATA_FILE};
pub use synth::{degrade, generate, render_clean, DegradationDraws, Scenario, Signature, SynthConfig};

/// Three spatially aligned spectral images with identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Indexed by `Spectrum::index`.
    pub images: [SpectralImage; 3],
    /// Dense label within its split.
    pub label: usize,
    /// Identity as written on disk.
    pub identity: u32,
    pub cam: u32,
    pub seq: u32,
    /// Unique within a dataset; used for self-match exclusion.
    pub uid: u64,
    /// Applied scenario (`mixed` is resolved per sample).
    pub scenario: Scenario,
    /// Per-spectrum degradation severity, RGB/NIR/TIR.
    pub severity: [f64; 3],
}

impl Sample {
    pub fn file_stem(&self) -> String {
        format!("{:04}_{:02}_{:04}", self.identity, self.cam, self.seq)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn cams(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.cam as usize).collect()
    }

    pub fn uids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.uid).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// Rewrites labels as dense indices over the sorted on-disk identities.
    pub fn reindex(&mut self) {
        let map = dense_map(self.samples.iter().map(|s| s.identity));
        for s in &mut self.samples {
            s.label = map[&s.identity];
        }
    }
}

fn dense_map(ids: impl Iterator<Item = u32>) -> BTreeMap<u32, usize> {
    let mut map: BTreeMap<u32, usize> = ids.map(|i| (i, 0)).collect();
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    map
}

/// Train split plus query/gallery retrieval splits. Query and gallery share
/// one label space; train labels are dense on their own.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub query: Split,
    pub gallery: Split,
}

impl Dataset {
    pub fn reindex(&mut self) {
        self.train.reindex();
        let map = dense_map(
            self.query
                .samples
                .iter()
                .chain(&self.gallery.samples)
                .map(|s| s.identity),
        );
        for s in self.query.samples.iter_mut().chain(&mut self.gallery.samples) {
            s.label = map[&s.identity];
        }
    }
}

/// One epoch of P×K batches over `labels` (sample index -> dense label).
///
/// Identities are shuffled and chunked into groups of `p`; a trailing short
/// group is topped up with identities drawn from the rest, so every identity
/// appears at least once. Each identity contributes `k` samples, drawn
/// without replacement when it has enough and with replacement otherwise.
pub fn make_batches<R: Rng + ?Sized>(
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 2 {
        return Err(Error::Config(format!(
            "batch needs P >= 2 and K >= 2 for triplet mining, got P={p} K={k}"
        )));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Config(format!(
            "batch needs P={p} identities but the training split has {}",
            by_id.len()
        )));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let mut batches = Vec::with_capacity(ids.len().div_ceil(p));
    for chunk in ids.chunks(p) {
        let mut group = chunk.to_vec();
        while group.len() < p {
            let pick = ids[rng.random_range(0..ids.len())];
            if !group.contains(&pick) {
                group.push(pick);
            }
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in group {
            let pool = &by_id[&id];
            if pool.len() >= k {
                let mut pool = pool.clone();
                pool.shuffle(rng);
                batch.extend_from_slice(&pool[..k]);
            } else {
                batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two() {
        let labels = [0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&labels, 2, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        let mut got: Vec<usize> = b[0].iter().map(|&i| labels[i]).collect();
        got.sort();
        assert_eq!(got, vec![0, 0, 1, 1]);
    }

    #[test]
    fn too_few_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_batches(&[0, 0, 1, 1], 4, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn small_identities_sample_with_replacement() {
        let labels = [0, 1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = make_batches(&labels, 2, 3, &mut rng).unwrap();
        assert_eq!(b[0].iter().filter(|&&i| i == 0).count(), 3);
    }

    #[test]
    fn reindex_is_dense_and_sorted() {
        let mk = |identity| Sample {
            images: std::array::from_fn(|_| SpectralImage::filled(1, 1, 1, 0.0)),
            label: 99,
            identity,
            cam: 0,
            seq: 0,
            uid: 0,
            scenario: Scenario::Normal,
            severity: [0.0; 3],
        };
        let mut s = Split::new(vec![mk(40), mk(7), mk(40), mk(12)]);
        s.reindex();
        assert_eq!(s.labels(), vec![2, 0, 2, 1]);
        assert_eq!(s.n_classes(), 3);
    }
}
