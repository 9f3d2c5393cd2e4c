//! Dataset layout on disk:
//!
//! ```text
//! <root>/<split>/<spectrum>/<identity>_<cam>_<seq>.png
//! <root>/<split>/meta.csv
//! ```
//!
//! `split` is `train`, `query` or `gallery`; `spectrum` is `rgb`, `nir` or
//! `tir`. Images are 8-bit RGB PNGs. `meta.csv` is optional on load and has
//! the columns `file, identity, cam, seq, scenario, sev_rgb, sev_nir,
//! sev_tir`, where `file` is the shared file name of the triplet.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Scenario, Split};
use crate::error::{Error, Result};
use crate::spectral::{SpectralImage, Spectrum};

pub const METADATA_FILE: &str = "meta.csv";
const SPLITS: [&str; 3] = ["train", "query", "gallery"];

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    file: String,
    identity: u32,
    cam: u32,
    seq: u32,
    scenario: Scenario,
    sev_rgb: f64,
    sev_nir: f64,
    sev_tir: f64,
}

fn to_png(img: &SpectralImage) -> Result<RgbImage> {
    if img.channels != 3 {
        return Err(Error::Data(format!(
            "only 3-channel images can be written, got {}",
            img.channels
        )));
    }
    let plane = img.height * img.width;
    let px = |c: usize, i: usize| (img.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let i = y as usize * img.width + x as usize;
        Rgb([px(0, i), px(1, i), px(2, i)])
    }))
}

fn from_png(path: &Path) -> Result<SpectralImage> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    SpectralImage::new(3, h, w, data)
}

/// Writes all splits under `root`, creating directories as needed.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    for (name, split) in SPLITS.iter().zip([&ds.train, &ds.query, &ds.gallery]) {
        let dir = root.join(name);
        for sp in Spectrum::ALL {
            let d = dir.join(sp.dir_name());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let meta_path = dir.join(METADATA_FILE);
        let mut meta = csv::Writer::from_path(&meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        for s in &split.samples {
            let file = format!("{}.png", s.file_stem());
            for sp in Spectrum::ALL {
                let path = dir.join(sp.dir_name()).join(&file);
                to_png(&s.images[sp.index()])?
                    .save(&path)
                    .map_err(|source| Error::Image { path, source })?;
            }
            meta.serialize(MetaRow {
                file,
                identity: s.identity,
                cam: s.cam,
                seq: s.seq,
                scenario: s.scenario,
                sev_rgb: s.severity[0],
                sev_nir: s.severity[1],
                sev_tir: s.severity[2],
            })
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        }
        meta.flush().map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

fn parse_stem(path: &Path) -> Result<(u32, u32, u32)> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let parts: Vec<&str> = stem.split('_').collect();
    let parsed: Option<Vec<u32>> = (parts.len() == 3)
        .then(|| parts.iter().map(|p| p.trim_start_matches(['c', 'C']).parse().ok()).collect())
        .flatten();
    match parsed.as_deref() {
        Some(&[id, cam, seq]) => Ok((id, cam, seq)),
        _ => Err(Error::Data(format!(
            "{}: file name must be <identity>_<cam>_<seq>.<ext>",
            path.display()
        ))),
    }
}

fn read_meta(path: &Path) -> Result<HashMap<String, MetaRow>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in rdr.deserialize::<MetaRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        out.insert(row.file.clone(), row);
    }
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

/// Loads one split directory, resizing every image to `height × width`.
/// Labels are left as on-disk identities; [`Dataset::reindex`] densifies.
pub fn load_split(dir: &Path, height: usize, width: usize) -> Result<Split> {
    let rgb_dir = dir.join(Spectrum::Rgb.dir_name());
    let entries = fs::read_dir(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(&rgb_dir, e))?.path();
        if is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    let meta = read_meta(&dir.join(METADATA_FILE))?;
    let mut samples = Vec::with_capacity(files.len());
    for rgb_path in files {
        let (identity, cam, seq) = parse_stem(&rgb_path)?;
        let name = rgb_path.file_name().expect("listed file").to_owned();
        let mut images = Vec::with_capacity(3);
        for sp in Spectrum::ALL {
            let path = dir.join(sp.dir_name()).join(&name);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "missing {sp} image for sample {}: {}",
                    rgb_path.display(),
                    path.display()
                )));
            }
            images.push(from_png(&path)?.resize(height, width));
        }
        let m = meta.get(name.to_str().unwrap_or_default());
        let images: [SpectralImage; 3] = images.try_into().expect("three spectra");
        samples.push(Sample {
            images,
            label: identity as usize,
            identity,
            cam,
            seq,
            uid: ((identity as u64) << 40) | ((cam as u64) << 24) | seq as u64,
            scenario: m.map_or(Scenario::Normal, |m| m.scenario),
            severity: m.map_or([0.0; 3], |m| [m.sev_rgb, m.sev_nir, m.sev_tir]),
        });
    }
    Ok(Split::new(samples))
}

/// Loads `train`, `query` and `gallery` under `root`. Query and gallery may
/// be absent; train must contain at least one sample.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut splits = Vec::with_capacity(3);
    for name in SPLITS {
        let dir = root.join(name);
        splits.push(if dir.is_dir() {
            load_split(&dir, height, width)?
        } else {
            Split::default()
        });
    }
    let [train, query, gallery]: [Split; 3] = splits.try_into().expect("three splits");
    if train.is_empty() && query.is_empty() && gallery.is_empty() {
        return Err(Error::Data(format!("no samples found under {}", root.display())));
    }
    let mut ds = Dataset { train, query, gallery };
    ds.reindex();
    Ok(ds)
}
