use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three aligned sensor spectra, in their fixed canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Spectrum {
    Rgb,
    Nir,
    Tir,
}

impl Spectrum {
    pub const ALL: [Spectrum; 3] = [Spectrum::Rgb, Spectrum::Nir, Spectrum::Tir];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Spectrum {
        Self::ALL[i]
    }

    /// Upper-case label used in reports and inference-mode names.
    pub fn label(self) -> &'static str {
        match self {
            Spectrum::Rgb => "RGB",
            Spectrum::Nir => "NIR",
            Spectrum::Tir => "TIR",
        }
    }

    /// Lower-case directory name in the on-disk dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Spectrum::Rgb => "rgb",
            Spectrum::Nir => "nir",
            Spectrum::Tir => "tir",
        }
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Spectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Spectrum::Rgb),
            "nir" => Ok(Spectrum::Nir),
            "tir" => Ok(Spectrum::Tir),
            other => Err(Error::Config(format!("unknown spectrum {other:?}"))),
        }
    }
}

/// `channels × height × width` image with values in `[0, 1]`, stored as
/// consecutive channel planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SpectralImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn mean_abs_diff(&self, other: &SpectralImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    /// Mirror along the horizontal axis.
    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y, self.width - 1 - x) = self.at(c, y, x);
                }
            }
        }
        out
    }

    /// Bilinear resize, used when stored images differ from the model size.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Self::filled(self.channels, height, width, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..self.channels {
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    *out.at_mut(c, y, x) = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        out
    }
}
