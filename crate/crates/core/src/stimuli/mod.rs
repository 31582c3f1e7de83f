//! Kanizsa-style stimuli: a physical square, or four pacman inducers sitting on
//! the corners of a virtual square with their mouths arranged all in, all out
//! or at random.
//!
//! Geometry lives on the integer pixel grid. The virtual square's corners are
//! grid points, pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`,
//! and `x` grows to the right, `y` downwards.

mod dataset;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_specs, load_manifest, save_dataset, write_image_files, DatasetCounts, ImageFormat,
    ManifestEntry, Split, BLOB_FILE, MANIFEST_FILE,
};
pub use render::{apply_noise, render, render_noisy, render_oracle, StimulusImage};

/// Side length of every stimulus image.
pub const IMAGE_SIZE: usize = 32;
/// Noise standard deviations a stimulus may be assigned.
pub const NOISE_LEVELS: [f32; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
/// Smallest allowed |inducer − background| luminance difference.
pub const MIN_CONTRAST: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusClass {
    Square,
    Random,
    AllOut,
    AllIn,
}

impl StimulusClass {
    pub const ALL: [StimulusClass; 4] = [
        StimulusClass::Square,
        StimulusClass::Random,
        StimulusClass::AllOut,
        StimulusClass::AllIn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StimulusClass::Square => "Square",
            StimulusClass::Random => "Random",
            StimulusClass::AllOut => "AllOut",
            StimulusClass::AllIn => "AllIn",
        }
    }

    /// Index used by the binary classifier: 0 for square, 1 for inducers.
    pub fn target(self) -> usize {
        match self {
            StimulusClass::Square => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for StimulusClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StimulusClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "square" => Ok(StimulusClass::Square),
            "random" => Ok(StimulusClass::Random),
            "allout" => Ok(StimulusClass::AllOut),
            "allin" => Ok(StimulusClass::AllIn),
            _ => Err(Error::Input(format!("unknown stimulus class {s:?}"))),
        }
    }
}

/// Direction of a pacman's missing quarter, named by the signs of the
/// bisector's (x, y) components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mouth {
    /// +x, +y (down-right)
    PlusPlus,
    /// −x, +y (down-left)
    MinusPlus,
    /// −x, −y (up-left)
    MinusMinus,
    /// +x, −y (up-right)
    PlusMinus,
}

impl Mouth {
    pub const ALL: [Mouth; 4] = [Mouth::PlusPlus, Mouth::MinusPlus, Mouth::MinusMinus, Mouth::PlusMinus];

    pub fn signs(self) -> (f64, f64) {
        match self {
            Mouth::PlusPlus => (1.0, 1.0),
            Mouth::MinusPlus => (-1.0, 1.0),
            Mouth::MinusMinus => (-1.0, -1.0),
            Mouth::PlusMinus => (1.0, -1.0),
        }
    }

    pub fn opposite(self) -> Mouth {
        match self {
            Mouth::PlusPlus => Mouth::MinusMinus,
            Mouth::MinusPlus => Mouth::PlusMinus,
            Mouth::MinusMinus => Mouth::PlusPlus,
            Mouth::PlusMinus => Mouth::MinusPlus,
        }
    }
}

/// Corner order used everywhere: top-left, top-right, bottom-right, bottom-left.
pub const ALL_IN: [Mouth; 4] = [Mouth::PlusPlus, Mouth::MinusPlus, Mouth::MinusMinus, Mouth::PlusMinus];
pub const ALL_OUT: [Mouth; 4] = [Mouth::MinusMinus, Mouth::PlusMinus, Mouth::PlusPlus, Mouth::MinusPlus];

/// Complete description of one stimulus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub class: StimulusClass,
    pub background: f32,
    /// Luminance of the inducers, or of the square for the `Square` class.
    pub inducer: f32,
    /// Side of the (virtual) square in pixels; even.
    pub size: usize,
    /// Top-left corner of the square on the pixel grid.
    pub x0: usize,
    pub y0: usize,
    /// Inducer mouths in corner order; `None` for `Square`.
    pub orientations: Option<[Mouth; 4]>,
    pub noise_sigma: f32,
    pub rng_seed: u64,
}

/// Ranges the sampler draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub min_size: usize,
    pub max_size: usize,
    pub min_contrast: f32,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            min_size: 8,
            max_size: 20,
            min_contrast: MIN_CONTRAST,
        }
    }
}

impl StimulusSpec {
    pub fn radius(&self) -> f64 {
        self.size as f64 / 4.0
    }

    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.x0 as f64 + h, self.y0 as f64 + h)
    }

    /// Corner points in corner order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (x0, y0) = (self.x0 as f64, self.y0 as f64);
        let s = self.size as f64;
        [(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)]
    }

    pub fn contrast(&self) -> f32 {
        (self.inducer - self.background).abs()
    }

    /// Same geometry and luminances rendered at a different noise level.
    pub fn with_noise(&self, sigma: f32) -> StimulusSpec {
        StimulusSpec {
            noise_sigma: sigma,
            ..self.clone()
        }
    }

    /// Checks that the shapes fit the frame and the orientations match the
    /// class. Contrast is checked separately by [`StimulusSpec::validate`].
    pub fn validate_geometry(&self) -> Result<()> {
        if self.size < 4 || !self.size.is_multiple_of(2) {
            return Err(Error::Input(format!("square side {} must be even and at least 4", self.size)));
        }
        let r = self.radius();
        let (x0, y0, s) = (self.x0 as f64, self.y0 as f64, self.size as f64);
        let frame = IMAGE_SIZE as f64;
        if x0 - r < 0.0 || y0 - r < 0.0 || x0 + s + r > frame || y0 + s + r > frame {
            return Err(Error::Input(format!(
                "square at ({}, {}) side {} with inducer radius {r} leaves the {IMAGE_SIZE}px frame",
                self.x0, self.y0, self.size
            )));
        }
        for (name, v) in [("background", self.background), ("inducer", self.inducer)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} luminance {v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Input(format!("noise sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        match (self.class, self.orientations) {
            (StimulusClass::Square, None) => Ok(()),
            (StimulusClass::Square, Some(_)) => Err(Error::Input("square stimulus carries inducer orientations".into())),
            (_, None) => Err(Error::Input(format!("{} stimulus needs inducer orientations", self.class))),
            (StimulusClass::AllIn, Some(o)) if o != ALL_IN => Err(Error::Input("all-in mouths must face the center".into())),
            (StimulusClass::AllOut, Some(o)) if o != ALL_OUT => {
                Err(Error::Input("all-out mouths must face away from the center".into()))
            }
            (StimulusClass::Random, Some(o)) if o == ALL_IN || o == ALL_OUT => {
                Err(Error::Input("random orientations may not be all in or all out".into()))
            }
            _ => Ok(()),
        }
    }

    /// Geometry plus the minimum-contrast rule.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.contrast() < MIN_CONTRAST {
            return Err(Error::Input(format!(
                "contrast {} below the minimum {MIN_CONTRAST}",
                self.contrast()
            )));
        }
        Ok(())
    }
}

/// Draws a spec for `class`. Luminances, size, position and noise level share
/// one distribution across classes; only the inducer arrangement differs.
pub fn sample_spec<R: Rng + ?Sized>(class: StimulusClass, ranges: &SamplingRanges, rng: &mut R) -> StimulusSpec {
    let (background, inducer) = loop {
        let b: f32 = rng.random();
        let i: f32 = rng.random();
        if (b - i).abs() >= ranges.min_contrast {
            break (b, i);
        }
    };
    let sizes: Vec<usize> = (ranges.min_size..=ranges.max_size).filter(|s| s % 2 == 0).collect();
    let size = sizes[rng.random_range(0..sizes.len())];
    let margin = (size as f64 / 4.0).ceil() as usize;
    let hi = IMAGE_SIZE - size - margin;
    let x0 = rng.random_range(margin..=hi);
    let y0 = rng.random_range(margin..=hi);
    let orientations = match class {
        StimulusClass::Square => None,
        StimulusClass::AllIn => Some(ALL_IN),
        StimulusClass::AllOut => Some(ALL_OUT),
        StimulusClass::Random => Some(loop {
            let o = [0; 4].map(|_: i32| Mouth::ALL[rng.random_range(0..4)]);
            if o != ALL_IN && o != ALL_OUT {
                break o;
            }
        }),
    };
    let noise_sigma = NOISE_LEVELS[rng.random_range(0..NOISE_LEVELS.len())];
    let rng_seed = rng.random();
    StimulusSpec {
        class,
        background,
        inducer,
        size,
        x0,
        y0,
        orientations,
        noise_sigma,
        rng_seed,
    }
}
