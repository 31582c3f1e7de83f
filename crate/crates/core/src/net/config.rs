use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Mixing coefficients of the recurrent update: feedforward drive `beta`,
/// feedback pull `lambda`, and error-correction step `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub beta: f32,
    pub lambda: f32,
    pub alpha: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta: 0.2,
            lambda: 0.1,
            alpha: 0.1,
        }
    }
}

impl Hyper {
    pub fn new(beta: f32, lambda: f32, alpha: f32) -> Result<Self> {
        let h = Self { beta, lambda, alpha };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.lambda, self.alpha];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("coefficients must be finite and >= 0: {self:?}")));
        }
        if self.beta + self.lambda > 1.0 {
            return Err(Error::Config(format!(
                "beta + lambda = {} exceeds 1; the memory coefficient would be negative",
                self.beta + self.lambda
            )));
        }
        Ok(())
    }

    /// Weight on `e_n(t)` for layers that receive feedback.
    pub fn memory(&self) -> f32 {
        1.0 - self.beta - self.lambda
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Widths of the hidden dense layers after the batch norm.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl HeadSpec {
    pub fn binary() -> Self {
        Self {
            hidden: vec![256, 128],
            classes: 2,
        }
    }
}

/// Layer geometry. Every encoder uses the same square kernel, stride and
/// padding; decoder `n` is the transpose of encoder `n + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub head: Option<HeadSpec>,
    pub feedback: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::predictive()
    }
}

impl Architecture {
    /// Three 128-channel 5×5 stride-2 encoders with mirrored decoders and the
    /// 2048 → 256 → 128 → 2 head.
    pub fn predictive() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            channels: vec![128, 128, 128],
            kernel: 5,
            stride: 2,
            padding: 2,
            head: Some(HeadSpec::binary()),
            feedback: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn encoder_specs(&self) -> Result<Vec<ConvSpec>> {
        let mut prev = self.input_channels;
        self.channels
            .iter()
            .map(|&c| {
                let spec = ConvSpec::new(prev, c, self.kernel, self.stride, self.padding)?;
                prev = c;
                Ok(spec)
            })
            .collect()
    }

    /// `(channels, height, width)` of `e_0 ..= e_N`.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(self.input_channels, self.input_size, self.input_size)];
        for spec in self.encoder_specs()? {
            let (_, h, w) = *shapes.last().expect("non-empty");
            shapes.push((spec.out_channels, spec.out_extent(h)?, spec.out_extent(w)?));
        }
        Ok(shapes)
    }

    pub fn flatten_features(&self) -> Result<usize> {
        let (c, h, w) = *self.layer_shapes()?.last().expect("non-empty");
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("architecture needs at least one encoding layer".into()));
        }
        let shapes = self.layer_shapes()?;
        if shapes.iter().any(|&(_, h, w)| h == 0 || w == 0) {
            return Err(Error::Config(format!("layer chain collapses: {shapes:?}")));
        }
        if self.feedback {
            for (spec, pair) in self.encoder_specs()?.iter().zip(shapes.windows(2)) {
                spec.check_transpose_target((pair[1].1, pair[1].2), (pair[0].1, pair[0].2))?;
            }
        }
        if let Some(head) = &self.head {
            if head.classes < 2 {
                return Err(Error::Config("classifier head needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

/// Architecture, update coefficients and training unroll length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcConfig {
    pub arch: Architecture,
    pub hyper: Hyper,
    pub timesteps: usize,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::predictive(),
            hyper: Hyper::default(),
            timesteps: 10,
        }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.hyper.validate()?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "FF")]
    Ff,
    #[serde(rename = "FF-C")]
    FfC,
    #[serde(rename = "FF-K")]
    FfK,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Ff, BaselineKind::FfC, BaselineKind::FfK];

    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Ff => "FF",
            BaselineKind::FfC => "FF-C",
            BaselineKind::FfK => "FF-K",
        }
    }

    /// Feedforward-only geometry: wider channels for FF-C, a 7×7 kernel (with
    /// padding 3 to keep the 32→16→8→4 chain) for FF-K.
    pub fn architecture(self) -> Architecture {
        let mut arch = Architecture::predictive();
        arch.feedback = false;
        match self {
            BaselineKind::Ff => {}
            BaselineKind::FfC => arch.channels = vec![172, 172, 172],
            BaselineKind::FfK => {
                arch.kernel = 7;
                arch.padding = 3;
            }
        }
        arch
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FF" => Ok(BaselineKind::Ff),
            "FF-C" | "FFC" => Ok(BaselineKind::FfC),
            "FF-K" | "FFK" => Ok(BaselineKind::FfK),
            _ => Err(Error::Config(format!("unknown baseline {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_flattens_to_2048() {
        let arch = Architecture::predictive();
        let shapes = arch.layer_shapes().unwrap();
        assert_eq!(shapes, vec![(3, 32, 32), (128, 16, 16), (128, 8, 8), (128, 4, 4)]);
        assert_eq!(arch.flatten_features().unwrap(), 2048);
        arch.validate().unwrap();
    }

    #[test]
    fn baselines_keep_the_chain() {
        for kind in BaselineKind::ALL {
            let arch = kind.architecture();
            let last = *arch.layer_shapes().unwrap().last().unwrap();
            assert_eq!((last.1, last.2), (4, 4), "{kind:?}");
        }
        assert_eq!(BaselineKind::FfC.architecture().channels, vec![172, 172, 172]);
        assert_eq!(BaselineKind::FfK.architecture().kernel, 7);
    }

    #[test]
    fn padding_four_breaks_the_flatten_size() {
        let mut arch = Architecture::predictive();
        arch.padding = 4;
        assert_eq!(
            arch.layer_shapes().unwrap().iter().map(|s| s.1).collect::<Vec<_>>(),
            vec![32, 18, 11, 8]
        );
        assert_ne!(arch.flatten_features().unwrap(), 2048);
    }

    #[test]
    fn hyper_rejects_negative_memory() {
        assert!(Hyper::new(0.7, 0.4, 0.1).is_err());
        assert!(Hyper::new(0.2, -0.1, 0.1).is_err());
        assert!(Hyper::new(1.0, 0.0, 0.0).is_ok());
    }
}
