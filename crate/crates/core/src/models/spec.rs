use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style::StyleLayout;

/// Architecture of the conditional style-based generator.
///
/// One modulated 3x3 convolution per resolution from 4x4 up to
/// `image_resolution`, so a 32x32 generator has four style layers. Style layer
/// `i` modulates the input channels of convolution `i`, which is why
/// `layer_channels[i]` is also the length of style vector `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_resolution: usize,
    pub layer_channels: Vec<usize>,
    pub latent_dim: usize,
    pub num_classes: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_resolution: 32,
            layer_channels: vec![128, 128, 64, 64],
            latent_dim: 128,
            num_classes: 2,
        }
    }
}

/// Number of 2x resolution steps from 4x4 to `resolution`, plus one.
pub fn levels_for_resolution(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::InvalidSpec(format!(
            "image resolution must be a power of two >= 4, got {resolution}"
        )));
    }
    Ok(resolution.trailing_zeros() as usize - 1)
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let levels = levels_for_resolution(self.image_resolution)?;
        if self.layer_channels.len() != levels {
            return Err(Error::InvalidSpec(format!(
                "resolution {} needs {levels} style layers, got {}",
                self.image_resolution,
                self.layer_channels.len()
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidSpec("latent_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        StyleLayout::new(self.layer_channels.clone())?;
        Ok(())
    }

    pub fn layout(&self) -> Result<StyleLayout> {
        StyleLayout::new(self.layer_channels.clone())
    }

    /// Width of the affine input `w ⊕ condition`.
    pub fn affine_input_dim(&self) -> usize {
        self.latent_dim + self.num_classes
    }
}

/// Downsampling conv stack shared by the encoder, discriminator and classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub image_resolution: usize,
    pub channels: Vec<usize>,
}

impl ConvStackSpec {
    pub fn validate(&self) -> Result<()> {
        let levels = levels_for_resolution(self.image_resolution)?;
        if self.channels.len() != levels {
            return Err(Error::InvalidSpec(format!(
                "resolution {} needs {levels} conv blocks, got {}",
                self.image_resolution,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidSpec("conv block with zero channels".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub image_resolution: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            image_resolution: 32,
            channels: vec![16, 32, 32, 32],
            num_classes: 2,
        }
    }
}

impl ClassifierSpec {
    pub fn stack(&self) -> ConvStackSpec {
        ConvStackSpec {
            image_resolution: self.image_resolution,
            channels: self.channels.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("classifier needs at least 2 classes".into()));
        }
        self.stack().validate()
    }
}

/// Everything needed to build a generator / encoder / discriminator triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub generator: GeneratorSpec,
    pub encoder_channels: Vec<usize>,
    pub discriminator_channels: Vec<usize>,
}

impl Default for BundleSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            encoder_channels: vec![32, 64, 128, 128],
            discriminator_channels: vec![32, 64, 128, 128],
        }
    }
}

impl BundleSpec {
    /// Small widths that train in minutes on a single CPU core.
    pub fn desk_cpu() -> Self {
        Self {
            generator: GeneratorSpec {
                image_resolution: 32,
                layer_channels: vec![32, 32, 32, 16],
                latent_dim: 32,
                num_classes: 2,
            },
            encoder_channels: vec![16, 32, 32, 32],
            discriminator_channels: vec![16, 32, 32, 32],
        }
    }

    pub fn encoder(&self) -> ConvStackSpec {
        ConvStackSpec {
            image_resolution: self.generator.image_resolution,
            channels: self.encoder_channels.clone(),
        }
    }

    pub fn discriminator(&self) -> ConvStackSpec {
        ConvStackSpec {
            image_resolution: self.generator.image_resolution,
            channels: self.discriminator_channels.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder().validate()?;
        self.discriminator().validate()
    }
}
