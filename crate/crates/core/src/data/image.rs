use crate::error::{Error, Result};

/// A `channels × side × side` image with pixels in `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != channels * side * side {
            return Err(Error::shape(
                "image",
                &[channels, side, side],
                &[pixels.len()],
            ));
        }
        Ok(Image {
            channels,
            side,
            pixels,
        })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Image {
            channels,
            side,
            pixels: vec![0.0; channels * side * side],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.pixels[(c * self.side + y) * self.side + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// An image with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}
