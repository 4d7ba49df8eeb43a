use crate::error::{Error, Result};

/// Architecture sizes shared by all four models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub emb_dim: usize,
    pub dec_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mask_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            image_side: 16,
            channels: 1,
            patch_size: 4,
            emb_dim: 32,
            dec_dim: 16,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 2,
            num_classes: 4,
            mask_hidden: 64,
        }
    }
}

impl ModelDims {
    /// CIFAR-sized model: 32×32 RGB, 2-pixel patches.
    pub fn cifar() -> Self {
        ModelDims {
            image_side: 32,
            channels: 3,
            patch_size: 2,
            num_classes: 10,
            ..ModelDims::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("emb_dim", self.emb_dim),
            ("dec_dim", self.dec_dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("mask_hidden", self.mask_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image_side {} is not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if !self.emb_dim.is_multiple_of(self.heads) || !self.dec_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "emb_dim {} and dec_dim {} must be divisible by heads {}",
                self.emb_dim, self.dec_dim, self.heads
            )));
        }
        if self.num_patches() < 2 {
            return Err(Error::config("need at least 2 patches"));
        }
        Ok(())
    }
}
