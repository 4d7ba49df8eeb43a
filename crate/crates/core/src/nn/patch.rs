use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::tensor::Tensor;

/// One row per patch (`N × patch_pixels`), patches in row-major grid order,
/// pixels within a patch channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid(Tensor);

impl PatchGrid {
    /// Wraps an `N × patch_pixels` tensor.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(Error::shape("patch grid", t.shape(), &[0, 0]));
        }
        Ok(PatchGrid(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_patches(&self) -> usize {
        self.0.shape()[0]
    }

    /// The rows at `idx`, in order.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.0.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.0.row(i));
        }
        Tensor::new(vec![idx.len(), d], data).expect("row gather keeps width")
    }
}

pub fn patchify(image: &Image, dims: &ModelDims) -> Result<PatchGrid> {
    if image.side != dims.image_side || image.channels != dims.channels {
        return Err(Error::shape(
            "patchify",
            &[image.channels, image.side, image.side],
            &[dims.channels, dims.image_side, dims.image_side],
        ));
    }
    let (p, g) = (dims.patch_size, dims.grid_side());
    let mut data = Vec::with_capacity(image.pixels.len());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..dims.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(image.at(c, gy * p + dy, gx * p + dx));
                    }
                }
            }
        }
    }
    Ok(PatchGrid(Tensor::new(
        vec![dims.num_patches(), dims.patch_pixels()],
        data,
    )?))
}

pub fn unpatchify(grid: &PatchGrid, dims: &ModelDims) -> Result<Image> {
    let expected = [dims.num_patches(), dims.patch_pixels()];
    if grid.0.shape() != expected {
        return Err(Error::shape("unpatchify", grid.0.shape(), &expected));
    }
    let (p, g) = (dims.patch_size, dims.grid_side());
    let mut image = Image::zeros(dims.channels, dims.image_side);
    let mut src = grid.0.data().iter();
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..dims.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        *image.at_mut(c, gy * p + dy, gx * p + dx) = *src.next().unwrap();
                    }
                }
            }
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(side: usize, channels: usize, patch: usize) -> ModelDims {
        ModelDims {
            image_side: side,
            channels,
            patch_size: patch,
            ..ModelDims::default()
        }
    }

    #[test]
    fn layout_of_a_4x4_image() {
        let img = Image::new(1, 4, (0..16).map(f64::from).collect()).unwrap();
        let grid = patchify(&img, &dims(4, 1, 2)).unwrap();
        assert_eq!(grid.num_patches(), 4);
        // pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(grid.tensor().row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(grid.tensor().row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_image_gives_zero_grid() {
        let grid = patchify(&Image::zeros(3, 8), &dims(8, 3, 4)).unwrap();
        assert!(grid.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(patchify(&Image::zeros(1, 8), &dims(16, 1, 4)).is_err());
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(
            pixels in proptest::collection::vec(0.0f64..=1.0, 3 * 8 * 8),
        ) {
            let d = dims(8, 3, 2);
            let img = Image::new(3, 8, pixels).unwrap();
            let back = unpatchify(&patchify(&img, &d).unwrap(), &d).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
