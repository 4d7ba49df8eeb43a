//! Train/validation split, per-epoch batching and augmentation.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};

/// Shuffles with a seeded Fisher–Yates pass and puts the first
/// `floor(0.8·n)` items in the training split.
pub fn split_80_20<T>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 5 {
        return Err(Error::config(format!(
            "need at least 5 items for an 80/20 split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stream::SPLIT));
    let cut = n * 4 / 5;
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("permutation");
    let tr: Vec<T> = order[..cut].iter().map(&mut take).collect();
    let val: Vec<T> = order[cut..].iter().map(&mut take).collect();
    Ok((tr, val))
}

/// Index batches over `n` items for one epoch. The order depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    batches_on(stream::BATCH_U, n, batch_size, seed, epoch)
}

/// [`batches`] drawing from a caller-chosen stream family, so that several
/// datasets can be batched independently under one seed.
pub fn batches_on(
    family: u64,
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, family + (epoch & 0xffff_ffff)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    Flip,
    FlipCrop { pad: usize },
}

/// Mirrors columns.
pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for y in 0..img.side {
            for x in 0..img.side {
                *out.at_mut(c, y, x) = img.at(c, y, img.side - 1 - x);
            }
        }
    }
    out
}

/// The `side × side` window at offset `(dy, dx)` of the image zero-padded by
/// `pad` on every side.
pub fn crop_padded(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let s = img.side as isize;
    let mut out = Image::zeros(img.channels, img.side);
    for c in 0..img.channels {
        for y in 0..img.side {
            for x in 0..img.side {
                let sy = (y + dy) as isize - pad as isize;
                let sx = (x + dx) as isize - pad as isize;
                if (0..s).contains(&sy) && (0..s).contains(&sx) {
                    *out.at_mut(c, y, x) = img.at(c, sy as usize, sx as usize);
                }
            }
        }
    }
    out
}

pub fn augment(img: &Image, rng: &mut Rng, policy: AugmentPolicy) -> Image {
    match policy {
        AugmentPolicy::None => img.clone(),
        AugmentPolicy::Flip => {
            if rng.random_bool(0.5) {
                hflip(img)
            } else {
                img.clone()
            }
        }
        AugmentPolicy::FlipCrop { pad } => {
            let flipped = augment(img, rng, AugmentPolicy::Flip);
            let dy = rng.random_range(0..=2 * pad);
            let dx = rng.random_range(0..=2 * pad);
            crop_padded(&flipped, pad, dy, dx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_items_split_eight_two() {
        let (tr, val) = split_80_20((0..10).collect::<Vec<_>>(), 3).unwrap();
        assert_eq!((tr.len(), val.len()), (8, 2));
        let mut all: Vec<i32> = tr.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_80_20(vec![1, 2, 3, 4], 0).is_err());
    }

    #[test]
    fn split_depends_on_seed() {
        let base = split_80_20((0..20).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(base, split_80_20((0..20).collect::<Vec<_>>(), 0).unwrap());
        let differs = (1..=10).any(|s| split_80_20((0..20).collect::<Vec<_>>(), s).unwrap() != base);
        assert!(differs);
    }

    #[test]
    fn batch_sizes_and_epoch_order() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, batches(10, 4, 1, 0).unwrap());
        assert_ne!(batches(10, 10, 1, 0).unwrap(), batches(10, 10, 1, 1).unwrap());
        assert!(batches(3, 0, 1, 0).is_err());
    }

    fn ramp(side: usize) -> Image {
        let px = (0..side * side).map(|i| i as f64 / (side * side) as f64).collect();
        Image::new(1, side, px).unwrap()
    }

    #[test]
    fn augment_identities() {
        let img = ramp(4);
        let mut rng = rng_for(0, stream::AUGMENT);
        assert_eq!(augment(&img, &mut rng, AugmentPolicy::None), img);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(crop_padded(&img, 0, 0, 0), img);
        assert_eq!(crop_padded(&img, 2, 2, 2), img);
        assert_eq!(hflip(&img).at(0, 1, 0), img.at(0, 1, 3));
    }

    proptest! {
        #[test]
        fn augment_keeps_range(seed in 0u64..500, pad in 0usize..4) {
            let img = ramp(6);
            let mut rng = rng_for(seed, stream::AUGMENT);
            let out = augment(&img, &mut rng, AugmentPolicy::FlipCrop { pad });
            prop_assert!(out.in_unit_range());
            prop_assert_eq!(out.side, 6);
        }
    }
}
