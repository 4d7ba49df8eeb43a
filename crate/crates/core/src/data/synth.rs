//! Synthetic task with known informative patches: only the patches in `S`
//! carry a class template, the rest are pure noise.

use rand::seq::SliceRandom;
use rand::Rng as _;

pub const CLASS_FRACTION_DEFAULT: f64 = 1.0;
use rand_distr::{Distribution, Normal};

use crate::data::{DatasetBundle, Image, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    /// Informative patch positions `S`, row-major over the patch grid.
    pub informative: Vec<usize>,
    /// Template amplitude `a`.
    pub amplitude: f64,
    /// Background noise standard deviation `s`.
    pub noise: f64,
    pub per_class: usize,
    /// Fraction of the pixels of each informative patch whose template sign
    /// depends on the class (at least one pixel). The remaining pixels follow
    /// a pattern shared by all classes, so `S` stands out from the background
    /// while the classes differ only in these pixels.
    pub class_fraction: f64,
}

impl Default for SynthSpec {
    /// 16×16 grayscale, 4×4 patches, the central 2×2 block of patches informative.
    fn default() -> Self {
        SynthSpec {
            side: 16,
            channels: 1,
            patch_size: 4,
            num_classes: 4,
            informative: vec![5, 6, 9, 10],
            amplitude: 0.6,
            noise: 0.1,
            per_class: 200,
            class_fraction: CLASS_FRACTION_DEFAULT,
        }
    }
}

impl SynthSpec {
    pub fn grid_side(&self) -> usize {
        self.side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.patch_size == 0 || !self.side.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "synthetic side {} must be a positive multiple of patch_size {}",
                self.side, self.patch_size
            )));
        }
        if self.channels == 0 || self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::config(
                "synthetic channels, num_classes and per_class must be positive",
            ));
        }
        let n = self.num_patches();
        if self.informative.is_empty() || self.informative.iter().any(|&p| p >= n) {
            return Err(Error::config(format!(
                "informative patches must be a nonempty subset of 0..{n}"
            )));
        }
        if !(self.class_fraction > 0.0 && self.class_fraction <= 1.0) {
            return Err(Error::config("class_fraction must lie in (0, 1]"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synthetic amplitude and noise must be finite and >= 0"));
        }
        Ok(())
    }

    /// Template pixels for class `k` at patch `p`, one value per patch pixel
    /// in patch layout (channel-major, then row-major), each `±1/2`.
    pub fn template(&self, seed: u64, k: usize, p: usize) -> Vec<f64> {
        let len = self.patch_size * self.patch_size * self.channels;
        let sign = |rng: &mut crate::rng::Rng| if rng.random_bool(0.5) { 0.5 } else { -0.5 };
        // the shared pattern and the choice of class pixels use indices past
        // every (class, patch) pair
        let shared_idx = (self.num_classes * self.num_patches() + p) as u64;
        let mut shared = rng_for(seed, stream::SYNTH_TEMPLATE + shared_idx);
        let mut out: Vec<f64> = (0..len).map(|_| sign(&mut shared)).collect();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut shared);
        let idx = (k * self.num_patches() + p) as u64;
        let mut rng = rng_for(seed, stream::SYNTH_TEMPLATE + idx);
        let n_class = ((self.class_fraction * len as f64).round() as usize).clamp(1, len);
        for &i in &order[..n_class] {
            out[i] = sign(&mut rng);
        }
        out
    }

    /// The noiseless image of class `k`: mid-gray plus `a` times its templates.
    pub fn prototype(&self, seed: u64, k: usize) -> Image {
        let mut img = Image::zeros(self.channels, self.side);
        img.pixels.fill(0.5);
        for &p in &self.informative {
            self.stamp(&mut img, p, &self.template(seed, k, p));
        }
        img.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }

    fn stamp(&self, img: &mut Image, p: usize, template: &[f64]) {
        let ps = self.patch_size;
        let (gy, gx) = (p / self.grid_side(), p % self.grid_side());
        let mut it = template.iter();
        for c in 0..self.channels {
            for dy in 0..ps {
                for dx in 0..ps {
                    let v = it.next().expect("template length");
                    *img.at_mut(c, gy * ps + dy, gx * ps + dx) += self.amplitude * v;
                }
            }
        }
    }
}

/// Generates `per_class` images per class and splits them 80/20.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<DatasetBundle> {
    spec.validate()?;
    let templates: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|k| {
            spec.informative
                .iter()
                .map(|&p| spec.template(seed, k, p))
                .collect()
        })
        .collect();
    let normal = Normal::new(0.5, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng_for(seed, stream::SYNTH_NOISE);
    let mut items = Vec::with_capacity(spec.num_classes * spec.per_class);
    for _ in 0..spec.per_class {
        for (k, class_templates) in templates.iter().enumerate() {
            let mut img = Image::zeros(spec.channels, spec.side);
            for v in &mut img.pixels {
                *v = normal.sample(&mut rng);
            }
            for (&p, t) in spec.informative.iter().zip(class_templates) {
                spec.stamp(&mut img, p, t);
            }
            img.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            items.push(LabeledImage { image: img, label: k });
        }
    }
    let mut bundle = DatasetBundle::from_labeled(items, seed)?;
    bundle.informative_set = Some(spec.informative.clone());
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{patchify, ModelDims};

    fn small(a: f64, s: f64) -> SynthSpec {
        SynthSpec {
            amplitude: a,
            noise: s,
            per_class: 10,
            ..SynthSpec::default()
        }
    }

    fn nearest_prototype(spec: &SynthSpec, seed: u64, img: &Image) -> usize {
        let dist = |k: usize| {
            let p = spec.prototype(seed, k);
            p.pixels
                .iter()
                .zip(&img.pixels)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        (0..spec.num_classes)
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .unwrap()
    }

    #[test]
    fn no_signal_no_noise_gives_identical_images() {
        let b = synth_generate(&small(0.0, 0.0), 1).unwrap();
        assert!(b.d_tr.iter().all(|x| x.image.pixels.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn noiseless_classes_are_separable_by_nearest_template() {
        let spec = small(0.6, 0.0);
        let b = synth_generate(&spec, 4).unwrap();
        for x in b.d_tr.iter().chain(&b.d_val) {
            assert_eq!(nearest_prototype(&spec, 4, &x.image), x.label);
        }
    }

    #[test]
    fn deterministic_and_split() {
        let spec = small(0.6, 0.1);
        let a = synth_generate(&spec, 9).unwrap();
        assert_eq!(a, synth_generate(&spec, 9).unwrap());
        assert_eq!((a.d_tr.len(), a.d_val.len()), (32, 8));
        assert!(a.d_tr.iter().all(|x| x.image.in_unit_range()));
    }

    #[test]
    fn uninformative_patches_do_not_depend_on_class() {
        let spec = small(0.6, 0.0);
        let dims = ModelDims::default();
        let grids: Vec<_> = (0..spec.num_classes)
            .map(|k| patchify(&spec.prototype(2, k), &dims).unwrap())
            .collect();
        for p in 0..spec.num_patches() {
            let rows: Vec<Vec<f64>> = grids.iter().map(|g| g.tensor().row(p).to_vec()).collect();
            let same = rows.iter().all(|r| *r == rows[0]);
            assert_eq!(same, !spec.informative.contains(&p), "patch {p}");
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = SynthSpec::default();
        s.informative = vec![16];
        assert!(synth_generate(&s, 0).is_err());
        s.informative.clear();
        assert!(s.validate().is_err());
    }
}
