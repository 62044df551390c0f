use rand::Rng;

use crate::data::{GrayImage, Mask};

/// Which axes to mirror.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    /// Each axis flipped with probability 1/2.
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Flips {
            horizontal: rng.gen_bool(0.5),
            vertical: rng.gen_bool(0.5),
        }
    }

    pub fn apply<V: Copy>(self, data: &[V], height: usize, width: usize) -> Vec<V> {
        assert_eq!(data.len(), height * width);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..height {
            let sy = if self.vertical { height - 1 - y } else { y };
            for x in 0..width {
                let sx = if self.horizontal { width - 1 - x } else { x };
                out.push(data[sy * width + sx]);
            }
        }
        out
    }
}

/// An image with the prior levels and pseudo-label aligned to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: GrayImage,
    pub prior: Option<Vec<u8>>,
    pub pseudo: Option<Mask>,
}

/// Flip image, prior and pseudo-label by the same random axes.
pub fn augment_flip<R: Rng>(sample: &AugmentedSample, rng: &mut R) -> AugmentedSample {
    apply_flips(sample, Flips::draw(rng))
}

pub fn apply_flips(sample: &AugmentedSample, flips: Flips) -> AugmentedSample {
    let (h, w) = (sample.image.height, sample.image.width);
    AugmentedSample {
        image: GrayImage {
            height: h,
            width: w,
            values: flips.apply(&sample.image.values, h, w),
        },
        prior: sample.prior.as_ref().map(|p| flips.apply(p, h, w)),
        pseudo: sample.pseudo.as_ref().map(|m| Mask {
            height: m.height,
            width: m.width,
            bits: flips.apply(&m.bits, m.height, m.width),
        }),
    }
}
