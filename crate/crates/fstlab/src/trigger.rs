//! Backdoor triggers: a corner patch that overwrites pixels, and a
//! full-image blend.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::tensor::Tensor;

/// A concrete trigger with its pattern realized as pixel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", deny_unknown_fields)]
pub enum TriggerSpec {
    /// Overwrite a [k, k, c] region anchored at the lower-right corner,
    /// inset by `corner_offset` pixels on both axes.
    #[serde(rename_all = "camelCase")]
    Patch { pattern: Tensor, corner_offset: usize },
    /// Blend the whole image with a same-shaped pattern:
    /// out = (1 - blendRatio) * image + blendRatio * pattern.
    #[serde(rename_all = "camelCase")]
    Blended { pattern: Tensor, blend_ratio: f64 },
}

impl TriggerSpec {
    /// Checkerboard patch: 1.0 where (row + col) is even, 0.0 elsewhere,
    /// identical across channels.
    pub fn checkerboard(size: usize, channels: usize, corner_offset: usize) -> Result<TriggerSpec> {
        if size == 0 || channels == 0 {
            return Err(Error::config("checkerboard size and channels must be positive"));
        }
        let mut pattern = Tensor::zeros(&[size, size, channels]);
        for i in 0..size {
            for j in 0..size {
                if (i + j) % 2 == 0 {
                    for c in 0..channels {
                        pattern.data_mut()[(i * size + j) * channels + c] = 1.0;
                    }
                }
            }
        }
        Ok(TriggerSpec::Patch { pattern, corner_offset })
    }

    /// Smooth full-image blend pattern: a coarse seeded grid, bilinearly
    /// upsampled, like the class templates but from its own stream.
    pub fn blended_noise(
        height: usize,
        width: usize,
        channels: usize,
        blend_ratio: f64,
        seed: u64,
    ) -> Result<TriggerSpec> {
        use rand::Rng;
        if !(blend_ratio > 0.0 && blend_ratio <= 1.0) {
            return Err(Error::config(format!("blendRatio must be in (0, 1], got {blend_ratio}")));
        }
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config("blend pattern dimensions must be positive"));
        }
        let grid = 4usize.min(height).min(width);
        let mut rng = RngState::new(seed, rng::stream::TRIGGER_PATTERN).rng();
        let coarse: Vec<f64> = (0..grid * grid * channels).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pattern = crate::dataset::upsample_bilinear(&coarse, grid, grid, channels, height, width);
        Ok(TriggerSpec::Blended { pattern, blend_ratio })
    }

    /// Short label used in reports and file names.
    pub fn describe(&self) -> String {
        match self {
            TriggerSpec::Patch { pattern, corner_offset } => {
                format!("patch{}@{}", pattern.shape()[0], corner_offset)
            }
            TriggerSpec::Blended { blend_ratio, .. } => format!("blend{blend_ratio}"),
        }
    }

    fn check_fits(&self, shape: &[usize]) -> Result<()> {
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        match self {
            TriggerSpec::Patch { pattern, corner_offset } => {
                let (ph, pw, pc) = (pattern.shape()[0], pattern.shape()[1], pattern.shape()[2]);
                if pc != c {
                    return Err(Error::input(format!(
                        "patch has {pc} channels, image has {c}"
                    )));
                }
                if ph + corner_offset > h || pw + corner_offset > w {
                    return Err(Error::input(format!(
                        "patch {ph}x{pw} at offset {corner_offset} does not fit a {h}x{w} image"
                    )));
                }
            }
            TriggerSpec::Blended { pattern, .. } => {
                if pattern.shape() != shape {
                    return Err(Error::input(format!(
                        "blend pattern shape {:?} does not match image shape {:?}",
                        pattern.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(())
    }

    /// In-place application to one sample slab ([h, w, c] values).
    pub(crate) fn apply_slab(&self, slab: &mut [f64], shape: &[usize]) {
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        match self {
            TriggerSpec::Patch { pattern, corner_offset } => {
                let (ph, pw) = (pattern.shape()[0], pattern.shape()[1]);
                let (y0, x0) = (h - corner_offset - ph, w - corner_offset - pw);
                for i in 0..ph {
                    for j in 0..pw {
                        for ch in 0..c {
                            slab[((y0 + i) * w + (x0 + j)) * c + ch] =
                                pattern.data()[(i * pw + j) * c + ch];
                        }
                    }
                }
            }
            TriggerSpec::Blended { pattern, blend_ratio } => {
                for (x, &p) in slab.iter_mut().zip(pattern.data()) {
                    *x = ((1.0 - blend_ratio) * *x + blend_ratio * p).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Apply a trigger to a single [h, w, c] image, returning the stamped copy.
pub fn apply_trigger(image: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(Error::input(format!("image must be [h,w,c], got {:?}", image.shape())));
    }
    spec.check_fits(image.shape())?;
    let mut out = image.clone();
    let shape = out.shape().to_vec();
    spec.apply_slab(out.data_mut(), &shape);
    Ok(out)
}

/// Apply a trigger to every image of a batch tensor ([n, h, w, c]), in place.
pub(crate) fn apply_trigger_batch(images: &mut Tensor, spec: &TriggerSpec) -> Result<()> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::input(format!("batch must be [n,h,w,c], got {shape:?}")));
    }
    spec.check_fits(&shape[1..])?;
    let slab = shape[1] * shape[2] * shape[3];
    for i in 0..shape[0] {
        spec.apply_slab(&mut images.data_mut()[i * slab..(i + 1) * slab], &shape[1..]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, c: usize, v: f64) -> Tensor {
        let mut t = Tensor::zeros(&[h, w, c]);
        t.fill(v);
        t
    }

    #[test]
    fn patch_lands_in_the_lower_right_corner() {
        let img = flat_image(8, 8, 1, 0.5);
        let spec = TriggerSpec::checkerboard(3, 1, 0).unwrap();
        let out = apply_trigger(&img, &spec).unwrap();
        // Rows 5..8, cols 5..8 hold the checkerboard; everything else 0.5.
        for y in 0..8 {
            for x in 0..8 {
                let v = out.data()[y * 8 + x];
                if y >= 5 && x >= 5 {
                    let want = if ((y - 5) + (x - 5)) % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(v, want, "pixel ({y},{x})");
                } else {
                    assert_eq!(v, 0.5, "pixel ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn corner_offset_moves_the_patch_inward() {
        let img = flat_image(8, 8, 1, 0.25);
        let spec = TriggerSpec::checkerboard(2, 1, 1).unwrap();
        let out = apply_trigger(&img, &spec).unwrap();
        // Occupies rows 5..7, cols 5..7; the outermost ring stays clean.
        for x in 0..8 {
            assert_eq!(out.data()[7 * 8 + x], 0.25);
            assert_eq!(out.data()[x * 8 + 7], 0.25);
        }
        assert_eq!(out.data()[5 * 8 + 5], 1.0);
    }

    #[test]
    fn blend_is_the_exact_convex_combination() {
        let img = flat_image(4, 4, 1, 0.5);
        let spec = TriggerSpec::blended_noise(4, 4, 1, 0.2, 0).unwrap();
        let out = apply_trigger(&img, &spec).unwrap();
        let TriggerSpec::Blended { pattern, .. } = &spec else { unreachable!() };
        for (o, p) in out.data().iter().zip(pattern.data()) {
            assert!((o - (0.8 * 0.5 + 0.2 * p)).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_does_not_mutate_the_input() {
        let img = flat_image(8, 8, 1, 0.5);
        let spec = TriggerSpec::checkerboard(3, 1, 0).unwrap();
        let _ = apply_trigger(&img, &spec).unwrap();
        assert!(img.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn oversized_patch_and_mismatched_blend_are_rejected() {
        let img = flat_image(4, 4, 1, 0.5);
        let spec = TriggerSpec::checkerboard(5, 1, 0).unwrap();
        assert!(apply_trigger(&img, &spec).is_err());
        let offset = TriggerSpec::checkerboard(3, 1, 2).unwrap();
        assert!(apply_trigger(&img, &offset).is_err());
        let blend = TriggerSpec::blended_noise(8, 8, 1, 0.2, 0).unwrap();
        assert!(apply_trigger(&img, &blend).is_err());
        let chan = TriggerSpec::checkerboard(2, 3, 0).unwrap();
        assert!(apply_trigger(&img, &chan).is_err());
    }

    #[test]
    fn blend_pattern_is_seed_stable() {
        let a = TriggerSpec::blended_noise(16, 16, 1, 0.2, 5).unwrap();
        let b = TriggerSpec::blended_noise(16, 16, 1, 0.2, 5).unwrap();
        let c = TriggerSpec::blended_noise(16, 16, 1, 0.2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn triggered_pixels_stay_in_range() {
        let img = flat_image(16, 16, 1, 1.0);
        for spec in [
            TriggerSpec::checkerboard(3, 1, 0).unwrap(),
            TriggerSpec::blended_noise(16, 16, 1, 0.9, 3).unwrap(),
        ] {
            let out = apply_trigger(&img, &spec).unwrap();
            assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
