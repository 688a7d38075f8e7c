//! Training-split augmentation: flip, replicate-pad, random crop, random erase.
//!
//! One set of transform parameters is drawn per sample and applied to every
//! frame, so multi-frame inputs stay temporally consistent.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{RngState, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub pad: usize,
    /// Crop size `(height, width)`; `None` crops back to the input size.
    pub crop: Option<(usize, usize)>,
    pub erase_prob: f64,
    /// Erased area as a fraction of the frame, `[min, max]`.
    pub erase_area: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            pad: 0,
            crop: None,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(config_err!("augmentation probabilities must lie in [0,1]"));
        }
        let (lo, hi) = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(config_err!("erase area range ({lo}, {hi}) is invalid"));
        }
        let (ch, cw) = self.crop.unwrap_or((height, width));
        let (ph, pw) = (height + 2 * self.pad, width + 2 * self.pad);
        if ch > ph || cw > pw {
            return Err(config_err!(
                "crop {ch}x{cw} is larger than the padded frame {ph}x{pw}"
            ));
        }
        Ok(())
    }
}

/// Transform parameters drawn for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub crop_origin: (usize, usize),
    /// `(y, x, h, w)` of the erased rectangle.
    pub erase: Option<(usize, usize, usize, usize)>,
}

pub fn draw(cfg: &AugmentationConfig, height: usize, width: usize, rng: &mut RngState) -> Result<AugmentDraw> {
    cfg.validate(height, width)?;
    let (ch, cw) = cfg.crop.unwrap_or((height, width));
    let flip = rng.bernoulli(cfg.flip_prob);
    let (ph, pw) = (height + 2 * cfg.pad, width + 2 * cfg.pad);
    let crop_origin = (rng.below(ph - ch + 1), rng.below(pw - cw + 1));
    let erase = if rng.bernoulli(cfg.erase_prob) {
        let area = rng.uniform_range(cfg.erase_area.0, cfg.erase_area.1) * (ch * cw) as f64;
        let aspect = rng.uniform_range(0.5, 2.0);
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, ch);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, cw);
        Some((rng.below(ch - eh + 1), rng.below(cw - ew + 1), eh, ew))
    } else {
        None
    };
    Ok(AugmentDraw {
        flip,
        crop_origin,
        erase,
    })
}

/// Applies a drawn transform to `[T, ch, H, W]` frames.
pub fn apply(frames: &Tensor, cfg: &AugmentationConfig, d: &AugmentDraw) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(shape_err!("frames must be [T, ch, H, W], got {:?}", s));
    }
    let (t, nc, h, w) = (s[0], s[1], s[2], s[3]);
    let (ch, cw) = cfg.crop.unwrap_or((h, w));
    let pad = cfg.pad as isize;
    let src = frames.data();
    let mut out = vec![0.0; t * nc * ch * cw];
    for f in 0..t {
        for c in 0..nc {
            let plane = &src[(f * nc + c) * h * w..(f * nc + c + 1) * h * w];
            let dst = &mut out[(f * nc + c) * ch * cw..(f * nc + c + 1) * ch * cw];
            for y in 0..ch {
                // replicate padding: clamp back into the source frame
                let sy = (y as isize + d.crop_origin.0 as isize - pad).clamp(0, h as isize - 1) as usize;
                for x in 0..cw {
                    let px = (x as isize + d.crop_origin.1 as isize - pad).clamp(0, w as isize - 1) as usize;
                    let sx = if d.flip { w - 1 - px } else { px };
                    dst[y * cw + x] = plane[sy * w + sx];
                }
            }
            if let Some((ey, ex, eh, ew)) = d.erase {
                let mut sum = 0.0;
                for y in ey..ey + eh {
                    for x in ex..ex + ew {
                        sum += dst[y * cw + x];
                    }
                }
                let mean = sum / (eh * ew) as Scalar;
                for y in ey..ey + eh {
                    for x in ex..ex + ew {
                        dst[y * cw + x] = mean;
                    }
                }
            }
        }
    }
    Tensor::new(&[t, nc, ch, cw], out)
}

/// Draws one transform and applies it to all frames of the sample.
pub fn augment(frames: &Tensor, cfg: &AugmentationConfig, rng: &mut RngState) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(shape_err!("frames must be [T, ch, H, W], got {:?}", s));
    }
    let d = draw(cfg, s[2], s[3], rng)?;
    apply(frames, cfg, &d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(t: usize) -> Tensor {
        let mut r = RngState::new(3);
        Tensor::new(&[t, 3, 8, 6], r.gaussian_vec(t * 3 * 8 * 6, 1.0)).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let x = frames(2);
        let y = augment(&x, &AugmentationConfig::disabled(), &mut RngState::new(1)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn flip_maps_columns_and_is_involution() {
        let x = frames(1);
        let cfg = AugmentationConfig {
            flip_prob: 1.0,
            ..AugmentationConfig::disabled()
        };
        let y = augment(&x, &cfg, &mut RngState::new(1)).unwrap();
        for c in 0..3 {
            for r in 0..8 {
                for i in 0..6 {
                    assert_eq!(y.at(&[0, c, r, i]), x.at(&[0, c, r, 5 - i]));
                }
            }
        }
        let z = augment(&y, &cfg, &mut RngState::new(2)).unwrap();
        assert_eq!(z, x);
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let cfg = AugmentationConfig {
            pad: 1,
            crop: Some((11, 6)),
            ..AugmentationConfig::disabled()
        };
        assert!(augment(&frames(1), &cfg, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn frames_share_one_draw() {
        let one = frames(1);
        let stacked: Vec<Scalar> = (0..5).flat_map(|_| one.data().to_vec()).collect();
        let x = Tensor::new(&[5, 3, 8, 6], stacked).unwrap();
        let cfg = AugmentationConfig {
            flip_prob: 0.5,
            pad: 2,
            crop: None,
            erase_prob: 1.0,
            erase_area: (0.1, 0.3),
        };
        for seed in 0..20 {
            let y = augment(&x, &cfg, &mut RngState::new(seed)).unwrap();
            assert_eq!(y.shape(), x.shape());
            let n = 3 * 8 * 6;
            for f in 1..5 {
                assert_eq!(&y.data()[f * n..(f + 1) * n], &y.data()[..n]);
            }
        }
    }

    #[test]
    fn erase_fills_with_region_mean() {
        let x = frames(1);
        let cfg = AugmentationConfig {
            erase_prob: 1.0,
            ..AugmentationConfig::disabled()
        };
        let d = AugmentDraw {
            flip: false,
            crop_origin: (0, 0),
            erase: Some((1, 2, 2, 3)),
        };
        let y = apply(&x, &cfg, &d).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for r in 1..3 {
                for i in 2..5 {
                    sum += x.at(&[0, c, r, i]);
                }
            }
            for r in 1..3 {
                for i in 2..5 {
                    assert!((y.at(&[0, c, r, i]) - sum / 6.0).abs() < 1e-12);
                }
            }
            assert_eq!(y.at(&[0, c, 0, 0]), x.at(&[0, c, 0, 0]));
        }
    }
}
