//! Seeded flip / scale / crop augmentation. Images are resampled
//! bilinearly, labels by nearest neighbour so ids are never blended.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Output `(h, w)`; `None` keeps the scaled size.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.75,
            crop: None,
        }
    }
}

/// Source coordinate of output index `o` under half-pixel alignment.
fn src_coord(o: usize, in_len: usize, out_len: usize) -> f64 {
    (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

pub fn resize_bilinear(image: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidValue(format!("cannot resize to {oh}x{ow}")));
    }
    let taps = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f32)> {
        (0..out_len)
            .map(|o| {
                let src = src_coord(o, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(s.h, oh);
    let tx = taps(s.w, ow);
    Ok(Tensor::from_fn(s.with_hw(oh, ow), |n, c, y, x| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let p = image.plane(n, c);
        let top = p[y0 * s.w + x0] * (1.0 - fx) + p[y0 * s.w + x1] * fx;
        let bot = p[y1 * s.w + x0] * (1.0 - fx) + p[y1 * s.w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

pub fn resize_nearest(label: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let idx = |o: usize, in_len: usize, out_len: usize| {
        (src_coord(o, in_len, out_len) + 0.5).floor().clamp(0.0, (in_len - 1) as f64) as usize
    };
    let ys: Vec<usize> = (0..oh).map(|y| idx(y, h, oh)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| idx(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &ys {
        out.extend(xs.iter().map(|&x| label[y * w + x]));
    }
    out
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let image = Tensor::from_fn(sample.image.shape(), |n, c, y, x| sample.image.at(n, c, y, w - 1 - x));
    let mut label = Vec::with_capacity(h * w);
    for row in sample.label.chunks_exact(w) {
        label.extend(row.iter().rev());
    }
    Sample { image, label }
}

fn crop(sample: &Sample, top: usize, left: usize, ch: usize, cw: usize) -> Sample {
    let w = sample.width();
    let image = Tensor::from_fn(Shape::new(1, 3, ch, cw), |n, c, y, x| sample.image.at(n, c, y + top, x + left));
    let mut label = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        label.extend_from_slice(&sample.label[y * w + left..y * w + left + cw]);
    }
    Sample { image, label }
}

/// Flip with probability `flip_prob`, rescale by a factor drawn uniformly
/// from `[scale_min, scale_max]`, then take a random crop.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    if !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) {
        return Err(Error::Config(format!(
            "scale range [{}, {}] is invalid",
            cfg.scale_min, cfg.scale_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    };
    let (h, w) = (out.height(), out.width());
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    if (oh, ow) != (h, w) {
        out = Sample {
            image: resize_bilinear(&out.image, oh, ow)?,
            label: resize_nearest(&out.label, h, w, oh, ow),
        };
    }
    if let Some((ch, cw)) = cfg.crop {
        if ch > oh || cw > ow {
            return Err(Error::Data(format!(
                "crop {ch}x{cw} larger than the scaled image {oh}x{ow}"
            )));
        }
        let top = rng.gen_range(0..=oh - ch);
        let left = rng.gen_range(0..=ow - cw);
        out = crop(&out, top, left, ch, cw);
    }
    Ok(out)
}
