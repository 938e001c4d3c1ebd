//! Datasets, augmentation and segmentation metrics.

pub mod augment;
pub mod cityscapes;
pub mod metrics;
pub mod pnm;
pub mod synth;

pub use augment::{augment, flip_horizontal, resize_bilinear, resize_nearest, AugmentConfig};
pub use cityscapes::{label_id_to_train_id, load_cityscapes_dir, CityscapesPair, CITYSCAPES_CLASSES};
pub use metrics::{class_frequencies, miou, ConfusionMatrix, MiouReport};
pub use pnm::{read_pnm, write_pgm, write_ppm, PnmImage};
pub use synth::{synth_dataset, ShapeKind, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Label value excluded from losses, frequencies and metrics.
pub const IGNORE: u8 = 255;

/// One image and its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Shape `(1, 3, h, w)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `h * w` labels, each `< num_classes` or [`IGNORE`].
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, label: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Data(format!("sample image must be (1, 3, h, w), got {s}")));
        }
        if label.len() != s.plane() {
            return Err(Error::ShapeMismatch {
                op: "sample",
                dim: "label pixels",
                expected: s.plane(),
                actual: label.len(),
            });
        }
        Ok(Sample { image, label })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

/// Stacks samples of equal size into an image batch and a flat label vector
/// in `(n, h, w)` order.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot batch zero samples".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!(
                "batch mixes {}x{} and {h}x{w} samples",
                s.height(),
                s.width()
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::from_vec(Shape::new(samples.len(), 3, h, w), data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_mismatched_label() {
        let img = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(Sample::new(img.clone(), vec![0; 3]).is_err());
        assert!(Sample::new(img, vec![0; 4]).is_ok());
    }

    #[test]
    fn batch_stacks_in_order() {
        let a = Sample::new(Tensor::full(Shape::new(1, 3, 1, 2), 0.25), vec![0, 1]).unwrap();
        let b = Sample::new(Tensor::full(Shape::new(1, 3, 1, 2), 0.5), vec![2, IGNORE]).unwrap();
        let (x, y) = make_batch(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), Shape::new(2, 3, 1, 2));
        assert_eq!(x.at(1, 2, 0, 1), 0.5);
        assert_eq!(y, vec![0, 1, 2, IGNORE]);
    }
}
