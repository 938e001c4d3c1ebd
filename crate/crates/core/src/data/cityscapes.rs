//! Cityscapes-style directory ingestion.
//!
//! Layout: `<image_root>/<split>/<city>/<stem>_leftImg8bit.<ext>` paired with
//! `<label_root>/<split>/<city>/<stem>_gtFine_labelIds.<ext>` (any file in the
//! city folder named `<stem>_*labelIds.<ext>` is accepted). Raw label ids are
//! mapped to the 19 evaluation classes with the dataset's published id table;
//! every other valid id becomes [`IGNORE`]. Only PNM files can be decoded.

use std::path::{Path, PathBuf};

use crate::data::pnm::read_pnm;
use crate::data::{Sample, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CITYSCAPES_CLASSES: usize = 19;

const IMAGE_SUFFIX: &str = "_leftImg8bit";

/// Train id for raw label ids 0..=33 (published convention of the dataset).
const I: u8 = IGNORE;

const TRAIN_IDS: [u8; 34] = [
    I, I, I, I, I, I, I, // unlabeled .. ground
    0, 1, // road, sidewalk
    I, I, // parking, rail track
    2, 3, 4, // building, wall, fence
    I, I, I, // guard rail, bridge, tunnel
    5, I, // pole, polegroup
    6, 7, 8, 9, 10, // traffic light, traffic sign, vegetation, terrain, sky
    11, 12, 13, 14, 15, // person, rider, car, truck, bus
    I, I, // caravan, trailer
    16, 17, 18, // train, motorcycle, bicycle
];

pub fn label_id_to_train_id(id: u8) -> Result<u8> {
    TRAIN_IDS
        .get(id as usize)
        .copied()
        .ok_or_else(|| Error::Data(format!("unknown Cityscapes label id {id}")))
}

/// A lazily loaded image/label pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CityscapesPair {
    pub image: PathBuf,
    pub label: PathBuf,
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Enumerates the pairs of one split, sorted by path. Every image must have
/// exactly one label file.
pub fn load_cityscapes_dir(image_root: &Path, label_root: &Path, split: &str) -> Result<Vec<CityscapesPair>> {
    let mut pairs = Vec::new();
    for city in list_dir(&image_root.join(split))? {
        if !city.is_dir() {
            continue;
        }
        let city_name = city.file_name().expect("directory entry has a name");
        let label_dir = label_root.join(split).join(city_name);
        let labels = if label_dir.is_dir() { list_dir(&label_dir)? } else { Vec::new() };
        for image in list_dir(&city)? {
            let Some(name) = image.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) else {
                continue;
            };
            let prefix = format!("{stem}_");
            let mut matches = labels.iter().filter(|l| {
                l.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with(&prefix) && s.ends_with("labelIds"))
            });
            let label = matches.next().ok_or_else(|| Error::MissingLabel { image: image.clone() })?;
            if let Some(extra) = matches.next() {
                return Err(Error::Data(format!(
                    "{} has several label files ({} and {})",
                    image.display(),
                    label.display(),
                    extra.display()
                )));
            }
            pairs.push(CityscapesPair {
                image: image.clone(),
                label: label.clone(),
            });
        }
    }
    Ok(pairs)
}

impl CityscapesPair {
    /// Decodes the pair; `downscale` halves both sides (2x2 mean for the
    /// image, top-left pixel of each block for the labels).
    pub fn load(&self, downscale: bool) -> Result<Sample> {
        let img = read_pnm(&self.image)?;
        let lab = read_pnm(&self.label)?;
        if img.channels != 3 || lab.channels != 1 {
            return Err(Error::Data(format!(
                "{}: expected an RGB image and a single-channel label",
                self.image.display()
            )));
        }
        if (img.width, img.height) != (lab.width, lab.height) {
            return Err(Error::Data(format!(
                "{} is {}x{} but its label is {}x{}",
                self.image.display(),
                img.width,
                img.height,
                lab.width,
                lab.height
            )));
        }
        let (h, w) = (img.height, img.width);
        let label = lab
            .data
            .iter()
            .map(|&id| {
                label_id_to_train_id(id).map_err(|e| Error::Data(format!("{}: {e}", self.label.display())))
            })
            .collect::<Result<Vec<u8>>>()?;
        let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| img.data[(y * w + x) * 3 + c] as f32 / 255.0);
        if !downscale {
            return Sample::new(image, label);
        }
        let (oh, ow) = (h / 2, w / 2);
        let small = Tensor::from_fn(Shape::new(1, 3, oh, ow), |_, c, y, x| {
            0.25 * (image.at(0, c, 2 * y, 2 * x)
                + image.at(0, c, 2 * y, 2 * x + 1)
                + image.at(0, c, 2 * y + 1, 2 * x)
                + image.at(0, c, 2 * y + 1, 2 * x + 1))
        });
        let mut small_label = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            small_label.extend((0..ow).map(|x| label[2 * y * w + 2 * x]));
        }
        Sample::new(small, small_label)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pnm::{write_pgm, write_ppm};

    fn write_pair(root: &Path, city: &str, stem: &str, ids: &[u8], with_label: bool) {
        let idir = root.join("img/val").join(city);
        let ldir = root.join("gt/val").join(city);
        std::fs::create_dir_all(&idir).unwrap();
        std::fs::create_dir_all(&ldir).unwrap();
        let rgb: Vec<u8> = (0..ids.len() * 3).map(|i| (i * 10) as u8).collect();
        write_ppm(&idir.join(format!("{stem}_leftImg8bit.ppm")), 2, ids.len() / 2, &rgb).unwrap();
        if with_label {
            write_pgm(&ldir.join(format!("{stem}_gtFine_labelIds.pgm")), 2, ids.len() / 2, ids).unwrap();
        }
    }

    #[test]
    fn mapping_table() {
        assert_eq!(label_id_to_train_id(7).unwrap(), 0);
        assert_eq!(label_id_to_train_id(26).unwrap(), 13);
        assert_eq!(label_id_to_train_id(33).unwrap(), 18);
        assert_eq!(label_id_to_train_id(0).unwrap(), IGNORE);
        assert!(label_id_to_train_id(34).is_err());
        let valid = TRAIN_IDS.iter().filter(|&&t| t != IGNORE).count();
        assert_eq!(valid, CITYSCAPES_CLASSES);
    }

    #[test]
    fn pairs_enumerated_and_loaded() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "aachen", "aachen_000000_000019", &[7, 8, 26, 0], true);
        write_pair(dir.path(), "bonn", "bonn_000001_000019", &[33, 33, 33, 33], true);
        let pairs = load_cityscapes_dir(&dir.path().join("img"), &dir.path().join("gt"), "val").unwrap();
        assert_eq!(pairs.len(), 2);
        let s = pairs[0].load(false).unwrap();
        assert_eq!(s.label, vec![0, 1, 13, IGNORE]);
        assert_eq!(s.image.at(0, 1, 0, 1), 40.0 / 255.0);
        let small = pairs[0].load(true).unwrap();
        assert_eq!((small.height(), small.width(), small.label.clone()), (1, 1, vec![0]));
    }

    #[test]
    fn missing_label_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "aachen", "aachen_000000_000019", &[7, 7], false);
        let err = load_cityscapes_dir(&dir.path().join("img"), &dir.path().join("gt"), "val").unwrap_err();
        assert!(err.to_string().contains("aachen_000000_000019_leftImg8bit"), "{err}");
    }

    #[test]
    fn unknown_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "aachen", "a_0", &[7, 200], true);
        let pairs = load_cityscapes_dir(&dir.path().join("img"), &dir.path().join("gt"), "val").unwrap();
        assert!(pairs[0].load(false).is_err());
    }
}
