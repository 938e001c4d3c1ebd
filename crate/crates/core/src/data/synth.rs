//! Seeded synthetic segmentation scenes: textured geometric shapes on a
//! textured background, with exact labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Class 0 is the background.
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes drawn per foreground class and image.
    pub shapes_per_class: (usize, usize),
    /// Amplitude of the uniform per-pixel noise added to every channel.
    pub noise: f64,
    /// Target pixel fraction of classes `1..num_classes`; the background
    /// takes the remainder.
    pub foreground_frequencies: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 3,
            height: 64,
            width: 128,
            shapes_per_class: (1, 3),
            noise: 0.05,
            foreground_frequencies: vec![0.2, 0.1],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "synthetic num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "synthetic images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.shapes_per_class;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("shapes_per_class range {lo}..={hi} is empty or zero")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if self.foreground_frequencies.len() != self.num_classes - 1 {
            return Err(Error::Config(format!(
                "{} foreground frequencies given for {} foreground classes",
                self.foreground_frequencies.len(),
                self.num_classes - 1
            )));
        }
        if self.foreground_frequencies.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("foreground frequencies must lie in [0, 1]".into()));
        }
        let total: f64 = self.foreground_frequencies.iter().sum();
        if total > 1.0 {
            return Err(Error::Config(format!("foreground frequencies sum to {total} > 1")));
        }
        Ok(())
    }

    /// Target frequency of every class, background first.
    pub fn profile(&self) -> Vec<f64> {
        let fg: f64 = self.foreground_frequencies.iter().sum();
        let mut p = vec![1.0 - fg];
        p.extend_from_slice(&self.foreground_frequencies);
        p
    }
}

/// Base colour of a class: hues spread evenly around the wheel, with the
/// background kept dark.
fn class_colour(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.2];
    }
    let hue = (class - 1) as f64 / (num_classes - 1) as f64 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.7 * r, 0.2 + 0.7 * g, 0.2 + 0.7 * b]
}

/// Paints a shape of roughly `area` pixels with class `class` onto pixels
/// still labelled background, returning the number painted.
fn paint(label: &mut [u8], h: usize, w: usize, class: u8, area: f64, rng: &mut ChaCha8Rng) -> usize {
    let kind = match rng.gen_range(0..3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disk,
        _ => ShapeKind::Stripes,
    };
    let cy = rng.gen_range(0..h) as f64;
    let cx = rng.gen_range(0..w) as f64;
    let aspect: f64 = rng.gen_range(0.5..2.0);
    let horizontal = rng.gen_bool(0.5);
    let area = area.max(4.0);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        ShapeKind::Rectangle => {
            let hw = (area * aspect).sqrt() / 2.0;
            let hh = (area / aspect).sqrt() / 2.0;
            Box::new(move |y, x| (y - cy).abs() < hh && (x - cx).abs() < hw)
        }
        ShapeKind::Disk => {
            let r2 = area / std::f64::consts::PI;
            Box::new(move |y, x| (y - cy).powi(2) + (x - cx).powi(2) < r2)
        }
        ShapeKind::Stripes => {
            // Three bars of thickness t separated by gaps of t.
            let t = ((area / 3.0) / (aspect * 6.0)).sqrt().max(1.0).round();
            let len = area / (3.0 * t);
            Box::new(move |y, x| {
                let (along, across) = if horizontal { (x - cx, y - cy) } else { (y - cy, x - cx) };
                let k = (across + 2.5 * t) / t;
                along.abs() < len / 2.0 && (0.0..5.0).contains(&k) && (k as usize) % 2 == 0
            })
        }
    };
    let mut painted = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if label[i] == 0 && inside(y as f64 + 0.5, x as f64 + 0.5) {
                label[i] = class;
                painted += 1;
            }
        }
    }
    painted
}

fn scene(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let hw = (h * w) as f64;
    let mut label = vec![0u8; h * w];
    for (k, &p) in spec.foreground_frequencies.iter().enumerate() {
        let class = (k + 1) as u8;
        let target = p * hw * rng.gen_range(0.8..1.2);
        let planned = rng.gen_range(spec.shapes_per_class.0..=spec.shapes_per_class.1);
        let mut covered = 0.0;
        let mut drawn = 0;
        // Occlusion by earlier classes can swallow a shape; keep topping up
        // with shapes sized to the remaining deficit.
        while target - covered >= 4.0 && drawn < 8 * planned {
            let remaining = (planned.saturating_sub(drawn)).max(1) as f64;
            let area = (target - covered) / remaining;
            covered += paint(&mut label, h, w, class, area, rng) as f64;
            drawn += 1;
        }
    }
    let freq: Vec<f64> = (0..spec.num_classes).map(|c| 2.0 + 1.5 * c as f64).collect();
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = label[y * w + x] as usize;
            let base = class_colour(c, spec.num_classes);
            let tex = 0.08 * ((x as f64 * freq[c] + y as f64 * 0.5 * freq[c]) / w as f64 * std::f64::consts::TAU + phase).sin();
            for (ch, &b) in base.iter().enumerate() {
                let noise = spec.noise * rng.gen_range(-1.0..1.0);
                data[(ch * h + y) * w + x] = (b + tex + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample::new(Tensor::from_vec(Shape::new(1, 3, h, w), data)?, label)
}

/// Generates `count` scenes; the dataset depends only on `spec` and `count`.
pub fn synth_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..count).map(|_| scene(spec, &mut rng)).collect()
}
