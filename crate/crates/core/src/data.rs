//! Labeled image collections and their on-disk layout:
//! `images/*.ppm` plus a headerless `labels.csv` of `filename,class_id` lines.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::{decode_ppm, encode_ppm, Image};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// File name of each image inside `images/`.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn push(&mut self, name: String, image: Image, label: usize) {
        self.names.push(name);
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::default();
        for &i in indices {
            out.push(self.names[i].clone(), self.images[i].clone(), self.labels[i]);
        }
        out
    }

    /// Concatenation; names from `other` are prefixed if they would collide.
    pub fn merged(&self, other: &Dataset, prefix: &str) -> Dataset {
        let mut out = self.clone();
        for i in 0..other.len() {
            let mut name = other.names[i].clone();
            if out.names.contains(&name) {
                name = format!("{prefix}{name}");
            }
            out.push(name, other.images[i].clone(), other.labels[i]);
        }
        out
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        let mut csv = String::new();
        for i in 0..self.len() {
            fs::write(images.join(&self.names[i]), encode_ppm(&self.images[i]))?;
            csv.push_str(&format!("{},{}\n", self.names[i], self.labels[i]));
        }
        fs::write(dir.join("labels.csv"), csv)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let csv_path = dir.join("labels.csv");
        let csv = fs::read_to_string(&csv_path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", csv_path.display())))?;
        let mut out = Dataset::default();
        for (lineno, line) in csv.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("labels.csv line {}: expected filename,class_id", lineno + 1));
            let (name, label) = line.split_once(',').ok_or_else(bad)?;
            let label: usize = label.trim().parse().map_err(|_| bad())?;
            let name = name.trim();
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(bad());
            }
            let path = dir.join("images").join(name);
            let bytes = fs::read(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            let img = decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            out.push(name.to_string(), img, label);
        }
        if out.is_empty() {
            return Err(Error::Data(format!("{} lists no images", csv_path.display())));
        }
        Ok(out)
    }
}

/// SHA-256 of an image's dimensions and pixels.
pub fn image_digest(img: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((img.width() as u64).to_le_bytes());
    h.update((img.height() as u64).to_le_bytes());
    h.update(img.data());
    h.finalize().into()
}
