//! Image folders and the synthetic low-light fixture.
//!
//! A dataset root holds `low/` with the inputs and optionally `high/` with
//! references of the same file names. A root without `low/` is read as a
//! flat folder of inputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::image::{load_image, save_image, synth_darken, ImageError, ImageTensor};

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Darkening applied to the synthetic bright patterns.
pub const SYNTH_GAMMA: f64 = 2.0;
pub const SYNTH_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub low: Vec<ImageTensor>,
    /// References aligned with `low`, when the root has a `high/` folder.
    pub high: Option<Vec<ImageTensor>>,
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, ImageError> {
    let entries = fs::read_dir(dir).map_err(|source| ImageError::Read {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, ImageError> {
        let low_dir = root.join("low");
        let low_dir = if low_dir.is_dir() { low_dir } else { root.to_path_buf() };
        let paths = list_images(&low_dir)?;
        let names: Vec<String> = paths.iter().map(|p| file_name(p)).collect();
        let low = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
        let high_dir = root.join("high");
        let high = if high_dir.is_dir() {
            let high_paths = list_images(&high_dir)?;
            let high_names: Vec<String> = high_paths.iter().map(|p| file_name(p)).collect();
            if high_names != names {
                return Err(ImageError::Invalid(format!(
                    "{} holds {:?} but {} holds {:?}",
                    high_dir.display(),
                    high_names,
                    low_dir.display(),
                    names
                )));
            }
            let high = high_paths
                .iter()
                .map(|p| load_image(p))
                .collect::<Result<Vec<_>, _>>()?;
            for ((l, h), n) in low.iter().zip(&high).zip(&names) {
                if (l.height(), l.width()) != (h.height(), h.width()) {
                    return Err(ImageError::Invalid(format!("{n}: low and high differ in size")));
                }
            }
            Some(high)
        } else {
            None
        };
        Ok(Self { names, low, high })
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

/// Smooth colored pattern number `k`, mean luminance roughly 0.55.
pub fn synthetic_bright(k: usize, size: usize) -> ImageTensor {
    let n = size as f64;
    ImageTensor::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f64 / n, x as f64 / n);
        let wave = (fx * (k + 1) as f64 * 1.7 + fy * 2.3).sin() * 0.5 + 0.5;
        let base = 0.35 + 0.4 * wave;
        let tint = [0.9 + 0.02 * k as f64, 1.0, 1.1 - 0.02 * k as f64];
        tint.map(|t| base * t)
    })
}

/// `(dark, bright)` pair number `k`.
pub fn synthetic_pair(k: usize, size: usize) -> (ImageTensor, ImageTensor) {
    let bright = synthetic_bright(k, size);
    (synth_darken(&bright, SYNTH_GAMMA, SYNTH_SCALE), bright)
}

/// Writes `count` pairs as `low/synth_XX.png` and `high/synth_XX.png`,
/// starting at pattern `first`.
pub fn write_synthetic(root: &Path, first: usize, count: usize, size: usize) -> Result<(), ImageError> {
    for sub in ["low", "high"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| ImageError::Write {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
    }
    for k in first..first + count {
        let (dark, bright) = synthetic_pair(k, size);
        let name = format!("synth_{k:02}.png");
        save_image(&dark, &root.join("low").join(&name))?;
        save_image(&bright, &root.join("high").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pairs_are_dark_and_bright() {
        for k in 0..8 {
            let (dark, bright) = synthetic_pair(k, 32);
            assert!(bright.mean_luminance() > 0.45 && bright.mean_luminance() < 0.7);
            assert!(dark.mean_luminance() < 0.25);
        }
        assert_ne!(synthetic_bright(0, 16), synthetic_bright(1, 16));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), 0, 3, 12).unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.names, vec!["synth_00.png", "synth_01.png", "synth_02.png"]);
        assert_eq!(d.len(), 3);
        assert_eq!(d.high.as_ref().unwrap().len(), 3);
        let (dark, _) = synthetic_pair(1, 12);
        for (a, b) in d.low[1].data().iter().zip(dark.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn flat_folder_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_image(&ImageTensor::uniform(4, 4, 0.2), &dir.path().join("b.png")).unwrap();
        save_image(&ImageTensor::uniform(4, 4, 0.2), &dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.names, vec!["a.png", "b.png"]);
        assert!(d.high.is_none());

        let root = tempfile::tempdir().unwrap();
        write_synthetic(root.path(), 0, 2, 8).unwrap();
        fs::remove_file(root.path().join("high/synth_01.png")).unwrap();
        assert!(Dataset::load(root.path()).is_err());
    }

    #[test]
    fn missing_root_errors() {
        assert!(Dataset::load(Path::new("/nonexistent/pixrl")).is_err());
    }
}
