//! Image folders: PNG/JPEG files ordered by filename, decoded on demand.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug)]
pub struct FolderDataset {
    root: PathBuf,
    files: Vec<PathBuf>,
    resolution: usize,
    skipped: Vec<PathBuf>,
    cache: Mutex<HashMap<usize, Image>>,
}

impl FolderDataset {
    /// Lists and probes every image under `root` (non-recursive). Files whose
    /// header cannot be read are skipped and reported through [`skipped`].
    ///
    /// [`skipped`]: FolderDataset::skipped
    pub fn load(root: &Path, resolution: usize) -> Result<Self> {
        Image::filled(resolution, [0.0; 3])?;
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut candidates = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
                candidates.push(path);
            }
        }
        candidates.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        let (mut files, mut skipped) = (Vec::new(), Vec::new());
        for path in candidates {
            let probe = image::ImageReader::open(&path)
                .map_err(|e| e.to_string())
                .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
                .and_then(|r| r.into_dimensions().map_err(|e| e.to_string()));
            match probe {
                Ok((w, h)) if w > 0 && h > 0 => files.push(path),
                Ok(_) => skipped.push(path),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push(path);
                }
            }
        }
        if !skipped.is_empty() {
            log::warn!("{} undecodable file(s) skipped in {}", skipped.len(), root.display());
        }
        if files.is_empty() {
            return Err(Error::invalid(format!("no decodable images in {}", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
            resolution,
            skipped,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }

    fn full(&self, idx: usize) -> Result<Image> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(&idx) {
            return Ok(img.clone());
        }
        let path = self
            .files
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("image index {idx} out of range")))?;
        let img = Image::load(path, self.resolution)?;
        self.cache.lock().expect("cache lock").insert(idx, img.clone());
        Ok(img)
    }
}

impl ImageDataset for FolderDataset {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn image(&self, idx: usize, size: usize) -> Result<Image> {
        self.full(idx)?.downsample_to(size)
    }

    fn name(&self, idx: usize) -> String {
        self.files
            .get(idx)
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}
