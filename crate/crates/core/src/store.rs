//! Image access behind a small trait so dataset transforms and evaluations
//! run identically against a directory tree or an in-memory map.

use std::collections::HashMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

pub trait ImageSource: Sync {
    fn load(&self, image_ref: &str) -> Result<ImageTensor>;
}

/// Loads images from `root/<image_ref>` as PNG.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    root: PathBuf,
}

impl DirImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImageStore { root: root.into() }
    }

    pub fn path_of(&self, image_ref: &str) -> PathBuf {
        self.root.join(image_ref)
    }
}

impl ImageSource for DirImageStore {
    fn load(&self, image_ref: &str) -> Result<ImageTensor> {
        ImageTensor::read_png(self.path_of(image_ref))
    }
}

impl ImageSource for HashMap<String, ImageTensor> {
    fn load(&self, image_ref: &str) -> Result<ImageTensor> {
        self.get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no image for reference {image_ref:?}")))
    }
}
