//! Where patch pixels come from.

use image::RgbImage;

use crate::cohort::Case;
use crate::error::{Error, Result};

/// Resolves a case's patch identifier to pixels.
pub trait PatchStore: Send + Sync {
    fn load(&self, case: &Case, patch_id: &str) -> Result<RgbImage>;
}

/// Reads `patch_dir/patch_id` from disk.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectoryStore;

impl PatchStore for DirectoryStore {
    fn load(&self, case: &Case, patch_id: &str) -> Result<RgbImage> {
        let dir = case.patch_dir.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("case `{}` has no patch directory", case.case_id))
        })?;
        Ok(image::open(dir.join(patch_id))?.to_rgb8())
    }
}
