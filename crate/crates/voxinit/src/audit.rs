//! Optional file-access audit. When armed, every dataset/checkpoint read
//! registers its path here, letting tests assert that training touches no
//! data beyond what it was handed.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

static READS: Mutex<Option<Vec<PathBuf>>> = Mutex::new(None);

/// Start recording reads (clears any previous recording).
pub fn arm() {
    *READS.lock().unwrap() = Some(Vec::new());
}

/// Stop recording and return every path read while armed.
pub fn disarm() -> Vec<PathBuf> {
    READS.lock().unwrap().take().unwrap_or_default()
}

/// Called by readers on every file open.
pub(crate) fn note_read(path: &Path) {
    if let Some(v) = READS.lock().unwrap().as_mut() {
        v.push(path.to_path_buf());
    }
}
