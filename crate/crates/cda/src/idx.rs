//! IDX files on disk.

use std::fs;
use std::path::Path;

use cda_core::data::{idx, Domain, ImageSet};

use crate::{Error, Result};

/// Reads an IDX image file; pixels are scaled into `[0, 1]`.
pub fn read_idx(path: &Path) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    idx::decode_images(&bytes, Domain::Source, path.display().to_string()).map_err(|e| in_file(path, e))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    idx::decode_labels(&bytes).map_err(|e| in_file(path, e))
}

/// Images plus an optional label file, tagged with `domain`.
pub fn read_idx_set(images: &Path, labels: Option<&Path>, domain: Domain) -> Result<ImageSet> {
    let set = read_idx(images)?.with_domain(domain);
    match labels {
        Some(path) => Ok(set.with_labels(Some(read_idx_labels(path)?))?),
        None => Ok(set),
    }
}

pub fn write_idx(path: &Path, set: &ImageSet) -> Result<()> {
    fs::write(path, idx::encode_images(set)).map_err(Error::io(path))
}

pub fn write_idx_labels(path: &Path, labels: &[u32]) -> Result<()> {
    fs::write(path, idx::encode_labels(labels)?).map_err(Error::io(path))
}

fn in_file(path: &Path, e: cda_core::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cda_core::data::{synth_digits, DigitSpec, ImageShape};

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_digits(&DigitSpec {
            count: 12,
            classes: 3,
            size: 10,
            seed: 4,
        })
        .unwrap();
        let (img, lab) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
        write_idx(&img, &set).unwrap();
        write_idx_labels(&lab, set.labels().unwrap()).unwrap();
        let back = read_idx_set(&img, Some(&lab), Domain::Target).unwrap();
        assert_eq!(back.shape(), ImageShape::new(10, 10, 1));
        assert_eq!(back.labels(), set.labels());
        assert_eq!(back.domain(), Domain::Target);
        for (a, b) in back.pixels().iter().zip(set.pixels()) {
            assert_eq!(*a, (b * 255.0).round() / 255.0);
        }
        write_idx(&dir.path().join("z.idx"), &back).unwrap();
        assert_eq!(fs::read(&img).unwrap(), fs::read(dir.path().join("z.idx")).unwrap());
    }

    #[test]
    fn truncated_file_names_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.resize(16 + 1000, 0);
        fs::write(&path, bytes).unwrap();
        let msg = read_idx(&path).unwrap_err().to_string();
        assert!(msg.contains("1568") && msg.contains("1000"), "{msg}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_idx(Path::new("/nonexistent/images.idx")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
