//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.

use std::path::Path;

use crate::data::{Image, LabeledImage};
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 3073;
pub const SIDE: usize = 32;
pub const CLASSES: usize = 10;

/// Decodes at most `limit` records from an in-memory batch. `path` only
/// labels error messages.
pub fn cifar10_decode(bytes: &[u8], limit: Option<usize>, path: &Path) -> Result<Vec<LabeledImage>> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            record: bytes.len() / RECORD_LEN,
            reason: format!(
                "truncated: {} bytes is not a multiple of {RECORD_LEN}",
                bytes.len()
            ),
        });
    }
    let count = (bytes.len() / RECORD_LEN).min(limit.unwrap_or(usize::MAX));
    let mut out = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).take(count).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                record: i,
                reason: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        let pixels = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
        out.push(LabeledImage {
            image: Image::new(3, SIDE, pixels)?,
            label,
        });
    }
    Ok(out)
}

pub fn cifar10_read(path: &Path, limit: Option<usize>) -> Result<Vec<LabeledImage>> {
    let bytes = std::fs::read(path)?;
    cifar10_decode(&bytes, limit, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, px: u8) -> Vec<u8> {
        let mut r = vec![px; RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn two_records() {
        let mut bytes = record(7, 0xFF);
        bytes.extend(record(0, 0));
        assert_eq!(bytes.len(), 6146);
        let imgs = cifar10_decode(&bytes, None, Path::new("b")).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].label, 7);
        assert_eq!((imgs[0].image.channels, imgs[0].image.side), (3, 32));
        assert!(imgs[0].image.pixels.iter().all(|&v| v == 1.0));
        assert!(imgs[1].image.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(cifar10_decode(&bytes, Some(1), Path::new("b")).unwrap().len(), 1);
    }

    #[test]
    fn plane_layout() {
        let mut r = record(1, 0);
        r[1 + 1024 + 32 + 2] = 51; // green, row 1, col 2
        let img = &cifar10_decode(&r, None, Path::new("b")).unwrap()[0].image;
        assert_eq!(img.at(1, 1, 2), 0.2);
    }

    #[test]
    fn format_errors() {
        let mut bytes = record(3, 0);
        bytes.extend(record(10, 0));
        match cifar10_decode(&bytes, None, Path::new("b")) {
            Err(Error::Format { record, .. }) => assert_eq!(record, 1),
            other => panic!("{other:?}"),
        }
        assert!(cifar10_decode(&bytes[..100], None, Path::new("b")).is_err());
    }

    #[test]
    fn reading_twice_is_identical() {
        let dir = std::env::temp_dir().join(format!("mlomae-cifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data_batch_1.bin");
        std::fs::write(&path, record(5, 17)).unwrap();
        let a = cifar10_read(&path, None).unwrap();
        assert_eq!(a, cifar10_read(&path, None).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
