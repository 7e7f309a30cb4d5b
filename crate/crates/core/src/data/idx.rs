//! IDX (MNIST) byte format.
//!
//! Layout: a big-endian magic `00 00 08 NN` where `NN` is the number of
//! dimensions, `NN` big-endian `u32` sizes, then the raw unsigned bytes.
//! Labels use one dimension (`0x00000801`), grayscale images three
//! (`0x00000803`, `N×H×W`), and colour images four (`0x00000804`, `N×H×W×C`).

use alloc::string::String;
use alloc::vec::Vec;

use super::{Domain, ImageSet, ImageShape};
use crate::{Error, Result};

pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        shape: ImageShape,
        bytes: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn parse(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    let ndim = match magic {
        LABELS_MAGIC => 1,
        IMAGES_MAGIC => 3,
        COLOR_IMAGES_MAGIC => 4,
        other => return Err(Error::BadMagic(other)),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload_len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimensionOverflow)?;
    let payload = &bytes[header..];
    if payload.len() < payload_len {
        return Err(Error::Truncated {
            expected: payload_len,
            actual: payload.len(),
        });
    }
    if payload.len() > payload_len {
        return Err(Error::Data(alloc::format!(
            "IDX payload has {} trailing bytes",
            payload.len() - payload_len
        )));
    }
    let bytes = payload.to_vec();
    Ok(match dims[..] {
        [_] => IdxData::Labels(bytes),
        [count, h, w] => IdxData::Images {
            count,
            shape: ImageShape::new(h, w, 1),
            bytes,
        },
        [count, h, w, c] => IdxData::Images {
            count,
            shape: ImageShape::new(h, w, c),
            bytes,
        },
        _ => unreachable!(),
    })
}

/// Decodes an image file, scaling bytes by `1/255`.
pub fn decode_images(bytes: &[u8], domain: Domain, provenance: impl Into<String>) -> Result<ImageSet> {
    match parse(bytes)? {
        IdxData::Images { shape, bytes, .. } => {
            let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
            ImageSet::new(shape, pixels, None, domain, provenance)
        }
        IdxData::Labels(_) => Err(Error::Data("expected an IDX image file, found labels".into())),
    }
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    match parse(bytes)? {
        IdxData::Labels(l) => Ok(l.into_iter().map(u32::from).collect()),
        IdxData::Images { .. } => Err(Error::Data("expected an IDX label file, found images".into())),
    }
}

/// Quantizes pixels to `round(255·x)`; the inverse of [`decode_images`] on
/// any set that was itself decoded from IDX.
pub fn encode_images(set: &ImageSet) -> Vec<u8> {
    let shape = set.shape();
    let mut out = Vec::with_capacity(20 + set.pixels().len());
    let dims: &[usize] = if shape.channels == 1 {
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        &[set.len(), shape.height, shape.width]
    } else {
        out.extend_from_slice(&COLOR_IMAGES_MAGIC.to_be_bytes());
        &[set.len(), shape.height, shape.width, shape.channels]
    };
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(set.pixels().iter().map(|&p| libm::round(p * 255.0) as u8));
    out
}

pub fn encode_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Data(alloc::format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut h = magic.to_be_bytes().to_vec();
        for d in dims {
            h.extend_from_slice(&d.to_be_bytes());
        }
        h
    }

    #[test]
    fn reads_two_mnist_images() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 28, 28]);
        bytes.extend((0..1568).map(|i| (i % 256) as u8));
        let set = decode_images(&bytes, Domain::Source, "mem").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.shape(), ImageShape::new(28, 28, 1));
        assert_eq!(set.pixels()[255], 1.0);
        assert_eq!(set.pixels()[1], 1.0 / 255.0);
    }

    #[test]
    fn reads_labels() {
        let mut bytes = header(LABELS_MAGIC, &[2]);
        bytes.extend([7, 3]);
        assert_eq!(decode_labels(&bytes).unwrap(), vec![7, 3]);
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 28, 28]);
        bytes.extend(vec![0u8; 1000]);
        let err = parse(&bytes).unwrap_err();
        assert_eq!(
            err,
            Error::Truncated {
                expected: 1568,
                actual: 1000
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("1568") && msg.contains("1000"));
    }

    #[test]
    fn rejects_bad_magic_and_overflow() {
        assert_eq!(parse(&header(0x0000_0802, &[1])), Err(Error::BadMagic(0x802)));
        assert_eq!(parse(&[0, 0]), Err(Error::Truncated { expected: 4, actual: 2 }));
        #[cfg(target_pointer_width = "32")]
        assert_eq!(
            parse(&header(IMAGES_MAGIC, &[u32::MAX, u32::MAX, 2])),
            Err(Error::DimensionOverflow)
        );
        #[cfg(target_pointer_width = "64")]
        {
            let dims = header(COLOR_IMAGES_MAGIC, &[u32::MAX, u32::MAX, u32::MAX, 2]);
            assert_eq!(parse(&dims), Err(Error::DimensionOverflow));
        }
    }

    #[test]
    fn colour_round_trip() {
        let pixels: Vec<f64> = (0..24).map(|i| f64::from(i * 10) / 255.0).collect();
        let set = ImageSet::new(ImageShape::new(2, 2, 3), pixels, None, Domain::Target, "t").unwrap();
        let back = decode_images(&encode_images(&set), Domain::Target, "t").unwrap();
        assert_eq!(back.pixels(), set.pixels());
        assert_eq!(back.shape(), set.shape());
    }
}
