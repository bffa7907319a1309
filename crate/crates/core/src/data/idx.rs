//! IDX image/label files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then big-endian `u32` count, rows, cols and
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, a `u32`
//! count and one byte per label.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded image file: `rows x cols` bytes per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, "truncated header"))
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "image file declares no pixels"));
    }
    let size = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * size {
        let full = body.len() / size;
        return Err(Error::format(
            (16 + full * size) as u64,
            format!("truncated image data: {count} images declared, {full} complete"),
        ));
    }
    if body.len() > count * size {
        return Err(Error::format(
            (16 + count * size) as u64,
            "trailing bytes after image data",
        ));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.chunks_exact(size).map(<[u8]>::to_vec).collect(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4)? as usize;
    if count == 0 {
        return Err(Error::format(4, "label file declares no labels"));
    }
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            (8 + body.len().min(count)) as u64,
            format!("{count} labels declared, {} bytes present", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    for v in [IMAGE_MAGIC, pixels.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pair decoded images with labels. Pixels become `byte / 255`, shape `[1, rows, cols]`.
///
/// The class count is `max(label) + 1` unless `class_count` is given.
pub fn assemble(
    name: &str,
    images: IdxImages,
    labels: &[u8],
    class_count: Option<usize>,
) -> Result<LabeledDataset> {
    if images.pixels.len() != labels.len() {
        return Err(Error::format(
            4,
            format!(
                "image count {} does not match label count {}",
                images.pixels.len(),
                labels.len()
            ),
        ));
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize + 1);
    let samples = images
        .pixels
        .into_iter()
        .zip(labels)
        .map(|(px, &y)| {
            let data = px.into_iter().map(|b| b as f32 / 255.0).collect();
            Sample::new(Tensor::from_parts(vec![1, images.rows, images.cols], data), y as usize)
        })
        .collect();
    LabeledDataset::new(name, classes, samples)
}

/// Load an image file and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let name = images
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    let img = parse_images(&fs::read(images.as_ref())?)?;
    let lab = parse_labels(&fs::read(labels.as_ref())?)?;
    assemble(&name, img, &lab, None)
}

/// Write a dataset as an IDX pair. Pixels are quantised with `round(v * 255)`.
pub fn save_idx(
    dataset: &LabeledDataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let shape = dataset
        .input_shape()
        .ok_or_else(|| Error::data("cannot write an empty dataset"))?;
    let (rows, cols) = match shape {
        [1, r, c] | [r, c] => (*r, *c),
        other => {
            return Err(Error::data(format!(
                "IDX export needs single-channel images, got {other:?}"
            )))
        }
    };
    let pixels: Vec<Vec<u8>> = dataset
        .samples()
        .iter()
        .map(|s| {
            s.input
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect()
        })
        .collect();
    let labels_bytes: Vec<u8> = dataset.samples().iter().map(|s| s.label as u8).collect();
    fs::write(images, encode_images(rows, cols, &pixels))?;
    fs::write(labels, encode_labels(&labels_bytes))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let pixels = vec![
            vec![0, 255, 128, 1],
            vec![10, 20, 30, 40],
            vec![255, 255, 0, 0],
            vec![7, 0, 200, 99],
        ];
        (encode_images(2, 2, &pixels), encode_labels(&[3, 1, 4, 1]))
    }

    #[test]
    fn four_image_fixture_decodes_to_scaled_pixels() {
        let (img, lab) = fixture();
        let ds = assemble("fx", parse_images(&img).unwrap(), &parse_labels(&lab).unwrap(), None)
            .unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.class_count(), 5);
        let expected: [[u8; 4]; 4] = [[0, 255, 128, 1], [10, 20, 30, 40], [255, 255, 0, 0], [7, 0, 200, 99]];
        for (s, px) in ds.samples().iter().zip(expected) {
            assert_eq!(s.input.shape(), &[1, 2, 2]);
            let want: Vec<f32> = px.iter().map(|&b| b as f32 / 255.0).collect();
            assert_eq!(s.input.data(), want.as_slice());
        }
        assert_eq!(ds.samples()[2].label, 4);
    }

    #[test]
    fn empty_label_file_is_format_error() {
        assert!(matches!(parse_labels(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_labels(&encode_labels(&[])), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_counts_are_format_errors() {
        let (img, _) = fixture();
        let labels = parse_labels(&encode_labels(&[1, 2, 3])).unwrap();
        let err = assemble("fx", parse_images(&img).unwrap(), &labels, None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truncation_and_bad_magic_report_offsets() {
        let (img, lab) = fixture();
        match parse_images(&img[..img.len() - 2]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 3 * 4),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = lab.clone();
        bad[3] = 0x03;
        assert!(matches!(parse_labels(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_images(&img[..10]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture();
        let ds = assemble("fx", parse_images(&img).unwrap(), &parse_labels(&lab).unwrap(), None)
            .unwrap();
        let (ip, lp) = (dir.path().join("x-images.idx"), dir.path().join("x-labels.idx"));
        save_idx(&ds, &ip, &lp).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), img);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.samples(), ds.samples());
    }
}
