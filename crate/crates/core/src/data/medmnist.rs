//! Reader/writer for the MedMNIST `.npz` layout: arrays `{train,val,test}_images`
//! and `{train,val,test}_labels`.
//!
//! Image arrays may be `(N, H, W)` or `(N, H, W, C)` (`uint8`, scaled to
//! `[0, 1]`) or `(N, F)` float vectors (taken as-is). Labels are `(N,)` or
//! `(N, 1)` integers.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use npyz::npz::NpzArchive;
use npyz::WriterBuilder;
use sha2::{Digest, Sha256};

use super::{Dataset, SampleKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SPLITS: [&str; 3] = ["train", "val", "test"];

struct RawArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// stored as 8-bit unsigned integers
    is_u8: bool,
}

fn read_array<R: Read + Seek>(archive: &mut NpzArchive<R>, name: &str) -> Result<RawArray> {
    let npy = archive
        .by_name(name)
        .map_err(|e| Error::Dataset(format!("reading `{name}`: {e}")))?
        .ok_or_else(|| Error::Dataset(format!("archive has no array named `{name}`")))?;
    if npy.order() != npyz::Order::C {
        return Err(Error::Dataset(format!("`{name}` is not C-ordered")));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let descr = npy.header().dtype().descr();
    let bad = |e: std::io::Error| Error::Dataset(format!("decoding `{name}`: {e}"));
    let (values, is_u8) = match descr.trim_matches('\'').trim_start_matches(['<', '>', '|', '=']) {
        "u1" => (npy.into_vec::<u8>().map_err(bad)?.into_iter().map(f64::from).collect(), true),
        "i1" => (npy.into_vec::<i8>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "u2" => (npy.into_vec::<u16>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "i2" => (npy.into_vec::<i16>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "u4" => (npy.into_vec::<u32>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "i4" => (npy.into_vec::<i32>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "u8" => (npy.into_vec::<u64>().map_err(bad)?.into_iter().map(|v| v as f64).collect(), false),
        "i8" => (npy.into_vec::<i64>().map_err(bad)?.into_iter().map(|v| v as f64).collect(), false),
        "f4" => (npy.into_vec::<f32>().map_err(bad)?.into_iter().map(f64::from).collect(), false),
        "f8" => (npy.into_vec::<f64>().map_err(bad)?, false),
        other => return Err(Error::Dataset(format!("`{name}` has unsupported dtype {other}"))),
    };
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::Dataset(format!(
            "`{name}` holds {} values for shape {shape:?}",
            values.len()
        )));
    }
    Ok(RawArray { shape, values, is_u8 })
}

fn kind_of(shape: &[usize]) -> Result<SampleKind> {
    match shape {
        [_, dim] => Ok(SampleKind::Vector { dim: *dim }),
        [_, h, w] => Ok(SampleKind::Image { height: *h, width: *w, channels: 1 }),
        [_, h, w, c] => Ok(SampleKind::Image { height: *h, width: *w, channels: *c }),
        _ => Err(Error::Dataset(format!("unsupported image array shape {shape:?}"))),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a MedMNIST-style archive. If `checksum` is given, the file's SHA-256
/// must match it (hex, case-insensitive). Either the whole dataset loads or
/// an error is returned.
pub fn load_medmnist<T: Scalar>(path: &Path, checksum: Option<&str>) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = checksum {
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(expected.trim()) {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                actual,
            });
        }
    }
    let mut archive =
        NpzArchive::new(Cursor::new(bytes)).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;

    let mut kind: Option<SampleKind> = None;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut ranges: Vec<Vec<usize>> = Vec::new();
    for split in SPLITS {
        let images = read_array(&mut archive, &format!("{split}_images"))?;
        let lab = read_array(&mut archive, &format!("{split}_labels"))?;
        let split_kind = kind_of(&images.shape)?;
        match kind {
            None => kind = Some(split_kind),
            Some(k) if k != split_kind => {
                return Err(Error::Dataset(format!(
                    "{split} images have layout {split_kind:?}, earlier splits {k:?}"
                )))
            }
            _ => {}
        }
        let n = images.shape[0];
        let label_ok = matches!(lab.shape.as_slice(), [m] | [m, 1] if *m == n);
        if !label_ok {
            return Err(Error::Dataset(format!(
                "{split}_labels has shape {:?}, expected ({n},) or ({n}, 1)",
                lab.shape
            )));
        }
        let start = labels.len();
        for &v in &lab.values {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Dataset(format!("{split}_labels holds non-class value {v}")));
            }
            labels.push(v as usize);
        }
        let scale = if images.is_u8 { 1.0 / 255.0 } else { 1.0 };
        samples.extend(images.values.iter().map(|&v| T::lit(v * scale)));
        ranges.push((start..start + n).collect());
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "medmnist".into());
    let mut ranges = ranges.into_iter();
    let (train, val, test) = (ranges.next().unwrap(), ranges.next().unwrap(), ranges.next().unwrap());
    Dataset::new(name, kind.expect("three splits read"), num_classes, samples, labels, train, val, test)
}

/// Writes a dataset in the same layout (`float64` samples, `int64` labels of
/// shape `(N, 1)`).
pub fn save_npz<T: Scalar>(dataset: &Dataset<T>, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let mut npz = npyz::npz::NpzWriter::create(path).map_err(io)?;
    let sample_shape: Vec<u64> = match dataset.kind {
        SampleKind::Vector { dim } => vec![dim as u64],
        SampleKind::Image { height, width, channels: 1 } => vec![height as u64, width as u64],
        SampleKind::Image { height, width, channels } => vec![height as u64, width as u64, channels as u64],
    };
    for (split, ids) in SPLITS.iter().zip([&dataset.train, &dataset.val, &dataset.test]) {
        let mut shape = vec![ids.len() as u64];
        shape.extend(&sample_shape);
        let mut w = npz
            .array::<f64>(&format!("{split}_images"), Default::default())
            .map_err(io)?
            .default_dtype()
            .shape(&shape)
            .begin_nd()
            .map_err(io)?;
        for &id in ids.iter() {
            w.extend(dataset.sample(id).iter().map(|v| v.as_f64())).map_err(io)?;
        }
        w.finish().map_err(io)?;

        let mut w = npz
            .array::<i64>(&format!("{split}_labels"), Default::default())
            .map_err(io)?
            .default_dtype()
            .shape(&[ids.len() as u64, 1])
            .begin_nd()
            .map_err(io)?;
        w.extend(ids.iter().map(|&id| dataset.raw_labels()[id] as i64)).map_err(io)?;
        w.finish().map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny archive in the published uint8 layout.
    fn write_fixture(path: &Path, counts: [usize; 3], skip_test_labels: bool) {
        let mut npz = npyz::npz::NpzWriter::create(path).unwrap();
        for (split, &n) in SPLITS.iter().zip(&counts) {
            let mut w = npz
                .array::<u8>(&format!("{split}_images"), Default::default())
                .unwrap()
                .default_dtype()
                .shape(&[n as u64, 4, 4])
                .begin_nd()
                .unwrap();
            w.extend((0..n * 16).map(|i| (i % 256) as u8)).unwrap();
            w.finish().unwrap();
            if skip_test_labels && *split == "test" {
                continue;
            }
            let mut w = npz
                .array::<u8>(&format!("{split}_labels"), Default::default())
                .unwrap()
                .default_dtype()
                .shape(&[n as u64, 1])
                .begin_nd()
                .unwrap();
            w.extend((0..n).map(|i| (i % 8) as u8)).unwrap();
            w.finish().unwrap();
        }
    }

    #[test]
    fn loads_published_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.npz");
        write_fixture(&p, [24, 8, 16], false);
        let ds: Dataset<f32> = load_medmnist(&p, None).unwrap();
        assert_eq!(ds.num_classes, 8);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (24, 8, 16));
        assert_eq!(ds.kind, SampleKind::Image { height: 4, width: 4, channels: 1 });
        assert!(ds.raw_samples().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.sample(0)[1], 1.0 / 255.0);
    }

    #[test]
    fn missing_array_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.npz");
        write_fixture(&p, [4, 4, 4], true);
        match load_medmnist::<f64>(&p, None) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("test_labels")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_archive_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corrupt.npz");
        write_fixture(&p, [4, 4, 4], false);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&p, bytes).unwrap();
        assert!(load_medmnist::<f64>(&p, None).is_err());
    }

    #[test]
    fn checksum_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.npz");
        write_fixture(&p, [4, 4, 4], false);
        let good = sha256_hex(&std::fs::read(&p).unwrap());
        assert!(load_medmnist::<f64>(&p, Some(&good.to_uppercase())).is_ok());
        assert!(matches!(load_medmnist::<f64>(&p, Some("00ff")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn synthetic_export_roundtrip() {
        let spec = super::super::LongTailSpec { max_count: 20, val_per_class: 2, test_per_class: 3, ..Default::default() };
        let ds: Dataset<f64> = super::super::synth_longtail(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("synth.npz");
        save_npz(&ds, &p).unwrap();
        let back: Dataset<f64> = load_medmnist(&p, None).unwrap();
        assert_eq!(back.kind, ds.kind);
        assert_eq!(back.raw_samples(), ds.raw_samples());
        assert_eq!(back.raw_labels(), ds.raw_labels());
    }
}
