//! Dataset ingestion: the standard IDX image/label container used by MNIST.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// A labeled image dataset with pixels scaled to `[0,1]`, one flat row per
/// example.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array2<f32>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (deterministic subsetting).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self
                .images
                .slice(ndarray::s![..n, ..])
                .to_owned(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Train/test split as shipped in the source files.
#[derive(Debug, Clone)]
pub struct MnistData {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::DataFormat(format!("{}: truncated header", path.display())))?;
    if magic != IMAGE_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad magic {magic}, expected {IMAGE_MAGIC} (idx3 images)",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let rows = r.read_u32::<BigEndian>()? as usize;
    let cols = r.read_u32::<BigEndian>()? as usize;
    let mut buf = vec![0u8; n * rows * cols];
    r.read_exact(&mut buf).map_err(|_| {
        Error::DataFormat(format!(
            "{}: truncated image data, expected {} pixels",
            path.display(),
            n * rows * cols
        ))
    })?;
    Ok((buf, n, rows, cols))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::DataFormat(format!("{}: truncated header", path.display())))?;
    if magic != LABEL_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad magic {magic}, expected {LABEL_MAGIC} (idx1 labels)",
            path.display()
        )));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| {
        Error::DataFormat(format!(
            "{}: truncated label data, expected {n} labels",
            path.display()
        ))
    })?;
    Ok(buf)
}

/// Load one image/label pair in IDX format, scaling pixels to `[0,1]`.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, n, rows, cols) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::DataFormat(format!(
            "image count {n} does not match label count {}",
            labels.len()
        )));
    }
    let images = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.into_iter().map(|p| p as f32 / 255.0).collect(),
    )
    .expect("image reshape");
    Ok(Dataset {
        images,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        rows,
        cols,
    })
}

/// Load the four standard MNIST files from a directory.
pub fn ingest_mnist(dir: impl AsRef<Path>) -> Result<MnistData> {
    let dir = dir.as_ref();
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok(MnistData { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        let data: Vec<u8> = (0..n * rows * cols).map(|i| (i % 256) as u8).collect();
        f.write_all(&data).unwrap();
    }

    fn write_idx_labels(path: &Path, n: usize) {
        let mut f = File::create(path).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        let data: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        f.write_all(&data).unwrap();
    }

    #[test]
    fn roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 7, 4, 4);
        write_idx_labels(&lab, 7);
        let ds = load_idx_pair(&img, &lab).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.images.ncols(), 16);
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.labels[3], 3);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let mut f = File::create(&img).unwrap();
        f.write_all(&1234u32.to_be_bytes()).unwrap();
        f.write_all(&0u32.to_be_bytes()).unwrap();
        drop(f);
        let lab = dir.path().join("lab");
        write_idx_labels(&lab, 0);
        let err = load_idx_pair(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::DataFormat(_)), "got {err:?}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let mut f = File::create(&img).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&10u32.to_be_bytes()).unwrap();
        f.write_all(&4u32.to_be_bytes()).unwrap();
        f.write_all(&4u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 16]).unwrap(); // only one of ten images
        drop(f);
        let lab = dir.path().join("lab");
        write_idx_labels(&lab, 10);
        let err = load_idx_pair(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::DataFormat(_)), "got {err:?}");
    }
}
