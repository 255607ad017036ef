use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TTLD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6;

/// Labelled 8-bit images, N×C×H×W.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        n_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let d = Dataset {
            channels,
            height,
            width,
            n_classes,
            pixels,
            labels,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.n_classes == 0 {
            return Err(Error::Format("dataset dimensions must be positive".into()));
        }
        if self.pixels.len() != self.len() * self.sample_len() {
            return Err(Error::Format(format!(
                "{} pixel bytes for {} samples of {}",
                self.pixels.len(),
                self.len(),
                self.sample_len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.n_classes) {
            return Err(Error::Format(format!("label {l} outside {} classes", self.n_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Images of the chosen samples scaled to [-1, 1].
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} of {}", self.len())));
            }
            data.extend(self.pixels[i * per..][..per].iter().map(|&p| p as f32 / 127.5 - 1.0));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(vec![idx.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let per = self.sample_len();
        let mut pixels = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} of {}", self.len())));
            }
            pixels.extend_from_slice(&self.pixels[i * per..][..per]);
            labels.push(self.labels[i]);
        }
        Dataset::new(self.channels, self.height, self.width, self.n_classes, pixels, labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(MAGIC);
        for v in [
            DATASET_VERSION,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.n_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing TTLD header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if word(0) != DATASET_VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {}", word(0))));
        }
        let (count, c, h, w, k) = (word(1), word(2), word(3), word(4), word(5));
        let npix = count * c * h * w;
        let expected = HEADER_LEN + npix + 2 * count;
        if bytes.len() != expected {
            return Err(Error::Format(format!("payload is {} bytes, expected {expected}", bytes.len())));
        }
        let pixels = bytes[HEADER_LEN..HEADER_LEN + npix].to_vec();
        let labels = bytes[HEADER_LEN + npix..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Dataset::new(c, h, w, k, pixels, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(1, 2, 2, 3, (0..12).collect(), vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn bytes_round_trip_and_layout() {
        let d = tiny();
        let b = d.to_bytes();
        assert_eq!(b.len(), 28 + 12 + 6);
        assert_eq!(&b[..4], b"TTLD");
        assert_eq!(&b[b.len() - 4..b.len() - 2], &[2, 0]);
        assert_eq!(Dataset::from_bytes(&b).unwrap(), d);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ttld");
        tiny().save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), tiny());
        assert!(matches!(Dataset::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_corruption() {
        let mut b = tiny().to_bytes();
        assert!(Dataset::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Dataset::from_bytes(&b).is_err());
        let mut b = tiny().to_bytes();
        let n = b.len();
        b[n - 2] = 9;
        assert!(matches!(Dataset::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn batch_scales_pixels() {
        let d = Dataset::new(1, 1, 2, 2, vec![0, 255, 127, 128], vec![1, 0]).unwrap();
        let (x, y) = d.batch(&[1, 0]).unwrap();
        assert_eq!(y, [0, 1]);
        assert_eq!(x.data()[2], -1.0);
        assert_eq!(x.data()[3], 1.0);
        assert!(d.batch(&[2]).is_err());
    }
}
