//! Synthetic images whose informative pixels move from instance to instance,
//! with ground-truth relevance maps, dataset files and PGM export.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gating::SelectionMask;
use crate::tensor::{Tensor, TensorError};

pub const DATASET_MAGIC: &[u8; 4] = b"DDSD";
pub const DATASET_VERSION: u32 = 1;

/// Fraction of pixels switched on by salt-and-pepper noise.
const SALT_DENSITY: f64 = 0.1;
/// Clutter strokes per image and their length.
const CLUTTER_STROKES: usize = 3;
const CLUTTER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("pattern larger than image: {0}")]
    PatternTooLarge(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("truncated dataset file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension overflow: {0}")]
    Overflow(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Compact disc-like cluster.
    Blob,
    /// Straight bar, horizontal or vertical.
    Bar,
    /// Seven-segment digit strokes.
    Glyph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Independent `U(0, amplitude)` per background pixel.
    Uniform,
    /// Background pixels set to `amplitude` with probability 0.1.
    SaltPepper,
    /// A few short strokes of intensity `amplitude`.
    StructuredClutter,
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Height and width of every image.
    pub image_size: usize,
    pub channels: usize,
    /// Informative pixels per image.
    pub signal_pixels: usize,
    pub signal_pattern: Pattern,
    pub noise_kind: NoiseKind,
    pub noise_amplitude: f64,
    /// Brightest value of an informative pixel.
    pub signal_intensity: f64,
    /// Informative pixels take `signal_intensity * (1 - signal_jitter * u)`
    /// with `u ~ U(0, 1)` drawn per pixel; 0 gives flat patterns.
    pub signal_jitter: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            signal_pixels: 24,
            signal_pattern: Pattern::Blob,
            noise_kind: NoiseKind::Uniform,
            noise_amplitude: 0.1,
            signal_intensity: 1.0,
            signal_jitter: 0.5,
            n_train: 256,
            n_test: 64,
        }
    }
}

impl SynthSpec {
    /// Expected value of a background pixel.
    pub fn expected_noise_mean(&self) -> f64 {
        match self.noise_kind {
            NoiseKind::Uniform => self.noise_amplitude / 2.0,
            NoiseKind::SaltPepper => self.noise_amplitude * SALT_DENSITY,
            // strokes may overlap each other or the signal, so this is an
            // upper bound
            NoiseKind::StructuredClutter => {
                let bg = (self.image_size * self.image_size - self.signal_pixels) as f64;
                self.noise_amplitude * (CLUTTER_STROKES * CLUTTER_LEN) as f64 / bg.max(1.0)
            }
        }
    }

    /// Expected value of an informative pixel.
    pub fn expected_signal_mean(&self) -> f64 {
        self.signal_intensity * (1.0 - self.signal_jitter / 2.0)
    }

    /// Expected signal value minus the expected background value.
    pub fn contrast(&self) -> f64 {
        self.expected_signal_mean() - self.expected_noise_mean()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let s = self.image_size;
        if s == 0 || self.channels == 0 {
            return Err(DataError::Spec(
                "image size and channels must be positive".into(),
            ));
        }
        if self.n_train + self.n_test == 0 {
            return Err(DataError::Spec("dataset would be empty".into()));
        }
        if self.signal_pixels == 0 {
            return Err(DataError::Spec("signal_pixels must be positive".into()));
        }
        if [
            self.noise_amplitude,
            self.signal_intensity,
            self.signal_jitter,
        ]
        .iter()
        .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(DataError::Spec(
                "noise amplitude, signal intensity and jitter must lie in [0, 1]".into(),
            ));
        }
        if self.signal_pixels > s * s {
            return Err(DataError::PatternTooLarge(format!(
                "{} signal pixels in a {s}x{s} image",
                self.signal_pixels
            )));
        }
        let (bh, bw) = self.pattern_extent();
        if bh > s || bw > s {
            return Err(DataError::PatternTooLarge(format!(
                "{:?} of {} pixels spans {bh}x{bw}, image is {s}x{s}",
                self.signal_pattern, self.signal_pixels
            )));
        }
        Ok(())
    }

    /// Largest bounding box any instance of the pattern can have.
    fn pattern_extent(&self) -> (usize, usize) {
        let k = self.signal_pixels;
        match self.signal_pattern {
            Pattern::Blob => bounding_box(&blob_offsets(k)),
            Pattern::Bar => {
                let len = k.min(self.image_size);
                let thick = k.div_ceil(len);
                (len.max(thick), len.max(thick))
            }
            Pattern::Glyph => (0..10)
                .map(|d| bounding_box(&glyph_offsets(d, k)))
                .fold((0, 0), |(a, b), (h, w)| (a.max(h), b.max(w))),
        }
    }
}

fn bounding_box(offsets: &[(usize, usize)]) -> (usize, usize) {
    let h = offsets.iter().map(|o| o.0 + 1).max().unwrap_or(0);
    let w = offsets.iter().map(|o| o.1 + 1).max().unwrap_or(0);
    (h, w)
}

/// The `k` grid points closest to a centre, shifted to start at (0, 0).
fn blob_offsets(k: usize) -> Vec<(usize, usize)> {
    let r = (k as f64).sqrt().ceil() as isize;
    let mut pts: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (y, x)))
        .collect();
    pts.sort_by_key(|&(y, x)| (y * y + x * x, y, x));
    pts.truncate(k);
    normalise(&pts)
}

fn normalise(pts: &[(isize, isize)]) -> Vec<(usize, usize)> {
    let y0 = pts.iter().map(|p| p.0).min().unwrap_or(0);
    let x0 = pts.iter().map(|p| p.1).min().unwrap_or(0);
    pts.iter()
        .map(|&(y, x)| ((y - y0) as usize, (x - x0) as usize))
        .collect()
}

fn bar_offsets(k: usize, size: usize, vertical: bool) -> Vec<(usize, usize)> {
    let len = k.min(size);
    (0..k)
        .map(|i| {
            let (r, c) = (i / len, i % len);
            if vertical {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect()
}

const SEGMENTS: [&str; 10] = [
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg",
];

/// First `k` pixels of a seven-segment digit drawn segment by segment, with
/// the shortest segment length that yields at least `k` pixels.
fn glyph_offsets(digit: usize, k: usize) -> Vec<(usize, usize)> {
    let segs = SEGMENTS[digit % 10];
    let len = k.div_ceil(segs.len()).max(1);
    let mut pts = Vec::with_capacity(segs.len() * len);
    for seg in segs.chars() {
        for i in 1..=len {
            pts.push(match seg {
                'a' => (0, i),
                'b' => (i, len + 1),
                'c' => (len + 1 + i, len + 1),
                'd' => (2 * len + 2, i),
                'e' => (len + 1 + i, 0),
                'f' => (i, 0),
                _ => (len + 1, i),
            });
        }
    }
    pts.truncate(k);
    pts
}

/// Images with their ground-truth relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f64>,
    /// `[N, H, W]`, 1 on signal pixels.
    pub relevance: Tensor<f64>,
    /// The first `n_train` instances form the training split.
    pub n_train: usize,
    pub signal_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-instance shape `[C, H, W]`.
    pub fn instance_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Number of scalar features per instance, `C * H * W`.
    pub fn features(&self) -> usize {
        self.instance_shape().iter().product()
    }

    pub fn pixels(&self) -> usize {
        self.relevance.shape()[1..].iter().product()
    }

    fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.n_train),
            Split::Test => (self.n_train, self.len()),
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        let (a, b) = self.range(split);
        b - a
    }

    pub fn split_images(&self, split: Split) -> Tensor<f64> {
        let (a, b) = self.range(split);
        self.images.slice_batch(a, b).expect("split within bounds")
    }

    pub fn split_relevance(&self, split: Split) -> Tensor<f64> {
        let (a, b) = self.range(split);
        self.relevance
            .slice_batch(a, b)
            .expect("split within bounds")
    }
}

/// Generates a dataset. Instance `i` draws from its own ChaCha stream `i`
/// under `seed`, so the result depends only on `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let (s, c) = (spec.image_size, spec.channels);
    let n = spec.n_train + spec.n_test;
    let plane = s * s;
    let mut images = vec![0.0f64; n * c * plane];
    let mut relevance = vec![0.0f64; n * plane];
    let k = spec.signal_pixels;

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);

        let offsets = match spec.signal_pattern {
            Pattern::Blob => blob_offsets(k),
            Pattern::Bar => bar_offsets(k, s, rng.gen_bool(0.5)),
            Pattern::Glyph => glyph_offsets(rng.gen_range(0..10), k),
        };
        let (bh, bw) = bounding_box(&offsets);
        let top = rng.gen_range(0..=s - bh);
        let left = rng.gen_range(0..=s - bw);
        let truth = &mut relevance[i * plane..(i + 1) * plane];
        for &(y, x) in &offsets {
            truth[(top + y) * s + left + x] = 1.0;
        }

        for ch in 0..c {
            let img = &mut images[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            match spec.noise_kind {
                NoiseKind::Uniform => {
                    for v in img.iter_mut() {
                        *v = rng.gen::<f64>() * spec.noise_amplitude;
                    }
                }
                NoiseKind::SaltPepper => {
                    for v in img.iter_mut() {
                        *v = if rng.gen_bool(SALT_DENSITY) {
                            spec.noise_amplitude
                        } else {
                            0.0
                        };
                    }
                }
                NoiseKind::StructuredClutter => {
                    for _ in 0..CLUTTER_STROKES {
                        let vertical = rng.gen_bool(0.5);
                        let len = CLUTTER_LEN.min(s);
                        let a = rng.gen_range(0..s);
                        let b = rng.gen_range(0..=s - len);
                        for t in 0..len {
                            let (y, x) = if vertical { (b + t, a) } else { (a, b + t) };
                            img[y * s + x] = spec.noise_amplitude;
                        }
                    }
                }
            }
            for (v, &r) in img.iter_mut().zip(truth.iter()) {
                if r == 1.0 {
                    *v = spec.signal_intensity * (1.0 - spec.signal_jitter * rng.gen::<f64>());
                }
                // stored as f32 on disk; keep memory identical to the file
                *v = *v as f32 as f64;
            }
        }
    }

    Ok(Dataset {
        images: Tensor::new(vec![n, c, s, s], images)?,
        relevance: Tensor::new(vec![n, s, s], relevance)?,
        n_train: spec.n_train,
        signal_pixels: k,
    })
}

/// Serialises a dataset: magic, version, then `u32` n, c, h, w, n_train,
/// signal_pixels, then images and relevance as little-endian `f32`.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let &[n, c, h, w] = ds.images.shape() else {
        unreachable!("dataset images are rank 4")
    };
    let mut out = Vec::with_capacity(32 + 4 * (ds.images.numel() + ds.relevance.numel()));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [n, c, h, w, ds.n_train, ds.signal_pixels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in ds.images.data().iter().chain(ds.relevance.data()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

const HEADER_LEN: usize = 4 + 4 + 6 * 4;

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != DATASET_VERSION {
        return Err(DataError::Version(version));
    }
    let [n, c, h, w, n_train, signal] = [1, 2, 3, 4, 5, 6].map(|i| word(i) as usize);
    let overflow = || DataError::Overflow(format!("{n}x{c}x{h}x{w}"));
    let n_img = [n, c, h, w]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(overflow)?;
    let n_rel = [n, h, w]
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(overflow)?;
    let expected = n_img
        .checked_add(n_rel)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(overflow)?;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if n_train > n {
        return Err(DataError::Format(format!(
            "n_train {n_train} exceeds {n} instances"
        )));
    }
    let mut vals = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    let images: Vec<f64> = vals.by_ref().take(n_img).collect();
    let relevance: Vec<f64> = vals.collect();
    if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DataError::Format("pixel value outside [0, 1]".into()));
    }
    if relevance.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DataError::Format("relevance map is not binary".into()));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, c, h, w], images)?,
        relevance: Tensor::new(vec![n, h, w], relevance)?,
        n_train,
        signal_pixels: signal,
    })
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, encode_dataset(ds)).map_err(|e| io_err(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_dataset(&bytes)
}

/// Mean over instances of `|selected ∩ signal| / |signal|`.
///
/// `mask` is `[B, P]` with one entry per pixel, or `[B, C*P]` with one entry
/// per pixel-channel (a pixel counts as selected if any channel is).
/// `truth` is `[B, H, W]` with `H * W = P`.
pub fn overlap_from_mask(mask: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64, DataError> {
    let (&[b, f], Some(&tb)) = (mask.shape(), truth.shape().first()) else {
        return Err(DataError::Shape(format!(
            "mask {:?} / truth {:?}",
            mask.shape(),
            truth.shape()
        )));
    };
    let pixels: usize = truth.shape()[1..].iter().product();
    if tb != b || pixels == 0 || f % pixels != 0 {
        return Err(DataError::Shape(format!(
            "mask {:?} does not cover truth {:?}",
            mask.shape(),
            truth.shape()
        )));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let channels = f / pixels;
    let mut total = 0.0;
    for (i, (mrow, trow)) in mask
        .data()
        .chunks(f)
        .zip(truth.data().chunks(pixels))
        .enumerate()
    {
        let signal = trow.iter().filter(|&&t| t == 1.0).count();
        if signal == 0 {
            return Err(DataError::Shape(format!(
                "instance {i} has no signal pixels"
            )));
        }
        let hit = (0..pixels)
            .filter(|&p| trow[p] == 1.0 && (0..channels).any(|c| mrow[c * pixels + p] == 1.0))
            .count();
        total += hit as f64 / signal as f64;
    }
    Ok(total / b as f64)
}

pub fn mask_overlap(mask: &SelectionMask<f64>, truth: &Tensor<f64>) -> Result<f64, DataError> {
    overlap_from_mask(&mask.gamma_mask, truth)
}

/// Plain (P2) greyscale image with values in `[0, 1]` mapped to `0..=255`.
pub fn pgm_string(width: usize, height: usize, values: &[f64]) -> String {
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width.max(1)).take(height) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    values: &[f64],
) -> Result<(), DataError> {
    let path = path.as_ref();
    std::fs::write(path, pgm_string(width, height, values)).map_err(|e| io_err(path, e))
}

/// Writes `image_XXXX.pgm` and `truth_XXXX.pgm` for the first `count`
/// instances (first channel only).
pub fn export_pgm(ds: &Dataset, dir: impl AsRef<Path>, count: usize) -> Result<usize, DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let shape = ds.images.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = count.min(ds.len());
    for i in 0..count {
        let img = &ds.images.data()[i * c * plane..i * c * plane + plane];
        let truth = &ds.relevance.data()[i * plane..(i + 1) * plane];
        write_pgm(dir.join(format!("image_{i:04}.pgm")), w, h, img)?;
        write_pgm(dir.join(format!("truth_{i:04}.pgm")), w, h, truth)?;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_train: 20,
            n_test: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn relevance_sums_match_signal() {
        for pattern in [Pattern::Blob, Pattern::Bar, Pattern::Glyph] {
            let spec = SynthSpec {
                signal_pattern: pattern,
                signal_pixels: 12,
                ..small()
            };
            let ds = generate(&spec, 5).unwrap();
            for row in ds.relevance.data().chunks(256) {
                assert_eq!(row.iter().sum::<f64>(), 12.0, "{pattern:?}");
            }
            assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noiseless_images_are_the_pattern() {
        let spec = SynthSpec {
            noise_amplitude: 0.0,
            signal_jitter: 0.0,
            ..small()
        };
        let ds = generate(&spec, 1).unwrap();
        assert_eq!(ds.images.data(), ds.relevance.data());
        let textured = generate(
            &SynthSpec {
                noise_amplitude: 0.0,
                ..small()
            },
            1,
        )
        .unwrap();
        for (v, r) in textured.images.data().iter().zip(ds.relevance.data()) {
            assert_eq!(*v > 0.0, *r == 1.0);
        }
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let a = generate(&small(), 7).unwrap();
        let b = generate(&small(), 7).unwrap();
        let c = generate(&small(), 8).unwrap();
        assert_eq!(encode_dataset(&a), encode_dataset(&b));
        assert_ne!(a, c);
    }

    #[test]
    fn placement_varies() {
        let ds = generate(&small(), 3).unwrap();
        let first = &ds.relevance.data()[..256];
        assert!(ds.relevance.data().chunks(256).skip(1).any(|r| r != first));
    }

    #[test]
    fn pattern_larger_than_image() {
        let spec = SynthSpec {
            image_size: 8,
            signal_pixels: 999,
            ..small()
        };
        let err = generate(&spec, 0).unwrap_err();
        assert!(
            err.to_string().contains("pattern larger than image"),
            "{err}"
        );
        let glyph = SynthSpec {
            image_size: 8,
            signal_pixels: 20,
            signal_pattern: Pattern::Glyph,
            ..small()
        };
        assert!(matches!(
            generate(&glyph, 0),
            Err(DataError::PatternTooLarge(_))
        ));
    }

    #[test]
    fn blob_is_compact() {
        let pts = blob_offsets(25);
        assert_eq!(pts.len(), 25);
        let (h, w) = bounding_box(&pts);
        assert!(h <= 6 && w <= 6, "{h}x{w}");
    }

    #[test]
    fn file_round_trip_and_errors() {
        let ds = generate(&small(), 11).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        let err = decode_dataset(&bad).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        let err = decode_dataset(&bytes[..bytes.len() - 10]).unwrap_err();
        assert_eq!(
            err,
            DataError::Truncated {
                expected: bytes.len(),
                actual: bytes.len() - 10
            }
        );

        let mut huge = bytes[..HEADER_LEN].to_vec();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_dataset(&huge), Err(DataError::Overflow(_))));
    }

    #[test]
    fn overlap_extremes() {
        let ds = generate(&small(), 2).unwrap();
        let truth = ds.relevance.slice_batch(0, 4).unwrap();
        let same = truth.clone().reshaped(vec![4, 256]).unwrap();
        assert_eq!(overlap_from_mask(&same, &truth).unwrap(), 1.0);
        let inverse = same.map(|v| 1.0 - v);
        assert_eq!(overlap_from_mask(&inverse, &truth).unwrap(), 0.0);
        let bad = Tensor::<f64>::zeros(vec![4, 100]);
        assert!(overlap_from_mask(&bad, &truth).is_err());
    }

    #[test]
    fn measured_contrast_matches_config() {
        for noise_kind in [NoiseKind::Uniform, NoiseKind::SaltPepper] {
            let spec = SynthSpec {
                noise_kind,
                noise_amplitude: 0.4,
                signal_intensity: 0.9,
                n_train: 1000,
                n_test: 0,
                ..SynthSpec::default()
            };
            let ds = generate(&spec, 21).unwrap();
            let (mut sig, mut ns, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
            for (v, r) in ds.images.data().iter().zip(ds.relevance.data()) {
                if *r == 1.0 {
                    sig += v;
                    ns += 1;
                } else {
                    bg += v;
                    nb += 1;
                }
            }
            let measured = sig / ns as f64 - bg / nb as f64;
            assert!(
                (measured - spec.contrast()).abs() < 5e-3,
                "{noise_kind:?}: {measured}"
            );
        }
    }

    #[test]
    fn random_mask_overlap_is_budget_fraction() {
        use rand::seq::index::sample;
        let spec = SynthSpec {
            n_train: 2000,
            n_test: 0,
            ..SynthSpec::default()
        };
        let ds = generate(&spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 64;
        let mut mask = vec![0.0; 2000 * 256];
        for row in mask.chunks_mut(256) {
            for j in sample(&mut rng, 256, m) {
                row[j] = 1.0;
            }
        }
        let mask = Tensor::new(vec![2000, 256], mask).unwrap();
        let ov = overlap_from_mask(&mask, &ds.relevance).unwrap();
        assert!((ov - m as f64 / 256.0).abs() < 0.02, "{ov}");
    }

    #[test]
    fn pgm_format() {
        let s = pgm_string(2, 2, &[0.0, 1.0, 0.5, 2.0]);
        assert_eq!(s, "P2\n2 2\n255\n0 255\n128 255\n");
    }
}
