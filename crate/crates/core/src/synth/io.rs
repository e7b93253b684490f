//! Dataset generation and the on-disk layout.
//!
//! ```text
//! manifest.json
//! images/{id}.png    8-bit RGB
//! fgbg/{id}.png      8-bit gray, 0 or 255
//! classes/{id}.png   8-bit gray, 0..=10
//! fields/{id}.ntfd   "NTFD", H u32, W u32, channels u32, then f32 LE (HWC)
//! ```

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{generate_sample, Appearance, ImageSample, SceneSpec, SynthError};

pub const FORMAT: &str = "nailtrace-synthetic/1";
const FIELD_MAGIC: &[u8; 4] = b"NTFD";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> DatasetError {
    DatasetError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// What to generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Total images.
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Images sharing skin tone and backdrop; splits never break a scene.
    pub samples_per_scene: usize,
    /// Inclusive range of nails per image.
    pub nails_per_image: (usize, usize),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 300,
            width: 128,
            height: 128,
            samples_per_scene: 4,
            nails_per_image: (1, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: usize,
    pub split: Split,
    pub nail_count: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: DatasetSpec,
    /// Nail pixels over all pixels, whole dataset.
    pub fg_fraction: f64,
    pub train_scenes: Vec<usize>,
    pub val_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split_of_scene(&self, scene: usize) -> Option<Split> {
        if self.train_scenes.contains(&scene) {
            Some(Split::Train)
        } else if self.val_scenes.contains(&scene) {
            Some(Split::Val)
        } else if self.test_scenes.contains(&scene) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// In manifest order.
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.manifest
            .samples
            .iter()
            .zip(&self.samples)
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s)
            .collect()
    }
}

/// Mixes a stream index into a seed (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene counts for the 65/18/17 split, at least one scene each once there
/// are three or more.
fn split_counts(scenes: usize) -> (usize, usize, usize) {
    if scenes < 3 {
        return (scenes, 0, 0);
    }
    let val = ((scenes as f64 * 0.18).round() as usize).max(1);
    let test = ((scenes as f64 * 0.17).round() as usize).max(1);
    (scenes - val - test, val, test)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    let per_scene = spec.samples_per_scene.max(1);
    let (lo, hi) = spec.nails_per_image;
    if lo == 0 || hi < lo {
        return Err(SynthError::Spec(format!("nails_per_image range {lo}..={hi}")).into());
    }
    let scenes = spec.count.div_ceil(per_scene);
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX)));
    let (n_train, n_val, _) = split_counts(scenes);
    let mut train_scenes = order[..n_train].to_vec();
    let mut val_scenes = order[n_train..n_train + n_val].to_vec();
    let mut test_scenes = order[n_train + n_val..].to_vec();
    train_scenes.sort_unstable();
    val_scenes.sort_unstable();
    test_scenes.sort_unstable();

    let appearances: Vec<Appearance> = (0..scenes)
        .map(|s| Appearance::random(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, s as u64 | 1 << 40))))
        .collect();

    let results: Vec<Result<(ManifestEntry, ImageSample), SynthError>> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let scene = i / per_scene;
            let rng_seed = derive_seed(spec.seed, i as u64);
            let nail_count = ChaCha8Rng::seed_from_u64(rng_seed ^ 0xa5a5).gen_range(lo..=hi);
            let scene_spec = SceneSpec::new(rng_seed, spec.width, spec.height, nail_count, appearances[scene]);
            let sample = generate_sample(&scene_spec)?;
            let split = if train_scenes.binary_search(&scene).is_ok() {
                Split::Train
            } else if val_scenes.binary_search(&scene).is_ok() {
                Split::Val
            } else {
                Split::Test
            };
            let entry = ManifestEntry {
                id: format!("{i:05}"),
                scene,
                split,
                nail_count,
                rng_seed,
            };
            Ok((entry, sample))
        })
        .collect();

    let mut entries = Vec::with_capacity(spec.count);
    let mut samples = Vec::with_capacity(spec.count);
    for r in results {
        let (e, s) = r?;
        entries.push(e);
        samples.push(s);
    }
    let fg: usize = samples.iter().map(|s| s.fg_pixels()).sum();
    let total: usize = samples.iter().map(|s| s.pixels()).sum();
    Ok(Dataset {
        manifest: Manifest {
            format: FORMAT.into(),
            spec: spec.clone(),
            fg_fraction: if total == 0 { 0.0 } else { fg as f64 / total as f64 },
            train_scenes,
            val_scenes,
            test_scenes,
            samples: entries,
        },
        samples,
    })
}

fn write_png<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    path: &Path,
    img: &image::ImageBuffer<P, Vec<u8>>,
) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    img.write_to(&mut io::Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| corrupt(path, e.to_string()))?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn write_field<W: Write>(mut w: W, h: usize, wd: usize, channels: usize, data: &[f32]) -> io::Result<()> {
    w.write_all(FIELD_MAGIC)?;
    w.write_u32::<LittleEndian>(h as u32)?;
    w.write_u32::<LittleEndian>(wd as u32)?;
    w.write_u32::<LittleEndian>(channels as u32)?;
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Returns `(h, w, channels, data)`.
pub fn read_field<R: Read>(mut r: R) -> io::Result<(usize, usize, usize, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad field magic"));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u32::<LittleEndian>()? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "field dims overflow"))?;
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes after field"));
    }
    Ok((h, w, c, data))
}

const SUBDIRS: [&str; 4] = ["images", "fgbg", "classes", "fields"];

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    for sub in SUBDIRS {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    dataset
        .manifest
        .samples
        .par_iter()
        .zip(&dataset.samples)
        .try_for_each(|(entry, s)| -> Result<(), DatasetError> {
            let (w, h) = (s.width as u32, s.height as u32);
            let rgb = RgbImage::from_raw(w, h, s.image.clone()).expect("plane size checked");
            write_png(&dir.join("images").join(format!("{}.png", entry.id)), &rgb)?;
            let fg = GrayImage::from_raw(w, h, s.fgbg.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect())
                .expect("plane size checked");
            write_png(&dir.join("fgbg").join(format!("{}.png", entry.id)), &fg)?;
            let cls = GrayImage::from_raw(w, h, s.classes.clone()).expect("plane size checked");
            write_png(&dir.join("classes").join(format!("{}.png", entry.id)), &cls)?;
            let path = dir.join("fields").join(format!("{}.ntfd", entry.id));
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            let mut bw = BufWriter::new(file);
            write_field(&mut bw, s.height, s.width, 2, &s.field).map_err(io_err(&path))?;
            bw.flush().map_err(io_err(&path))
        })?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

fn read_gray(path: &Path) -> Result<GrayImage, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| corrupt(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(corrupt(path, format!("expected 8-bit gray, got {:?}", other.color()))),
    }
}

fn read_sample(dir: &Path, id: &str) -> Result<ImageSample, DatasetError> {
    let path = dir.join("images").join(format!("{id}.png"));
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let rgb = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| corrupt(&path, e.to_string()))?
        .into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);

    let fg_path = dir.join("fgbg").join(format!("{id}.png"));
    let fg = read_gray(&fg_path)?;
    let cls_path = dir.join("classes").join(format!("{id}.png"));
    let cls = read_gray(&cls_path)?;
    for (p, img) in [(&fg_path, &fg), (&cls_path, &cls)] {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(corrupt(p, "plane size differs from image"));
        }
    }
    let field_path = dir.join("fields").join(format!("{id}.ntfd"));
    let file = fs::File::open(&field_path).map_err(io_err(&field_path))?;
    let (fh, fw, fc, field) = read_field(io::BufReader::new(file)).map_err(|e| corrupt(&field_path, e.to_string()))?;
    if (fh, fw, fc) != (h, w, 2) {
        return Err(corrupt(&field_path, format!("field is {fh}x{fw}x{fc}, expected {h}x{w}x2")));
    }
    Ok(ImageSample {
        width: w,
        height: h,
        image: rgb.into_raw(),
        fgbg: fg.into_raw().into_iter().map(|v| (v > 127) as u8).collect(),
        classes: cls.into_raw(),
        field,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(corrupt(&path, format!("unknown format {:?}", manifest.format)));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| read_sample(dir, &e.id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, samples })
}

/// SHA-256 over every dataset file, visited in sorted path order.
pub fn dataset_checksum(dir: &Path) -> Result<String, DatasetError> {
    let manifest = read_manifest(dir)?;
    let mut files = vec![PathBuf::from("manifest.json")];
    for e in &manifest.samples {
        for sub in SUBDIRS {
            let ext = if sub == "fields" { "ntfd" } else { "png" };
            files.push(PathBuf::from(sub).join(format!("{}.{ext}", e.id)));
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_proportions() {
        assert_eq!(split_counts(100), (65, 18, 17));
        assert_eq!(split_counts(2), (2, 0, 0));
        let (a, b, c) = split_counts(7);
        assert_eq!(a + b + c, 7);
        assert!(b >= 1 && c >= 1);
    }

    #[test]
    fn field_header_layout() {
        let mut buf = Vec::new();
        write_field(&mut buf, 2, 3, 2, &[0.5; 12]).unwrap();
        assert_eq!(&buf[..4], b"NTFD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 12 * 4);
        let (h, w, c, d) = read_field(&buf[..]).unwrap();
        assert_eq!((h, w, c), (2, 3, 2));
        assert_eq!(d, vec![0.5; 12]);
        assert!(read_field(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }
}
