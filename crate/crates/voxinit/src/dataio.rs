//! Synthetic volumetric datasets (ellipsoid "organs" on a noisy background),
//! per-volume z-score normalization, and a bit-exact binary volume format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoxError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_MAGIC: &[u8; 4] = b"VVOL";
const LABEL_MAGIC: &[u8; 4] = b"VLAB";
const FORMAT_VERSION: u32 = 1;

/// One volume: single-channel intensities plus voxel labels in [0, J).
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// Intensities, shape [C, H, W, D].
    pub image: Tensor<f32>,
    /// Row-major H x W x D class labels.
    pub labels: Vec<u16>,
    pub dims: [usize; 3],
}

impl VolumeSample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let [h, w, d] = self.dims;
        if self.image.rank() != 4 || self.image.shape()[1..] != [h, w, d] {
            return Err(VoxError::shape(format!(
                "image shape {:?} does not match dims {:?}",
                self.image.shape(),
                self.dims
            )));
        }
        if self.labels.len() != h * w * d {
            return Err(VoxError::shape(format!(
                "{} labels for {} voxels",
                self.labels.len(),
                h * w * d
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(VoxError::usage(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Recipe for a synthetic dataset. Class 0 is background (mean 0, std
/// `noise_std`); foreground class j uses `class_means[j-1]` and
/// `class_stds[j-1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub classes: usize,
    /// Inclusive ellipsoid count range per foreground class.
    pub organs_per_class: (usize, usize),
    /// Inclusive semi-axis range, voxels.
    pub radius_range: (f64, f64),
    pub class_means: Vec<f64>,
    pub class_stds: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Evenly spaced foreground intensities with mild noise.
    pub fn balanced(dims: [usize; 3], classes: usize, seed: u64) -> Self {
        let fg = classes.saturating_sub(1);
        SynthSpec {
            dims,
            classes,
            organs_per_class: (1, 2),
            radius_range: (3.0, 6.0),
            class_means: (1..=fg).map(|j| j as f64 / classes as f64).collect(),
            class_stds: vec![0.05; fg],
            noise_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(VoxError::config("need at least 2 classes"));
        }
        if self.dims.contains(&0) {
            return Err(VoxError::config("volume dims must be positive"));
        }
        let fg = self.classes - 1;
        if self.class_means.len() != fg || self.class_stds.len() != fg {
            return Err(VoxError::config(format!(
                "need {fg} foreground means/stds, got {}/{}",
                self.class_means.len(),
                self.class_stds.len()
            )));
        }
        let (lo, hi) = self.organs_per_class;
        if lo < 1 || lo > hi {
            return Err(VoxError::config(format!(
                "organs per class range ({lo}, {hi}) must satisfy 1 <= lo <= hi"
            )));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(VoxError::config(format!(
                "radius range ({rlo}, {rhi}) must satisfy 0 < lo <= hi"
            )));
        }
        let tightest = (*self.dims.iter().min().unwrap() as f64 - 1.0) / 2.0;
        if rhi > tightest {
            return Err(VoxError::config(format!(
                "radius {rhi} cannot fit inside dims {:?} (max {tightest})",
                self.dims
            )));
        }
        if self.noise_std < 0.0 || self.class_stds.iter().any(|&s| s < 0.0) {
            return Err(VoxError::config("intensity stds must be >= 0"));
        }
        Ok(())
    }
}

/// An axis-aligned ellipsoid painted into a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Organ {
    pub class: u16,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Organ {
    pub fn contains(&self, voxel: [usize; 3]) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let t = (voxel[a] as f64 - self.center[a]) / self.radii[a];
            q += t * t;
        }
        q <= 1.0
    }
}

fn draw_organs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Organ> {
    let (lo, hi) = spec.organs_per_class;
    let mut organs = Vec::new();
    for class in 1..spec.classes as u16 {
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            let mut radii = [0.0; 3];
            for r in &mut radii {
                *r = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
            }
            let mut center = [0.0; 3];
            for a in 0..3 {
                center[a] = rng.gen_range(radii[a]..=(spec.dims[a] as f64 - 1.0 - radii[a]));
            }
            organs.push(Organ {
                class,
                center,
                radii,
            });
        }
    }
    organs
}

fn paint(spec: &SynthSpec, organs: &[Organ], labels: &mut [u16]) {
    for organ in organs {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            lo[a] = (organ.center[a] - organ.radii[a]).ceil().max(0.0) as usize;
            hi[a] = ((organ.center[a] + organ.radii[a]).floor() as usize).min(spec.dims[a] - 1);
        }
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if organ.contains([x, y, z]) {
                        labels[(x * spec.dims[1] + y) * spec.dims[2] + z] = organ.class;
                    }
                }
            }
        }
    }
}

/// Generate one sample and the ellipsoids that produced it. Later organs in
/// the returned list win at overlaps.
pub fn generate_sample(spec: &SynthSpec, id: &str, seed: u64) -> Result<(VolumeSample, Vec<Organ>)> {
    spec.validate()?;
    let [h, w, d] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let organs = draw_organs(spec, &mut rng);
    let mut labels = vec![0u16; h * w * d];
    paint(spec, &organs, &mut labels);

    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut data = vec![0.0f32; h * w * d];
    for (v, &label) in labels.iter().enumerate() {
        let (mean, std) = if label == 0 {
            (0.0, spec.noise_std)
        } else {
            (
                spec.class_means[label as usize - 1],
                spec.class_stds[label as usize - 1],
            )
        };
        data[v] = (mean + std * unit.sample(&mut rng)) as f32;
    }
    let sample = VolumeSample {
        id: id.to_string(),
        image: Tensor::from_vec(&[1, h, w, d], data)?,
        labels,
        dims: spec.dims,
    };
    Ok((sample, organs))
}

/// n seeded samples; sample i is identical regardless of n.
pub fn generate_dataset(spec: &SynthSpec, n: usize) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sub: u64 = master.gen();
        let (sample, _) = generate_sample(spec, &format!("sample{i:04}"), sub)?;
        out.push(sample);
    }
    Ok(out)
}

/// Per-volume z-score with the std guarded at 1e-8.
pub fn normalize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let n = image.numel() as f64;
    let mean = image.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = image
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-8);
    image.map(|v| T::from_f64((v.to_f64_lossy() - mean) / std))
}

/// First ~80% of indices train, the rest validation; at least one train
/// sample whenever any exist.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let train = ((n * 4) / 5).max(usize::from(n > 0));
    ((0..train).collect(), (train..n).collect())
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn need(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(VoxError::format(
                self.buf.len() as u64,
                format!("file truncated at {} while reading {what}", self.buf.len()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.need(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Serialize a sample: "VVOL" | u32 version | u32 C,H,W,D | f32-LE image |
/// "VLAB" | u16-LE labels. Everything little-endian, row-major.
pub fn write_volume(path: &Path, sample: &VolumeSample) -> Result<()> {
    let [h, w, d] = sample.dims;
    if sample.image.rank() != 4 || sample.image.shape()[1..] != [h, w, d] {
        return Err(VoxError::shape(format!(
            "image shape {:?} does not match dims {:?}",
            sample.image.shape(),
            sample.dims
        )));
    }
    if sample.labels.len() != h * w * d {
        return Err(VoxError::shape(format!(
            "{} labels for {} voxels",
            sample.labels.len(),
            h * w * d
        )));
    }
    let c = sample.image.shape()[0];
    let mut bytes =
        Vec::with_capacity(24 + sample.image.numel() * 4 + 4 + sample.labels.len() * 2);
    bytes.extend_from_slice(IMAGE_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [c, h, w, d] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in sample.image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(LABEL_MAGIC);
    for &l in &sample.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse a volume file; the sample id is the file stem.
pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    crate::audit::note_read(path);
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.need(4, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(VoxError::format(0, format!("bad magic {magic:02x?}")));
    }
    let ver_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(VoxError::format(
            ver_at,
            format!("unsupported version {version}"),
        ));
    }
    let dims_at = r.pos as u64;
    let c = r.u32("channel count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let d = r.u32("depth")? as usize;
    let voxels = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .filter(|&v| v > 0 && c > 0 && c * v <= (1 << 31))
        .ok_or_else(|| {
            VoxError::format(dims_at, format!("implausible dims {c}x{h}x{w}x{d}"))
        })?;

    let raw = r.need(c * voxels * 4, "image payload")?;
    let image: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let lab_at = r.pos as u64;
    let magic = r.need(4, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(VoxError::format(lab_at, format!("bad label magic {magic:02x?}")));
    }
    let raw = r.need(voxels * 2, "label payload")?;
    let labels: Vec<u16> = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
        .collect();
    if r.pos != buf.len() {
        return Err(VoxError::format(
            r.pos as u64,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(VolumeSample {
        id,
        image: Tensor::from_vec(&[c, h, w, d], image)?,
        labels,
        dims: [h, w, d],
    })
}

/// Sidecar index for a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dims: [usize; 3],
    pub classes: usize,
    pub n: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

pub fn write_dataset(dir: &Path, spec: &SynthSpec, n: usize) -> Result<DatasetManifest> {
    let samples = generate_dataset(spec, n)?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(n);
    for s in &samples {
        let name = format!("{}.vvol", s.id);
        write_volume(&dir.join(&name), s)?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        dims: spec.dims,
        classes: spec.classes,
        n,
        seed: spec.seed,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    crate::audit::note_read(&path);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| VoxError::format(0, format!("manifest {}: {e}", path.display())))
}

/// Load every sample listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VolumeSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    for f in &manifest.files {
        let s = read_volume(&dir.join(f))?;
        s.validate(manifest.classes)?;
        if s.dims != manifest.dims {
            return Err(VoxError::shape(format!(
                "{f} has dims {:?}, manifest says {:?}",
                s.dims, manifest.dims
            )));
        }
        samples.push(s);
    }
    Ok((manifest, samples))
}
