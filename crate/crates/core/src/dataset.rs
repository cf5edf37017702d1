//! CWF1 dataset files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic       4 bytes  "CWF1"
//! version     u16
//! n_samples   u32
//! n_steps     u32
//! n_sensors   u32
//! n_channels  u32
//! label_h     u16
//! label_w     u16
//! flags       u32      bit 0: fields normalized by per-sample max |displacement|
//! per sample:
//!   field     n_steps * n_sensors * n_channels f32, time-major, then sensor, then channel
//!   mask      label_h * label_w bytes, row-major
//!   crack     6 f32 (p0x, p0y, p1x, p1y, width, size) + 1 byte present flag
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::AtomicFile;
use crate::labels::{mask_to_keypoints, KeypointBox, Mask};
use crate::rng::stream_rng;
use crate::wavesim::{
    build_lattice, simulate, CrackSampler, CrackSpec, LatticeConfig, SourceSpec, WaveSample,
    N_CHANNELS, N_SENSORS,
};

pub const MAGIC: &[u8; 4] = b"CWF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 4 + 4 + 4 + 4 + 2 + 2 + 4;
pub const FLAG_NORMALIZED: u32 = 1;
const DESCRIPTOR_LEN: u64 = 6 * 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cwf1Header {
    pub version: u16,
    pub n_samples: u32,
    pub n_steps: u32,
    pub n_sensors: u32,
    pub n_channels: u32,
    pub label_h: u16,
    pub label_w: u16,
    pub flags: u32,
}

impl Cwf1Header {
    pub fn field_len(&self) -> usize {
        self.n_steps as usize * self.n_sensors as usize * self.n_channels as usize
    }

    pub fn mask_len(&self) -> usize {
        self.label_h as usize * self.label_w as usize
    }

    pub fn sample_bytes(&self) -> u64 {
        4 * self.field_len() as u64 + self.mask_len() as u64 + DESCRIPTOR_LEN
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + u64::from(self.n_samples) * self.sample_bytes()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.n_samples.to_le_bytes())?;
        w.write_all(&self.n_steps.to_le_bytes())?;
        w.write_all(&self.n_sensors.to_le_bytes())?;
        w.write_all(&self.n_channels.to_le_bytes())?;
        w.write_all(&self.label_h.to_le_bytes())?;
        w.write_all(&self.label_w.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected CWF1")));
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported CWF1 version {version}")));
        }
        Ok(Self {
            version,
            n_samples: read_u32(r)?,
            n_steps: read_u32(r)?,
            n_sensors: read_u32(r)?,
            n_channels: read_u32(r)?,
            label_h: read_u16(r)?,
            label_w: read_u16(r)?,
            flags: read_u32(r)?,
        })
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// One stored sample as it sits in a CWF1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub field: Vec<f32>,
    pub mask: Mask,
    pub crack: CrackSpec,
    pub crack_size: f32,
}

impl StoredSample {
    /// Normalizes a simulated sample by its peak absolute displacement.
    pub fn from_wave(sample: &WaveSample) -> Self {
        let peak = sample.max_abs();
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        Self {
            field: sample.field.iter().map(|&v| (v * scale) as f32).collect(),
            mask: sample.mask.clone(),
            crack: sample.crack,
            crack_size: sample.crack.size() as f32,
        }
    }

    pub fn target(&self) -> Result<Option<KeypointBox>> {
        mask_to_keypoints(&self.mask)
    }
}

/// Streaming writer: the sample count is fixed up front.
pub struct Cwf1Writer<W: Write> {
    out: W,
    header: Cwf1Header,
    written: u32,
}

impl<W: Write> Cwf1Writer<W> {
    pub fn new(mut out: W, header: Cwf1Header) -> Result<Self> {
        header.write_to(&mut out)?;
        Ok(Self {
            out,
            header,
            written: 0,
        })
    }

    pub fn push(&mut self, s: &StoredSample) -> Result<()> {
        if self.written == self.header.n_samples {
            return Err(Error::Format(
                "more samples than declared in the header".into(),
            ));
        }
        if s.field.len() != self.header.field_len()
            || s.mask.as_bytes().len() != self.header.mask_len()
        {
            return Err(Error::Shape("sample does not match the CWF1 header".into()));
        }
        let mut buf = Vec::with_capacity(self.header.sample_bytes() as usize);
        for v in &s.field {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(s.mask.as_bytes());
        let c = &s.crack;
        for v in [c.p0[0], c.p0[1], c.p1[0], c.p1[1], c.width] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&s.crack_size.to_le_bytes());
        buf.push(u8::from(c.present));
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.n_samples {
            return Err(Error::Format(format!(
                "header declares {} samples, {} written",
                self.header.n_samples, self.written
            )));
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Fully loaded CWF1 file.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: Cwf1Header,
    pub samples: Vec<StoredSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input tensor shape `(n_steps, n_sensors, n_channels)` of every sample.
    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.header.n_steps as usize,
            self.header.n_sensors as usize,
            self.header.n_channels as usize,
        ]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<_> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset {
            header: Cwf1Header {
                n_samples: samples.len() as u32,
                ..self.header
            },
            samples,
        }
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let header = Cwf1Header::read_from(r)?;
        let (field_len, mask_len) = (header.field_len(), header.mask_len());
        let mut samples = Vec::with_capacity(header.n_samples as usize);
        let mut raw = vec![0u8; 4 * field_len];
        for _ in 0..header.n_samples {
            r.read_exact(&mut raw)?;
            let field = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let mut mask = vec![0u8; mask_len];
            r.read_exact(&mut mask)?;
            let mask = Mask::from_raw(header.label_h as usize, header.label_w as usize, mask)?;
            let mut d = [0f64; 5];
            for v in &mut d {
                *v = f64::from(read_f32(r)?);
            }
            let crack_size = read_f32(r)?;
            let mut present = [0u8; 1];
            r.read_exact(&mut present)?;
            let crack = CrackSpec {
                p0: [d[0], d[1]],
                p1: [d[2], d[3]],
                width: d[4],
                present: present[0] != 0,
            };
            samples.push(StoredSample {
                field,
                mask,
                crack,
                crack_size,
            });
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after the last sample".into()));
        }
        Ok(Self { header, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<W> {
        let mut writer = Cwf1Writer::new(w, self.header)?;
        for s in &self.samples {
            writer.push(s)?;
        }
        writer.finish()
    }
}

/// Result of [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub crack_sizes: Vec<f64>,
    pub file_len: u64,
}

impl DatasetSummary {
    /// Counts of crack sizes in `bins` equal-width bins over `[lo, hi]`.
    pub fn histogram(&self, lo: f64, hi: f64, bins: usize) -> Vec<usize> {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / bins.max(1) as f64;
        for &s in &self.crack_sizes {
            let i = if width > 0.0 {
                (((s - lo) / width).floor().max(0.0) as usize).min(counts.len() - 1)
            } else {
                0
            };
            counts[i] += 1;
        }
        counts
    }
}

/// Simulates sample `index` of a dataset seeded by `cfg.seed`.
///
/// A sampled crack that misses every bond is redrawn.
pub fn generate_sample(
    index: usize,
    cfg: &LatticeConfig,
    sampler: &CrackSampler,
    source: &SourceSpec,
) -> Result<WaveSample> {
    let mut rng = stream_rng(cfg.seed, "crack", index as u64);
    loop {
        let crack = sampler.sample(&mut rng);
        match build_lattice(cfg, &crack) {
            Ok(state) => return simulate(&state, source, cfg),
            Err(Error::CrackOutsidePlate) => continue,
            Err(e) => return Err(e),
        }
    }
}

pub fn header_for(n: usize, cfg: &LatticeConfig) -> Cwf1Header {
    Cwf1Header {
        version: VERSION,
        n_samples: n as u32,
        n_steps: cfg.n_steps as u32,
        n_sensors: N_SENSORS as u32,
        n_channels: N_CHANNELS as u32,
        label_h: cfg.label_h as u16,
        label_w: cfg.label_w as u16,
        flags: FLAG_NORMALIZED,
    }
}

/// Generates `n` samples deterministically from `cfg.seed` and writes them
/// to `path` as CWF1. The file only appears once fully written.
pub fn generate_dataset(
    n: usize,
    cfg: &LatticeConfig,
    sampler: &CrackSampler,
    source: &SourceSpec,
    path: &Path,
) -> Result<DatasetSummary> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if n > u32::MAX as usize || cfg.label_h > u16::MAX as usize || cfg.label_w > u16::MAX as usize {
        return Err(Error::Config(
            "dataset dimensions exceed the CWF1 header range".into(),
        ));
    }
    cfg.validate()?;
    sampler.validate()?;
    let header = header_for(n, cfg);
    let file = AtomicFile::create(path)?;
    let mut writer = Cwf1Writer::new(BufWriter::new(file), header)?;
    let mut crack_sizes = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_sample(i, cfg, sampler, source)?;
        let stored = StoredSample::from_wave(&sample);
        crack_sizes.push(f64::from(stored.crack_size));
        writer.push(&stored)?;
    }
    let file = writer
        .finish()?
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?;
    file.commit()?;
    Ok(DatasetSummary {
        n_samples: n,
        crack_sizes,
        file_len: header.file_len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> LatticeConfig {
        LatticeConfig {
            grid_nx: 16,
            grid_ny: 16,
            n_steps: 400,
            seed,
            ..LatticeConfig::default()
        }
    }

    #[test]
    fn default_layout_size() {
        // 30-byte header + 512 * (2000*81*2*4 + 16*16 + 6*4 + 1)
        let h = header_for(512, &LatticeConfig::default());
        assert_eq!(HEADER_LEN, 30);
        assert_eq!(h.sample_bytes(), 1_296_000 + 256 + 25);
        assert_eq!(h.file_len(), 30 + 512 * 1_296_281);
    }

    #[test]
    fn generated_file_matches_layout_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.cwf1"), dir.path().join("b.cwf1"));
        let cfg = tiny_cfg(11);
        let sampler = CrackSampler::default();
        let src = SourceSpec {
            center_frequency: 0.5,
            ..SourceSpec::default()
        };
        let sa = generate_dataset(2, &cfg, &sampler, &src, &a).unwrap();
        generate_dataset(2, &cfg, &sampler, &src, &b).unwrap();
        let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(ba, bb);
        assert_eq!(ba.len() as u64, sa.file_len);
        let ds = Dataset::load(&a).unwrap();
        assert_eq!(ds.len(), 2);
        for s in &ds.samples {
            assert!(s.crack.present);
            assert!(s.mask.count_ones() >= 1);
            assert!(s.field.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            assert!(s.field.iter().any(|&v| v.abs() == 1.0));
            assert!((f64::from(s.crack_size) - s.crack.size()).abs() < 1e-6);
        }
        let mut round = Vec::new();
        ds.write(&mut round).unwrap();
        assert_eq!(round, ba);
    }

    #[test]
    fn zero_samples_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cwf1");
        assert!(generate_dataset(
            0,
            &tiny_cfg(0),
            &CrackSampler::default(),
            &SourceSpec::default(),
            &p
        )
        .is_err());
        assert!(!p.exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bad = b"CWF2".to_vec();
        bad.extend_from_slice(&[0; 26]);
        assert!(matches!(
            Dataset::read(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let h = Cwf1Header {
            n_samples: 1,
            ..header_for(1, &tiny_cfg(0))
        };
        let mut truncated = Vec::new();
        h.write_to(&mut truncated).unwrap();
        truncated.extend_from_slice(&[0; 10]);
        assert!(Dataset::read(&mut truncated.as_slice()).is_err());
    }

    #[test]
    fn histogram_counts_every_sample() {
        let s = DatasetSummary {
            n_samples: 4,
            crack_sizes: vec![0.1, 0.2, 0.5, 0.49],
            file_len: 0,
        };
        let h = s.histogram(0.1, 0.5, 4);
        assert_eq!(h.iter().sum::<usize>(), 4);
        assert_eq!(h, vec![1, 1, 0, 2]);
    }
}
