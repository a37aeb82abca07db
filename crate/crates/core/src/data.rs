//! Event streams, spike tensors and datasets.
//!
//! SEVT layout (little endian, packed):
//!
//! ```text
//! "SEVT" | version u16 = 1 | width u16 | height u16 | count u64
//! count x { t_us u32 | x u16 | y u16 | polarity u8 }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, purpose};
use crate::{Error, Result};

pub const SEVT_MAGIC: [u8; 4] = *b"SEVT";
pub const SEVT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 8;
const RECORD_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDims {
    pub width: u16,
    pub height: u16,
}

fn validate_events(dims: SensorDims, events: &[EventRecord]) -> Result<()> {
    let mut last = 0u32;
    for (index, ev) in events.iter().enumerate() {
        if ev.x >= dims.width || ev.y >= dims.height {
            return Err(Error::Data {
                index,
                msg: format!(
                    "coordinate ({}, {}) outside {}x{} sensor",
                    ev.x, ev.y, dims.width, dims.height
                ),
            });
        }
        if ev.polarity > 1 {
            return Err(Error::Data {
                index,
                msg: format!("polarity {} is not 0 or 1", ev.polarity),
            });
        }
        if ev.t_us < last {
            return Err(Error::Data {
                index,
                msg: format!("timestamp {} precedes {}", ev.t_us, last),
            });
        }
        last = ev.t_us;
    }
    Ok(())
}

pub fn write_events<W: Write>(mut out: W, dims: SensorDims, events: &[EventRecord]) -> Result<()> {
    validate_events(dims, events)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * events.len());
    buf.extend_from_slice(&SEVT_MAGIC);
    buf.extend_from_slice(&SEVT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dims.width.to_le_bytes());
    buf.extend_from_slice(&dims.height.to_le_bytes());
    buf.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for ev in events {
        buf.extend_from_slice(&ev.t_us.to_le_bytes());
        buf.extend_from_slice(&ev.x.to_le_bytes());
        buf.extend_from_slice(&ev.y.to_le_bytes());
        buf.push(ev.polarity);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Parses a complete SEVT stream. Nothing is returned unless the whole
/// stream is valid.
pub fn read_events<R: Read>(mut input: R) -> Result<(SensorDims, Vec<EventRecord>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_events(&bytes)
}

pub fn parse_events(bytes: &[u8]) -> Result<(SensorDims, Vec<EventRecord>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "stream of {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[0..4] != SEVT_MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != SEVT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = SensorDims {
        width: u16_at(6),
        height: u16_at(8),
    };
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8-byte slice"));
    let body = &bytes[HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(RECORD_LEN))
        .ok_or_else(|| Error::Format(format!("record count {count} overflows")))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "header declares {count} records ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let events: Vec<EventRecord> = body
        .chunks_exact(RECORD_LEN)
        .map(|r| EventRecord {
            t_us: u32::from_le_bytes([r[0], r[1], r[2], r[3]]),
            x: u16::from_le_bytes([r[4], r[5]]),
            y: u16::from_le_bytes([r[6], r[7]]),
            polarity: r[8],
        })
        .collect();
    validate_events(dims, &events)?;
    Ok((dims, events))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Binary spikes laid out time x channel x height x width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    t: usize,
    shape: Shape3,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(t: usize, shape: Shape3) -> Self {
        Self {
            t,
            shape,
            data: vec![0; t * shape.len()],
        }
    }

    pub fn from_vec(t: usize, shape: Shape3, data: Vec<u8>) -> Result<Self> {
        if t == 0 {
            return Err(Error::Input("spike tensor needs at least one time step".into()));
        }
        if data.len() != t * shape.len() {
            return Err(Error::Config(format!(
                "{} spike entries for {t} x {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Data {
                index: i,
                msg: format!("spike value {} is not binary", data[i]),
            });
        }
        Ok(Self { t, shape, data })
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.shape.len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Copies step `t` into `out` as 0.0/1.0 values.
    pub fn frame_into(&self, t: usize, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(self.frame(t)) {
            *o = f64::from(v);
        }
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        let s = self.shape;
        self.data[((t * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize) {
        let s = self.shape;
        self.data[((t * s.c + c) * s.h + y) * s.w + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }
}

/// Bins events into `steps` frames of `dt_us` microseconds with two polarity
/// channels. Events past the last frame are dropped; repeated events in one
/// cell saturate to a single spike.
pub fn bin_events(events: &[EventRecord], dims: SensorDims, dt_us: u32, steps: usize) -> Result<SpikeTensor> {
    if dt_us == 0 {
        return Err(Error::Input("dt_us must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Input("need at least one time step".into()));
    }
    let shape = Shape3::new(2, usize::from(dims.height), usize::from(dims.width));
    let mut tensor = SpikeTensor::zeros(steps, shape);
    for ev in events {
        let bin = (ev.t_us / dt_us) as usize;
        if bin >= steps || ev.x >= dims.width || ev.y >= dims.height || ev.polarity > 1 {
            continue;
        }
        tensor.set(bin, usize::from(ev.polarity), usize::from(ev.y), usize::from(ev.x));
    }
    Ok(tensor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_classes: usize,
    /// Sample identifiers per class. For synthetic data these are the
    /// per-class generation indices; for SEVT data, file stems.
    pub per_class: Vec<Vec<String>>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub spikes: SpikeTensor,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    /// Consecutive chunks of `batch_size` samples; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[Sample]> {
        self.samples.chunks(batch_size.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: Shape3,
    pub steps: usize,
    /// Per-bin spike probability on a class's template pixels.
    pub rate_hi: f64,
    /// Per-bin spike probability elsewhere.
    pub rate_lo: f64,
    /// Fraction of cells belonging to each class template.
    #[serde(default = "default_mask_density")]
    pub mask_density: f64,
    pub seed: u64,
}

fn default_mask_density() -> f64 {
    0.2
}

impl SynthConfig {
    /// Ten classes on 16x16 two-polarity frames with 50 steps.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_classes: 10,
            train_per_class: 20,
            test_per_class: 5,
            shape: Shape3::new(2, 16, 16),
            steps: 50,
            rate_hi: 0.3,
            rate_lo: 0.02,
            mask_density: default_mask_density(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.rate_hi) || !unit(self.rate_lo) || self.rate_hi <= self.rate_lo {
            return Err(Error::Input(format!(
                "rates must satisfy 0 <= rate_lo < rate_hi <= 1, got lo={} hi={}",
                self.rate_lo, self.rate_hi
            )));
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return Err(Error::Input(format!(
                "mask_density {} outside (0, 1]",
                self.mask_density
            )));
        }
        if self.n_classes == 0 || self.steps == 0 || self.shape.is_empty() {
            return Err(Error::Input(
                "synthetic dataset needs classes, steps and a nonempty frame".into(),
            ));
        }
        Ok(())
    }
}

pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-class template masks, one bool per cell of a frame.
pub fn class_masks(cfg: &SynthConfig) -> Vec<Vec<bool>> {
    (0..cfg.n_classes)
        .map(|class| {
            let mut rng = rng::stream(cfg.seed, &[purpose::SYNTH_MASK, class as u64]);
            (0..cfg.shape.len())
                .map(|_| rng.random_bool(cfg.mask_density))
                .collect()
        })
        .collect()
}

fn synth_sample(cfg: &SynthConfig, mask: &[bool], class: usize, index: usize) -> SpikeTensor {
    let mut rng = rng::stream(cfg.seed, &[purpose::SYNTH_SAMPLE, class as u64, index as u64]);
    let n = cfg.shape.len();
    let mut data = vec![0u8; cfg.steps * n];
    for frame in data.chunks_exact_mut(n) {
        for (v, &on) in frame.iter_mut().zip(mask) {
            let rate = if on { cfg.rate_hi } else { cfg.rate_lo };
            *v = u8::from(rng.random::<f64>() < rate);
        }
    }
    SpikeTensor {
        t: cfg.steps,
        shape: cfg.shape,
        data,
    }
}

/// Generates a seeded synthetic dataset. Sample `k` of class `c` depends
/// only on `(seed, c, k)`; indices below `train_per_class` form the training
/// split and the rest the test split. Samples are interleaved by class.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let masks = class_masks(cfg);
    let build = |split: Split, range: std::ops::Range<usize>| {
        let mut samples = Vec::with_capacity(range.len() * cfg.n_classes);
        for k in range.clone() {
            for (class, mask) in masks.iter().enumerate() {
                samples.push(Sample {
                    spikes: synth_sample(cfg, mask, class, k),
                    label: class,
                });
            }
        }
        let per_class = (0..cfg.n_classes)
            .map(|_| range.clone().map(|k| k.to_string()).collect())
            .collect();
        Dataset {
            manifest: DatasetManifest {
                n_classes: cfg.n_classes,
                per_class,
                split,
                seed: cfg.seed,
            },
            samples,
        }
    };
    let n_train = cfg.train_per_class;
    Ok(SynthData {
        train: build(Split::Train, 0..n_train),
        test: build(Split::Test, n_train..n_train + cfg.test_per_class),
    })
}

/// Loads `root/<split>/<class>/*.sevt`, class directories being named by
/// their integer label. Files are read in name order and binned with
/// `dt_us` x `steps`.
pub fn load_sevt_split(root: &Path, split: Split, dt_us: u32, steps: usize, seed: u64) -> Result<Dataset> {
    let dir = root.join(split.as_str());
    let mut classes: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label: usize = name
            .parse()
            .map_err(|_| Error::Config(format!("class directory {} is not an integer label", path.display())))?;
        classes.push((label, path));
    }
    classes.sort();
    let n_classes = classes.last().map_or(0, |(l, _)| l + 1);
    let mut per_class = vec![Vec::new(); n_classes];
    let mut samples = Vec::new();
    let mut dims_seen: Option<SensorDims> = None;
    for (label, path) in classes {
        let mut files: Vec<_> = fs::read_dir(&path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "sevt"));
        files.sort();
        for file in files {
            let (dims, events) = read_events(fs::File::open(&file)?)?;
            match dims_seen {
                Some(d) if d != dims => {
                    return Err(Error::Config(format!(
                        "{} has sensor {}x{}, expected {}x{}",
                        file.display(),
                        dims.width,
                        dims.height,
                        d.width,
                        d.height
                    )))
                }
                _ => dims_seen = Some(dims),
            }
            per_class[label].push(file.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            samples.push(Sample {
                spikes: bin_events(&events, dims, dt_us, steps)?,
                label,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("no .sevt samples under {}", dir.display())));
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            n_classes,
            per_class,
            split,
            seed,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: SensorDims = SensorDims { width: 34, height: 34 };

    fn ev(t_us: u32, x: u16, y: u16, polarity: u8) -> EventRecord {
        EventRecord { t_us, x, y, polarity }
    }

    fn encode(events: &[EventRecord]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_events(&mut buf, DIMS, events).unwrap();
        buf
    }

    #[test]
    fn header_only_stream() {
        let buf = encode(&[]);
        assert_eq!(buf.len(), 18);
        let (dims, events) = read_events(&buf[..]).unwrap();
        assert_eq!(dims, DIMS);
        assert!(events.is_empty());
    }

    #[test]
    fn exact_layout() {
        let buf = encode(&[ev(0x0102_0304, 5, 6, 1)]);
        assert_eq!(&buf[0..4], b"SEVT");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[34, 0]);
        assert_eq!(&buf[10..18], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[18..], &[4, 3, 2, 1, 5, 0, 6, 0, 1]);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = encode(&[ev(1, 1, 1, 0)]);
        buf[0] = b'X';
        assert!(matches!(read_events(&buf[..]), Err(Error::Format(_))));
        let mut buf = encode(&[ev(1, 1, 1, 0)]);
        buf[4] = 2;
        assert!(matches!(read_events(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_body_is_format_error() {
        let buf = encode(&[ev(1, 1, 1, 0), ev(2, 2, 2, 1)]);
        assert!(matches!(read_events(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_bounds_reports_index() {
        let mut buf = encode(&[ev(1, 1, 1, 0), ev(2, 2, 2, 1)]);
        // x of the second record
        buf[18 + 13 + 4] = 40;
        match read_events(&buf[..]) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let mut buf = Vec::new();
        assert!(matches!(
            write_events(&mut buf, DIMS, &[ev(5, 0, 0, 0), ev(4, 0, 0, 0)]),
            Err(Error::Data { index: 1, .. })
        ));
    }

    #[test]
    fn binning_rules() {
        let t = bin_events(&[ev(1500, 3, 4, 1)], DIMS, 1000, 5).unwrap();
        assert_eq!(t.get(1, 1, 4, 3), 1);
        assert_eq!(t.count_ones(), 1);

        let t = bin_events(&[ev(1500, 3, 4, 1), ev(1900, 3, 4, 1)], DIMS, 1000, 5).unwrap();
        assert_eq!(t.count_ones(), 1);

        let t = bin_events(&[ev(5000, 3, 4, 1)], DIMS, 1000, 5).unwrap();
        assert_eq!(t.count_ones(), 0);

        assert!(bin_events(&[], DIMS, 0, 5).is_err());
        assert!(bin_events(&[], DIMS, 10, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_split() {
        let mut cfg = SynthConfig::desk(11);
        cfg.train_per_class = 3;
        cfg.test_per_class = 2;
        cfg.steps = 5;
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.train.len(), 30);
        assert_eq!(a.test.len(), 20);
        for (x, y) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(x.spikes, y.spikes);
            assert_eq!(x.label, y.label);
        }
        for class in 0..cfg.n_classes {
            let train = &a.train.manifest.per_class[class];
            let test = &a.test.manifest.per_class[class];
            assert!(train.iter().all(|id| !test.contains(id)));
        }
    }

    #[test]
    fn synth_degenerate_rates_reproduce_templates() {
        let mut cfg = SynthConfig::desk(2);
        cfg.rate_hi = 1.0;
        cfg.rate_lo = 0.0;
        cfg.steps = 3;
        cfg.train_per_class = 2;
        cfg.test_per_class = 0;
        let masks = class_masks(&cfg);
        let data = synth_dataset(&cfg).unwrap();
        for sample in &data.train.samples {
            for t in 0..3 {
                let frame: Vec<bool> = sample.spikes.frame(t).iter().map(|&v| v == 1).collect();
                assert_eq!(frame, masks[sample.label]);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_rates() {
        let mut cfg = SynthConfig::desk(0);
        cfg.rate_lo = 0.5;
        cfg.rate_hi = 0.4;
        assert!(matches!(synth_dataset(&cfg), Err(Error::Input(_))));
        cfg.rate_hi = 1.5;
        assert!(synth_dataset(&cfg).is_err());
    }
}
