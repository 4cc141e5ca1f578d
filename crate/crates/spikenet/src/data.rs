//! Input pipelines: static-image encoding over timesteps, event-stream
//! ingestion with temporal slicing and block downsampling, the binary event
//! file format, and deterministic synthetic datasets.
//!
//! Event file layout (little-endian): magic `EVS1`, `u32` version = 1,
//! `u16` height, `u16` width, `u32` event count, then one 10-byte record per
//! event: `{u32 t_us, u16 x, u16 y, u8 polarity, u8 pad}`. Dataset manifests
//! are plain text, one `relative/path<TAB>label` line per item.

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One sensor event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

/// A timestamped event recording with sensor geometry and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    /// Sorted by timestamp, non-decreasing.
    pub events: Vec<Event>,
    pub height: u16,
    pub width: u16,
    pub label: usize,
}

impl EventStream {
    /// Validate coordinates/polarity and sort by timestamp.
    pub fn finalize(mut self) -> Result<Self> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::Data(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.polarity > 1 {
                return Err(Error::Data(format!(
                    "event {i} has polarity {}, expected 0 or 1",
                    e.polarity
                )));
            }
        }
        self.events.sort_by_key(|e| e.t_us);
        Ok(self)
    }
}

/// A single static image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// Replicate a static image at every timestep: `X[t] = image` for all `t`.
/// The first convolution acts as the rate encoder downstream.
pub fn encode_static(image: &Image, timesteps: usize) -> Tensor5 {
    assert!(timesteps >= 1);
    let shape = Shape5::new(timesteps, 1, image.c, image.h, image.w);
    let mut out = Tensor5::zeros(shape);
    let n = image.data.len();
    for t in 0..timesteps {
        out.data_mut()[t * n..(t + 1) * n].copy_from_slice(&image.data);
    }
    out
}

/// Slice an event stream into `T` count frames of `slice_ms` each, binned to
/// `target` dims by integer block summation, one channel per polarity.
/// Events at or beyond `T * slice_ms` are dropped.
pub fn events_to_frames(
    stream: &EventStream,
    timesteps: usize,
    slice_ms: f64,
    target: (usize, usize),
) -> Result<Tensor5> {
    if timesteps < 1 {
        return Err(Error::Config("timesteps must be >= 1".into()));
    }
    if !(slice_ms > 0.0) {
        return Err(Error::Config(format!(
            "slice length must be positive, got {slice_ms}"
        )));
    }
    let (th, tw) = target;
    let (sh, sw) = (stream.height as usize, stream.width as usize);
    if th == 0 || tw == 0 || sh % th != 0 || sw % tw != 0 {
        return Err(Error::Dim(format!(
            "target {th}x{tw} must divide the {sh}x{sw} sensor for block downsampling"
        )));
    }
    let (fh, fw) = (sh / th, sw / tw);
    let mut out = Tensor5::zeros(Shape5::new(timesteps, 1, 2, th, tw));
    for (i, e) in stream.events.iter().enumerate() {
        if e.x >= stream.width || e.y >= stream.height {
            return Err(Error::Data(format!(
                "event {i} at ({}, {}) outside {}x{} sensor",
                e.x, e.y, stream.width, stream.height
            )));
        }
        if e.polarity > 1 {
            return Err(Error::Data(format!(
                "event {i} has polarity {}",
                e.polarity
            )));
        }
        let slot = (e.t_us as f64 / 1000.0 / slice_ms).floor();
        if slot < 0.0 || slot >= timesteps as f64 {
            continue;
        }
        let t = slot as usize;
        let h = e.y as usize / fh;
        let w = e.x as usize / fw;
        *out.at_mut(t, 0, e.polarity as usize, h, w) += 1.0;
    }
    Ok(out)
}

const EVENT_MAGIC: &[u8; 4] = b"EVS1";
const EVENT_VERSION: u32 = 1;
const EVENT_RECORD_BYTES: usize = 10;

/// Serialize a stream in the documented little-endian layout.
pub fn save_event_file(stream: &EventStream, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + stream.events.len() * EVENT_RECORD_BYTES);
    buf.extend_from_slice(EVENT_MAGIC);
    buf.extend_from_slice(&EVENT_VERSION.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&(stream.events.len() as u32).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t_us.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.polarity);
        buf.push(0);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!(
                    "unexpected end of file while reading {what} (needed {n} bytes at offset {})",
                    self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse, validate, and sort an event file. The label is not part of the
/// file; manifests assign it.
pub fn load_event_file(path: &Path) -> Result<EventStream> {
    let bytes = std::fs::read(path)?;
    parse_event_bytes(&bytes)
}

fn parse_event_bytes(bytes: &[u8]) -> Result<EventStream> {
    let mut r = ByteReader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != EVENT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected \"EVS1\""),
        });
    }
    let version = r.u32("version")?;
    if version != EVENT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let height = r.u16("height")?;
    let width = r.u16("width")?;
    let count = r.u32("event count")? as usize;
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let rec = r.take(EVENT_RECORD_BYTES, &format!("event record {i}"))?;
        events.push(Event {
            t_us: u32::from_le_bytes(rec[0..4].try_into().unwrap()),
            x: u16::from_le_bytes(rec[4..6].try_into().unwrap()),
            y: u16::from_le_bytes(rec[6..8].try_into().unwrap()),
            polarity: rec[8],
        });
    }
    EventStream {
        events,
        height,
        width,
        label: 0,
    }
    .finalize()
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// How items are realized into network input tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Static,
    Events,
}

/// Summary of a dataset: where it came from and what it holds.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub items: usize,
    pub classes: usize,
    pub encoding: Encoding,
}

/// One labelled item.
#[derive(Debug, Clone)]
pub enum Item {
    Static { image: Image, label: usize },
    Events(EventStream),
}

impl Item {
    pub fn label(&self) -> usize {
        match self {
            Item::Static { label, .. } => *label,
            Item::Events(s) => s.label,
        }
    }
}

/// A loaded dataset: manifest plus in-memory items.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Channel count the network input will carry.
    pub fn input_channels(&self) -> usize {
        match self.items.first() {
            Some(Item::Static { image, .. }) => image.c,
            Some(Item::Events(_)) => 2,
            None => 0,
        }
    }

    /// Spatial size of realized inputs, given the event downsampling target.
    pub fn input_hw(&self, event_target: (usize, usize)) -> usize {
        match self.items.first() {
            Some(Item::Static { image, .. }) => image.h,
            Some(Item::Events(_)) => event_target.0,
            None => 0,
        }
    }
}

/// Turn one item into a `[T, 1, C, H, W]` input tensor plus its label.
pub fn realize_item(
    item: &Item,
    timesteps: usize,
    slice_ms: f64,
    event_target: (usize, usize),
) -> Result<(Tensor5, usize)> {
    match item {
        Item::Static { image, label } => Ok((encode_static(image, timesteps), *label)),
        Item::Events(stream) => Ok((
            events_to_frames(stream, timesteps, slice_ms, event_target)?,
            stream.label,
        )),
    }
}

/// Stack per-item `[T, 1, C, H, W]` tensors into one `[T, B, C, H, W]` batch.
pub fn stack_batch(items: &[Tensor5]) -> Result<Tensor5> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let s = first.shape();
    let b = items.len();
    let mut out = Tensor5::zeros(Shape5::new(s.t, b, s.c, s.h, s.w));
    for (n, item) in items.iter().enumerate() {
        if item.shape() != s {
            return Err(Error::Dim(format!(
                "batch item {n} has shape {}, expected {}",
                item.shape(),
                s
            )));
        }
        for t in 0..s.t {
            out.feature_mut(t, n).copy_from_slice(item.feature(t, 0));
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation over every static image.
pub fn channel_stats(items: &[Item]) -> (Vec<f32>, Vec<f32>) {
    let c = match items.first() {
        Some(Item::Static { image, .. }) => image.c,
        _ => return (Vec::new(), Vec::new()),
    };
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = vec![0u64; c];
    for item in items {
        if let Item::Static { image, .. } = item {
            let plane = image.h * image.w;
            for ch in 0..c {
                for &v in &image.data[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                    count[ch] += 1;
                }
            }
        }
    }
    let mut means = vec![0.0f32; c];
    let mut stds = vec![1.0f32; c];
    for ch in 0..c {
        if count[ch] == 0 {
            continue;
        }
        let m = sum[ch] / count[ch] as f64;
        let var = (sq[ch] / count[ch] as f64 - m * m).max(0.0);
        means[ch] = m as f32;
        stds[ch] = (var.sqrt() as f32).max(1e-6);
    }
    (means, stds)
}

/// Subtract per-channel means and divide by per-channel stds in place.
pub fn apply_channel_norm(items: &mut [Item], means: &[f32], stds: &[f32]) {
    for item in items {
        if let Item::Static { image, .. } = item {
            let plane = image.h * image.w;
            for ch in 0..image.c {
                let (m, s) = (means[ch], stds[ch]);
                for v in &mut image.data[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Random horizontal flip plus a one-pixel random shift with zero padding.
pub fn augment_static(image: &Image, rng: &mut ChaCha8Rng) -> Image {
    let mut out = image.clone();
    let flip = rng.random::<bool>();
    let dx = rng.random_range(-1i32..=1) as isize;
    let dy = rng.random_range(-1i32..=1) as isize;
    let plane = image.h * image.w;
    for ch in 0..image.c {
        for y in 0..image.h {
            for x in 0..image.w {
                let sx = if flip { image.w - 1 - x } else { x } as isize - dx;
                let sy = y as isize - dy;
                let v = if sx >= 0 && sx < image.w as isize && sy >= 0 && sy < image.h as isize {
                    image.data[ch * plane + sy as usize * image.w + sx as usize]
                } else {
                    0.0
                };
                out.data[ch * plane + y * image.w + x] = v;
            }
        }
    }
    out
}

/// Synthetic dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Two well-separated Gaussian blobs in pixel space; linearly separable.
    TwoGaussians,
    /// Class is the XOR of two patch signs; not linearly separable.
    XorPatches,
    /// Event streams of a wrapping vertical bar; class is the direction of
    /// motion, and any single frame is class-ambiguous by construction.
    MovingBar,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(ToyKind::TwoGaussians),
            "xor_patches" => Ok(ToyKind::XorPatches),
            "moving_bar" => Ok(ToyKind::MovingBar),
            other => Err(Error::Config(format!(
                "unknown toy dataset {other:?}; expected two_gaussians, xor_patches, or moving_bar"
            ))),
        }
    }
}

pub const TOY_IMAGE_HW: usize = 8;
pub const MOVING_BAR_HW: usize = 8;
pub const MOVING_BAR_SLICE_MS: f64 = 30.0;
pub const MOVING_BAR_SLICES: usize = 8;

/// Normal sample truncated to `limit` standard deviations, by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f32, limit: f32) -> f32 {
    let dist = Normal::new(0.0, std as f64).unwrap();
    loop {
        let v = dist.sample(rng) as f32;
        if v.abs() < limit * std {
            return v;
        }
    }
}

/// Build a deterministic synthetic dataset with `n_per_class` items per class.
pub fn make_toy_dataset(kind: ToyKind, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class < 2 {
        return Err(Error::Config(format!(
            "toy datasets need at least 2 items per class, got {n_per_class}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = TOY_IMAGE_HW;
    let mut items = Vec::with_capacity(2 * n_per_class);
    match kind {
        ToyKind::TwoGaussians => {
            // class means +/- 0.5 per pixel with sigma 0.25 truncated at 1.9
            // sigma: 4-sigma mean separation, separable by construction
            for idx in 0..2 * n_per_class {
                let label = idx % 2;
                let mean = if label == 0 { -0.5f32 } else { 0.5 };
                let data = (0..hw * hw)
                    .map(|_| mean + truncated_normal(&mut rng, 0.25, 1.9))
                    .collect();
                items.push(Item::Static {
                    image: Image {
                        c: 1,
                        h: hw,
                        w: hw,
                        data,
                    },
                    label,
                });
            }
        }
        ToyKind::XorPatches => {
            // left/right halves carry signs s1, s2; label = s1 XOR s2, so
            // class means coincide and no linear readout separates them
            for idx in 0..2 * n_per_class {
                let label = idx % 2;
                let s1 = if rng.random::<bool>() { 1.0f32 } else { -1.0 };
                let s2 = if label == 1 { -s1 } else { s1 };
                let mut data = vec![0.0f32; hw * hw];
                for y in 0..hw {
                    for x in 0..hw {
                        let sign = if x < hw / 2 { s1 } else { s2 };
                        data[y * hw + x] = sign * 0.5 + truncated_normal(&mut rng, 0.15, 1.9);
                    }
                }
                items.push(Item::Static {
                    image: Image {
                        c: 1,
                        h: hw,
                        w: hw,
                        data,
                    },
                    label,
                });
            }
        }
        ToyKind::MovingBar => {
            for idx in 0..2 * n_per_class {
                let label = idx % 2;
                items.push(Item::Events(moving_bar_stream(&mut rng, label)));
            }
        }
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("(generated)"),
        split: Split::Train,
        items: items.len(),
        classes: 2,
        encoding: if kind == ToyKind::MovingBar {
            Encoding::Events
        } else {
            Encoding::Static
        },
    };
    Ok(Dataset { manifest, items })
}

/// A vertical bar sweeping one column per slice, wrapping at the edges.
/// Class 0 moves right, class 1 moves left; the starting column is uniform,
/// so the bar-position distribution of any single slice is identical for
/// both classes.
fn moving_bar_stream(rng: &mut ChaCha8Rng, label: usize) -> EventStream {
    let hw = MOVING_BAR_HW;
    let start = rng.random_range(0..hw) as isize;
    let dir: isize = if label == 0 { 1 } else { -1 };
    let mut events = Vec::new();
    for slice in 0..MOVING_BAR_SLICES {
        let col = (start + dir * slice as isize).rem_euclid(hw as isize) as u16;
        let base_us = (slice as f64 * MOVING_BAR_SLICE_MS * 1000.0) as u32;
        for y in 0..hw as u16 {
            for &frac in &[8u32, 15, 22] {
                events.push(Event {
                    t_us: base_us + frac * 1000,
                    x: col,
                    y,
                    polarity: 1,
                });
            }
        }
    }
    EventStream {
        events,
        height: hw as u16,
        width: hw as u16,
        label,
    }
    .finalize()
    .expect("generated events are in range")
}

/// Read a manifest of event files: one `relative/path<TAB>label` line each.
pub fn load_manifest(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut items = Vec::new();
    let mut classes = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, label) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected \"relative/path<TAB>label\"",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Data(format!(
                "{}:{}: label {label:?} is not an integer",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let mut stream = load_event_file(&root.join(rel))?;
        stream.label = label;
        classes = classes.max(label + 1);
        items.push(Item::Events(stream));
    }
    if items.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} lists no items",
            manifest_path.display()
        )));
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root,
            split,
            items: items.len(),
            classes,
            encoding: Encoding::Events,
        },
        items,
    })
}

/// Write a dataset of event streams as files plus a manifest; returns the
/// manifest path.
pub fn save_event_dataset(dataset: &Dataset, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for (i, item) in dataset.items.iter().enumerate() {
        match item {
            Item::Events(stream) => {
                let file = format!("{name}_{i:04}.evs");
                save_event_file(stream, &dir.join(&file))?;
                lines.push_str(&format!("{file}\t{}\n", stream.label));
            }
            Item::Static { .. } => {
                return Err(Error::Data(
                    "only event datasets can be saved to manifests".into(),
                ))
            }
        }
    }
    let manifest = dir.join(format!("{name}.txt"));
    std::fs::write(&manifest, lines)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(vals: &[f32], hw: usize) -> Image {
        Image {
            c: 1,
            h: hw,
            w: hw,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn static_encoding_replicates_timesteps() {
        let img = image(&[1.0, 2.0, 3.0, 4.0], 2);
        let one = encode_static(&img, 1);
        assert_eq!(one.shape(), Shape5::new(1, 1, 1, 2, 2));
        assert_eq!(one.data(), img.data.as_slice());

        let four = encode_static(&img, 4);
        for t in 0..4 {
            assert_eq!(four.feature(t, 0), img.data.as_slice());
        }
    }

    #[test]
    fn slicing_places_events_in_their_windows() {
        let stream = EventStream {
            events: vec![
                Event { t_us: 0, x: 0, y: 0, polarity: 1 },
                Event { t_us: 31_000, x: 0, y: 0, polarity: 1 },
                Event { t_us: 65_000, x: 0, y: 0, polarity: 1 },
            ],
            height: 2,
            width: 2,
            label: 0,
        };
        let frames = events_to_frames(&stream, 3, 30.0, (2, 2)).unwrap();
        for t in 0..3 {
            let occupancy: f32 = (0..2)
                .flat_map(|c| (0..2).flat_map(move |h| (0..2).map(move |w| (c, h, w))))
                .map(|(c, h, w)| frames.at(t, 0, c, h, w))
                .sum();
            assert_eq!(occupancy, 1.0, "slice {t}");
        }
    }

    #[test]
    fn forty_slices_cover_twelve_hundred_ms() {
        // 1200 ms at 30 ms per slice is exactly 40 frames; an event at
        // 1199.9 ms lands in the last one, an event at 1200 ms is dropped
        let stream = EventStream {
            events: vec![
                Event { t_us: 1_199_900, x: 0, y: 0, polarity: 0 },
                Event { t_us: 1_200_000, x: 0, y: 0, polarity: 0 },
            ],
            height: 1,
            width: 1,
            label: 0,
        };
        let frames = events_to_frames(&stream, 40, 30.0, (1, 1)).unwrap();
        let total: f32 = frames.data().iter().sum();
        assert_eq!(total, 1.0);
        assert_eq!(frames.at(39, 0, 0, 0, 0), 1.0);
    }

    #[test]
    fn block_downsampling_uses_floor_division() {
        let stream = EventStream {
            events: vec![Event { t_us: 0, x: 5, y: 9, polarity: 1 }],
            height: 128,
            width: 128,
            label: 0,
        };
        let frames = events_to_frames(&stream, 1, 30.0, (32, 32)).unwrap();
        // (x=5, y=9) with factor 4 lands in column 1, row 2
        assert_eq!(frames.at(0, 0, 1, 2, 1), 1.0);
        let total: f32 = frames.data().iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn event_count_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let events: Vec<Event> = (0..500)
            .map(|_| Event {
                t_us: rng.random_range(0..400_000),
                x: rng.random_range(0..16),
                y: rng.random_range(0..16),
                polarity: rng.random_range(0..2) as u8,
            })
            .collect();
        let in_window = events.iter().filter(|e| e.t_us < 300_000).count();
        let stream = EventStream {
            events,
            height: 16,
            width: 16,
            label: 0,
        }
        .finalize()
        .unwrap();
        let frames = events_to_frames(&stream, 10, 30.0, (4, 4)).unwrap();
        let total: f32 = frames.data().iter().sum();
        assert_eq!(total, in_window as f32);
    }

    #[test]
    fn empty_stream_is_valid_and_all_zero() {
        let stream = EventStream {
            events: vec![],
            height: 4,
            width: 4,
            label: 0,
        };
        let frames = events_to_frames(&stream, 3, 10.0, (4, 4)).unwrap();
        assert!(frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_coordinates_are_a_data_error() {
        let stream = EventStream {
            events: vec![Event { t_us: 0, x: 4, y: 0, polarity: 1 }],
            height: 4,
            width: 4,
            label: 0,
        };
        assert!(matches!(
            events_to_frames(&stream, 1, 10.0, (4, 4)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn golden_event_file_parses_exactly() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EVS1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes()); // height
        bytes.extend_from_slice(&4u16.to_le_bytes()); // width
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for (t, x, y, p) in [(100u32, 1u16, 2u16, 1u8), (500, 3, 0, 0), (1000, 0, 3, 1)] {
            bytes.extend_from_slice(&t.to_le_bytes());
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.push(p);
            bytes.push(0);
        }
        let stream = parse_event_bytes(&bytes).unwrap();
        assert_eq!(stream.height, 4);
        assert_eq!(stream.width, 4);
        assert_eq!(
            stream.events,
            vec![
                Event { t_us: 100, x: 1, y: 2, polarity: 1 },
                Event { t_us: 500, x: 3, y: 0, polarity: 0 },
                Event { t_us: 1000, x: 0, y: 3, polarity: 1 },
            ]
        );
    }

    #[test]
    fn event_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.evs");
        let stream = EventStream {
            events: vec![
                Event { t_us: 7, x: 1, y: 0, polarity: 0 },
                Event { t_us: 9, x: 0, y: 1, polarity: 1 },
            ],
            height: 2,
            width: 2,
            label: 0,
        };
        save_event_file(&stream, &path).unwrap();
        let loaded = load_event_file(&path).unwrap();
        assert_eq!(loaded, stream);
    }

    #[test]
    fn empty_payload_is_a_valid_stream() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EVS1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let stream = parse_event_bytes(&bytes).unwrap();
        assert!(stream.events.is_empty());
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let err = parse_event_bytes(b"NOPE").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other}"),
        }

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EVS1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes()); // promises 5 events
        bytes.extend_from_slice(&[0u8; 10]); // delivers 1
        let err = parse_event_bytes(&bytes).unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(msg.contains("event record"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn two_gaussians_are_separable_by_mean_pixel() {
        let ds = make_toy_dataset(ToyKind::TwoGaussians, 32, 9).unwrap();
        for item in &ds.items {
            if let Item::Static { image, label } = item {
                let mean: f32 = image.data.iter().sum::<f32>() / image.data.len() as f32;
                let predicted = if mean > 0.0 { 1 } else { 0 };
                assert_eq!(predicted, *label);
            }
        }
    }

    #[test]
    fn toy_datasets_are_deterministic_in_seed() {
        for kind in [ToyKind::TwoGaussians, ToyKind::XorPatches, ToyKind::MovingBar] {
            let a = make_toy_dataset(kind, 4, 77).unwrap();
            let b = make_toy_dataset(kind, 4, 77).unwrap();
            for (x, y) in a.items.iter().zip(&b.items) {
                match (x, y) {
                    (
                        Item::Static { image: ia, label: la },
                        Item::Static { image: ib, label: lb },
                    ) => {
                        assert_eq!(la, lb);
                        assert_eq!(ia.data, ib.data);
                    }
                    (Item::Events(sa), Item::Events(sb)) => assert_eq!(sa, sb),
                    _ => panic!("mismatched kinds"),
                }
            }
        }
    }

    #[test]
    fn xor_patch_class_means_coincide() {
        let ds = make_toy_dataset(ToyKind::XorPatches, 64, 3).unwrap();
        let mut mean = [0.0f64; 2];
        let mut count = [0usize; 2];
        for item in &ds.items {
            if let Item::Static { image, label } = item {
                mean[*label] += image.data.iter().map(|&v| v as f64).sum::<f64>();
                count[*label] += image.data.len();
            }
        }
        let m0 = mean[0] / count[0] as f64;
        let m1 = mean[1] / count[1] as f64;
        assert!((m0 - m1).abs() < 0.1, "class means {m0} vs {m1} leak label");
    }

    #[test]
    fn moving_bar_single_frames_are_ambiguous() {
        // nearest-centroid classification of individual frames stays at
        // chance: the construction makes per-frame distributions identical
        let train = make_toy_dataset(ToyKind::MovingBar, 48, 21).unwrap();
        let test = make_toy_dataset(ToyKind::MovingBar, 24, 22).unwrap();
        let frame_of = |item: &Item, t: usize| -> Vec<f32> {
            match item {
                Item::Events(s) => {
                    let frames = events_to_frames(
                        s,
                        MOVING_BAR_SLICES,
                        MOVING_BAR_SLICE_MS,
                        (MOVING_BAR_HW, MOVING_BAR_HW),
                    )
                    .unwrap();
                    frames.feature(t, 0).to_vec()
                }
                _ => unreachable!(),
            }
        };
        let dim = 2 * MOVING_BAR_HW * MOVING_BAR_HW;
        let mut centroid = vec![vec![0.0f64; dim]; 2];
        let mut counts = [0usize; 2];
        for item in &train.items {
            for t in 0..MOVING_BAR_SLICES {
                let f = frame_of(item, t);
                for (acc, v) in centroid[item.label()].iter_mut().zip(&f) {
                    *acc += *v as f64;
                }
            }
            counts[item.label()] += MOVING_BAR_SLICES;
        }
        for (c, n) in centroid.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for item in &test.items {
            for t in 0..MOVING_BAR_SLICES {
                let f = frame_of(item, t);
                let dist = |c: &[f64]| -> f64 {
                    f.iter()
                        .zip(c)
                        .map(|(&v, &m)| (v as f64 - m).powi(2))
                        .sum()
                };
                let pred = if dist(&centroid[0]) <= dist(&centroid[1]) { 0 } else { 1 };
                correct += usize::from(pred == item.label());
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc < 0.6, "per-frame accuracy {acc} should be near chance");
    }

    #[test]
    fn manifest_round_trip_and_empty_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_toy_dataset(ToyKind::MovingBar, 2, 1).unwrap();
        let manifest = save_event_dataset(&ds, dir.path(), "bars").unwrap();
        let loaded = load_manifest(&manifest, Split::Train).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.manifest.classes, 2);
        for (a, b) in loaded.items.iter().zip(&ds.items) {
            match (a, b) {
                (Item::Events(x), Item::Events(y)) => assert_eq!(x, y),
                _ => panic!("expected events"),
            }
        }

        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_manifest(&empty, Split::Train),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stacking_builds_batches() {
        let a = encode_static(&image(&[1.0; 4], 2), 3);
        let b = encode_static(&image(&[2.0; 4], 2), 3);
        let batch = stack_batch(&[a, b]).unwrap();
        assert_eq!(batch.shape(), Shape5::new(3, 2, 1, 2, 2));
        assert_eq!(batch.at(1, 0, 0, 0, 0), 1.0);
        assert_eq!(batch.at(1, 1, 0, 0, 0), 2.0);
    }

    #[test]
    fn channel_normalization_zeroes_means() {
        let mut ds = make_toy_dataset(ToyKind::TwoGaussians, 16, 2).unwrap();
        let (means, stds) = channel_stats(&ds.items);
        apply_channel_norm(&mut ds.items, &means, &stds);
        let (m2, s2) = channel_stats(&ds.items);
        assert!(m2[0].abs() < 1e-5);
        assert!((s2[0] - 1.0).abs() < 1e-4);
    }
}
