//! Datasets, the `TDN1` file format and the planted-structure generator.
//!
//! `TDN1` layout (u32 and f32, little-endian):
//!
//! ```text
//! "TDN1" · C · m · V · V × ( N · L · L label ids · N·m f32 features, row-major )
//! ```
//!
//! Features are held as `f64` in memory but every value must be exactly
//! representable as `f32`; the generator rounds accordingly, so a dataset
//! survives a save/load cycle bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdnError};
use crate::linalg::{dot, Matrix};

pub const MAGIC: &[u8; 4] = b"TDN1";
/// One frame per second over the first six minutes.
pub const MAX_FRAMES: usize = 360;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `N × m` frame features.
    pub features: Matrix,
    /// Sorted, unique label ids.
    pub labels: Vec<u32>,
}

impl VideoSample {
    pub fn new(features: Matrix, mut labels: Vec<u32>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        VideoSample { features, labels }
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Label vocabulary size `C`.
    pub num_labels: usize,
    /// Feature dimension `m`.
    pub dim: usize,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (idx, s) in self.samples.iter().enumerate() {
            let n = s.frames();
            if n == 0 || n > MAX_FRAMES {
                return Err(TdnError::validation(format!(
                    "video {idx} has {n} frames, expected 1..={MAX_FRAMES}"
                )));
            }
            if s.features.cols() != self.dim {
                return Err(TdnError::validation(format!(
                    "video {idx} has feature dim {}, dataset declares {}",
                    s.features.cols(),
                    self.dim
                )));
            }
            if let Some(l) = s.labels.iter().find(|&&l| l as usize >= self.num_labels) {
                return Err(TdnError::validation(format!(
                    "video {idx} has label {l} outside vocabulary of {}",
                    self.num_labels
                )));
            }
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| TdnError::validation(format!("{what} {v} exceeds u32")))
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (v, what) in [
        (dataset.num_labels, "label count"),
        (dataset.dim, "feature dim"),
        (dataset.len(), "video count"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for s in &dataset.samples {
        out.extend_from_slice(&to_u32(s.frames(), "frame count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(s.labels.len(), "label list")?.to_le_bytes());
        for l in &s.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for &v in s.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .offset
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TdnError::format(self.offset, format!("truncated while reading {what}")))?;
        let slice = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TdnError::format(0, "missing TDN1 magic"));
    }
    let num_labels = r.u32("label count")? as usize;
    let dim_offset = r.offset;
    let dim = r.u32("feature dim")? as usize;
    if dim == 0 {
        return Err(TdnError::format(dim_offset, "feature dim must be positive"));
    }
    let videos = r.u32("video count")? as usize;
    let mut samples = Vec::new();
    for idx in 0..videos {
        let at = r.offset;
        let n = r.u32("frame count")? as usize;
        if n == 0 || n > MAX_FRAMES {
            return Err(TdnError::format(at, format!("video {idx} has {n} frames, expected 1..={MAX_FRAMES}")));
        }
        let label_count = r.u32("label list length")? as usize;
        let mut labels = Vec::with_capacity(label_count.min(num_labels));
        for _ in 0..label_count {
            let at = r.offset;
            let l = r.u32("label id")?;
            if l as usize >= num_labels {
                return Err(TdnError::format(at, format!("label {l} outside vocabulary of {num_labels}")));
            }
            labels.push(l);
        }
        let count = n * dim;
        let feature_start = r.offset;
        let raw = r.take(count * 4, "features")?;
        let features: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(TdnError::format(feature_start + 4 * pos, "non-finite feature"));
        }
        samples.push(VideoSample::new(Matrix::from_vec(n, dim, features)?, labels));
    }
    if r.offset != bytes.len() {
        return Err(TdnError::format(r.offset, "trailing bytes after last video"));
    }
    Ok(Dataset {
        num_labels,
        dim,
        samples,
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub videos: usize,
    pub m: usize,
    pub num_prototypes: usize,
    pub events_per_video: Span,
    pub event_length: Span,
    pub noise_sigma: f64,
    /// Prototype pairs `(p, q)`: `q` is redrawn correlated with `p` and some
    /// videos are forced to contain events of both.
    pub correlated_pairs: Vec<(u32, u32)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            videos: 50,
            m: 32,
            num_prototypes: 6,
            events_per_video: Span::new(2, 4),
            event_length: Span::new(5, 20),
            noise_sigma: 0.1,
            correlated_pairs: vec![(0, 1), (2, 3)],
            seed: 7,
        }
    }
}

/// Cosine similarity between a prototype and its correlated partner.
pub const PAIR_CORRELATION: f64 = 0.6;
/// Share of multi-event videos that are forced to contain a correlated pair.
pub const PAIR_VIDEO_RATE: f64 = 0.5;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(TdnError::validation(msg));
        if self.videos == 0 {
            return err("at least one video is required".into());
        }
        if self.m == 0 {
            return err("feature dim must be positive".into());
        }
        if self.num_prototypes < 2 {
            return err(format!("need at least 2 prototypes, got {}", self.num_prototypes));
        }
        let (e, l) = (self.events_per_video, self.event_length);
        if e.min == 0 || e.min > e.max {
            return err(format!("events per video {}..={} is empty or starts at 0", e.min, e.max));
        }
        if l.min == 0 || l.min > l.max {
            return err(format!("event length {}..={} is empty or starts at 0", l.min, l.max));
        }
        if e.max * l.max > MAX_FRAMES {
            return err(format!(
                "videos may reach {} frames, above the {MAX_FRAMES}-frame limit",
                e.max * l.max
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise sigma must be a finite non-negative number, got {}", self.noise_sigma));
        }
        for &(p, q) in &self.correlated_pairs {
            if p == q || p as usize >= self.num_prototypes || q as usize >= self.num_prototypes {
                return err(format!("correlated pair ({p}, {q}) is invalid for {} prototypes", self.num_prototypes));
            }
        }
        Ok(())
    }
}

/// Ground truth segmentation for one generated video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    /// Event index of each frame; events are contiguous and numbered from 0.
    pub frame_events: Vec<u32>,
    /// Prototype id of each event.
    pub event_prototypes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnnotation {
    pub videos: Vec<VideoAnnotation>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Picks a prototype different from `left` and, when possible, from `right`.
fn pick_prototype<R: Rng>(rng: &mut R, count: usize, left: Option<u32>, right: Option<u32>) -> u32 {
    let strict: Vec<u32> = (0..count as u32)
        .filter(|&p| Some(p) != left && Some(p) != right)
        .collect();
    if let Some(&p) = strict.choose(rng) {
        return p;
    }
    let loose: Vec<u32> = (0..count as u32).filter(|&p| Some(p) != left).collect();
    *loose.choose(rng).expect("at least two prototypes")
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Dataset, PlantedAnnotation)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.m;
    let mut prototypes: Vec<Vec<f64>> = (0..cfg.num_prototypes)
        .map(|_| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let keep = (1.0 - PAIR_CORRELATION * PAIR_CORRELATION).sqrt();
    for &(p, q) in &cfg.correlated_pairs {
        let base = prototypes[p as usize].clone();
        for (dst, b) in prototypes[q as usize].iter_mut().zip(base) {
            *dst = PAIR_CORRELATION * b + keep * *dst;
        }
    }

    let mut samples = Vec::with_capacity(cfg.videos);
    let mut annotations = Vec::with_capacity(cfg.videos);
    for _ in 0..cfg.videos {
        let events = rng.gen_range(cfg.events_per_video.min..=cfg.events_per_video.max);
        let mut assigned: Vec<Option<u32>> = vec![None; events];
        if events >= 2 && !cfg.correlated_pairs.is_empty() && rng.gen_bool(PAIR_VIDEO_RATE) {
            let &(p, q) = cfg.correlated_pairs.choose(&mut rng).expect("non-empty");
            let first = rng.gen_range(0..events);
            let mut second = rng.gen_range(0..events - 1);
            if second >= first {
                second += 1;
            }
            assigned[first] = Some(p);
            assigned[second] = Some(q);
        }
        let mut event_prototypes = Vec::with_capacity(events);
        for e in 0..events {
            let proto = match assigned[e] {
                Some(p) => p,
                None => {
                    let left = event_prototypes.last().copied();
                    let right = assigned.get(e + 1).copied().flatten();
                    pick_prototype(&mut rng, cfg.num_prototypes, left, right)
                }
            };
            event_prototypes.push(proto);
        }

        let mut data = Vec::new();
        let mut frame_events = Vec::new();
        for (e, &proto) in event_prototypes.iter().enumerate() {
            let len = rng.gen_range(cfg.event_length.min..=cfg.event_length.max);
            for _ in 0..len {
                for &base in &prototypes[proto as usize] {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push(round_f32(base + cfg.noise_sigma * noise));
                }
                frame_events.push(e as u32);
            }
        }
        let n = frame_events.len();
        samples.push(VideoSample::new(Matrix::from_vec(n, m, data)?, event_prototypes.clone()));
        annotations.push(VideoAnnotation {
            frame_events,
            event_prototypes,
        });
    }
    Ok((
        Dataset {
            num_labels: cfg.num_prototypes,
            dim: m,
            samples,
        },
        PlantedAnnotation { videos: annotations },
    ))
}

/// Ratio of the mean off-diagonal weight inside events to the mean weight
/// between events. Returns `+∞` when no weight crosses events.
pub fn block_contrast(adjacency: &Matrix, frame_events: &[u32]) -> Result<f64> {
    let n = adjacency.rows();
    if adjacency.cols() != n || frame_events.len() != n {
        return Err(TdnError::shape("block_contrast", adjacency.shape(), (frame_events.len(), frame_events.len())));
    }
    let (mut intra, mut intra_count, mut inter, mut inter_count) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if frame_events[i] == frame_events[j] {
                intra += adjacency.get(i, j);
                intra_count += 1;
            } else {
                inter += adjacency.get(i, j);
                inter_count += 1;
            }
        }
    }
    if inter_count == 0 {
        return Err(TdnError::validation("block contrast needs at least two events"));
    }
    let intra_mean = if intra_count == 0 { 0.0 } else { intra / intra_count as f64 };
    let inter_mean = inter / inter_count as f64;
    if inter_mean == 0.0 {
        return Ok(if intra_mean > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(intra_mean / inter_mean)
}

/// Mean cosine similarity of frame pairs within the same event and across
/// events, pooled over all videos.
pub fn cosine_separation(dataset: &Dataset, annotation: &PlantedAnnotation) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (sample, ann) in dataset.samples.iter().zip(&annotation.videos) {
        let x = &sample.features;
        let norms: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), x.row(i)).sqrt()).collect();
        for i in 0..x.rows() {
            for j in (i + 1)..x.rows() {
                let c = dot(x.row(i), x.row(j)) / (norms[i] * norms[j]).max(1e-300);
                if ann.frame_events[i] == ann.frame_events[j] {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            videos: 6,
            m: 4,
            num_prototypes: 3,
            events_per_video: Span::new(1, 3),
            event_length: Span::new(1, 4),
            noise_sigma: 0.2,
            correlated_pairs: vec![(0, 2)],
            seed: 11,
        }
    }

    #[test]
    fn byte_length_of_tiny_file() {
        let ds = Dataset {
            num_labels: 3,
            dim: 2,
            samples: vec![VideoSample::new(Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]), vec![0, 2])],
        };
        let bytes = encode_dataset(&ds).unwrap();
        // header 16 + (N, L) 8 + two labels 8 + four f32 16
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[..4], b"TDN1");
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn load_rejects_bad_files() {
        let (ds, _) = gen_synthetic(&small_config()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();

        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode_dataset(&bad), Err(TdnError::Format { offset: 0, .. })));

        for cut in [3, 10, 17, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(TdnError::Format { .. })), "cut {cut}");
        }

        // First label id of the first video lives at byte 24.
        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(TdnError::Format { offset: 24, .. })));

        let mut long = bytes;
        long.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_dataset(&long), Err(TdnError::Format { .. })));
    }

    #[test]
    fn noiseless_events_are_constant() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small_config()
        };
        let (ds, ann) = gen_synthetic(&cfg).unwrap();
        for (s, a) in ds.samples.iter().zip(&ann.videos) {
            for i in 1..s.frames() {
                if a.frame_events[i] == a.frame_events[i - 1] {
                    assert_eq!(s.features.row(i), s.features.row(i - 1));
                }
            }
        }
    }

    #[test]
    fn generator_is_deterministic_and_tiles_videos() {
        let cfg = SynthConfig::default();
        let (a, ann_a) = gen_synthetic(&cfg).unwrap();
        let (b, ann_b) = gen_synthetic(&cfg).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        assert_eq!(ann_a, ann_b);
        for (s, v) in a.samples.iter().zip(&ann_a.videos) {
            assert_eq!(v.frame_events.len(), s.frames());
            assert_eq!(v.frame_events[0], 0);
            assert!(v.frame_events.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            assert_eq!(*v.frame_events.last().unwrap() as usize + 1, v.event_prototypes.len());
            assert!(v.event_prototypes.windows(2).all(|w| w[0] != w[1]));
            let mut expected = v.event_prototypes.clone();
            expected.sort_unstable();
            expected.dedup();
            assert_eq!(s.labels, expected);
        }
        let other = gen_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap().0;
        assert_ne!(other, a);
    }

    #[test]
    fn default_benchmark_passes_cosine_oracle() {
        let (ds, ann) = gen_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(ds.len(), 50);
        let (intra, inter) = cosine_separation(&ds, &ann);
        assert!(intra > inter, "intra {intra} inter {inter}");
        assert!(intra > 0.95);
        // Correlated pairs appear in some videos.
        let paired = ann
            .videos
            .iter()
            .filter(|v| {
                let has = |p| v.event_prototypes.contains(&p);
                (has(0) && has(1)) || (has(2) && has(3))
            })
            .count();
        assert!(paired > 0);
    }

    #[test]
    fn generator_rejects_bad_ranges() {
        let bad = [
            SynthConfig { event_length: Span::new(0, 3), ..small_config() },
            SynthConfig { events_per_video: Span::new(4, 2), ..small_config() },
            SynthConfig { noise_sigma: -1.0, ..small_config() },
            SynthConfig { num_prototypes: 1, correlated_pairs: vec![], ..small_config() },
            SynthConfig { correlated_pairs: vec![(1, 1)], ..small_config() },
            SynthConfig { event_length: Span::new(1, 200), ..small_config() },
        ];
        for cfg in bad {
            assert!(matches!(gen_synthetic(&cfg), Err(TdnError::Validation(_))), "{cfg:?}");
        }
    }

    #[test]
    fn block_contrast_examples() {
        let mut blocks = Matrix::zeros(5, 5);
        let events = [0, 0, 1, 1, 1];
        for i in 0..5 {
            for j in 0..5 {
                if events[i] == events[j] {
                    blocks.set(i, j, 1.0);
                }
            }
        }
        assert_eq!(block_contrast(&blocks, &events).unwrap(), f64::INFINITY);

        assert_eq!(block_contrast(&Matrix::filled(5, 5, 0.5), &events).unwrap(), 1.0);
        let third = block_contrast(&Matrix::filled(5, 5, 1.0 / 3.0), &events).unwrap();
        assert!((third - 1.0).abs() < 1e-12);

        let s = Matrix::from_rows(&[vec![1.0, 0.8, 0.0], vec![0.8, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(block_contrast(&s, &[0, 0, 1]).unwrap(), f64::INFINITY);

        let mut mixed = s.clone();
        mixed.set(0, 2, 0.2);
        mixed.set(2, 0, 0.2);
        // intra 0.8; inter (0.2 + 0.2 + 0 + 0) / 4 = 0.1
        assert!((block_contrast(&mixed, &[0, 0, 1]).unwrap() - 8.0).abs() < 1e-12);

        assert!(block_contrast(&s, &[0, 0, 0]).is_err());
        assert!(block_contrast(&s, &[0, 1]).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..5, 1usize..4, 1usize..5).prop_flat_map(|(c, m, v)| {
            let sample = (1usize..6).prop_flat_map(move |n| {
                (
                    prop::collection::vec(-1e3f32..1e3, n * m),
                    prop::collection::vec(0..c as u32, 0..4),
                )
                    .prop_map(move |(f, l)| {
                        VideoSample::new(Matrix::from_vec(n, m, f.into_iter().map(f64::from).collect()).unwrap(), l)
                    })
            });
            prop::collection::vec(sample, v).prop_map(move |samples| Dataset {
                num_labels: c,
                dim: m,
                samples,
            })
        })
    }

    proptest! {
        #[test]
        fn dataset_round_trip(ds in arb_dataset()) {
            let bytes = encode_dataset(&ds).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }
    }
}
