//! Frame ingestion: channel separation, near-duplicate removal and range selection.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEDUP_TAU: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelTag {
    Red,
    Green,
    Blue,
    Rgb,
}

impl ChannelTag {
    pub fn plane_index(self) -> Option<usize> {
        match self {
            ChannelTag::Red => Some(0),
            ChannelTag::Green => Some(1),
            ChannelTag::Blue => Some(2),
            ChannelTag::Rgb => None,
        }
    }
}

impl std::str::FromStr for ChannelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(ChannelTag::Red),
            "green" => Ok(ChannelTag::Green),
            "blue" => Ok(ChannelTag::Blue),
            "rgb" => Ok(ChannelTag::Rgb),
            other => Err(Error::InvalidInput(format!("unknown channel '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl FrameImage {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            FrameImage::Gray(g) => g.dimensions(),
            FrameImage::Rgb(c) => c.dimensions(),
        }
    }

    /// Single-channel view: the plane itself, or luma for colour frames.
    pub fn to_gray(&self) -> GrayImage {
        match self {
            FrameImage::Gray(g) => g.clone(),
            FrameImage::Rgb(c) => image::DynamicImage::ImageRgb8(c.clone()).to_luma8(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub image: FrameImage,
    pub channel: ChannelTag,
    pub source_id: String,
}

/// Splits a colour frame into its red, green and blue planes.
pub fn split_channels(frame: &FrameRecord) -> Result<[FrameRecord; 3]> {
    let FrameImage::Rgb(rgb) = &frame.image else {
        return Err(Error::InvalidInput(format!(
            "frame {} is single-channel, cannot split",
            frame.index
        )));
    };
    let plane = |c: usize, tag: ChannelTag| FrameRecord {
        index: frame.index,
        image: FrameImage::Gray(extract_plane(rgb, c)),
        channel: tag,
        source_id: frame.source_id.clone(),
    };
    Ok([
        plane(0, ChannelTag::Red),
        plane(1, ChannelTag::Green),
        plane(2, ChannelTag::Blue),
    ])
}

pub fn extract_plane(rgb: &RgbImage, channel: usize) -> GrayImage {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().chunks_exact(3).map(|p| p[channel]).collect();
    GrayImage::from_raw(w, h, data).expect("plane has matching size")
}

/// Interleaves three planes back into a colour image.
pub fn merge_channels(red: &GrayImage, green: &GrayImage, blue: &GrayImage) -> Result<RgbImage> {
    let dims = red.dimensions();
    if green.dimensions() != dims || blue.dimensions() != dims {
        return Err(Error::InvalidInput("channel planes differ in size".into()));
    }
    let data = red
        .as_raw()
        .iter()
        .zip(green.as_raw())
        .zip(blue.as_raw())
        .flat_map(|((&r, &g), &b)| [r, g, b])
        .collect();
    Ok(RgbImage::from_raw(dims.0, dims.1, data).expect("sizes checked"))
}

/// Box-filtered 4× reduction used by the duplicate test.
fn downsample4(img: &GrayImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = img.dimensions();
    let (dw, dh) = ((w as usize / 4).max(1), (h as usize / 4).max(1));
    let raw = img.as_raw();
    let mut out = vec![0.0; dw * dh];
    for by in 0..dh {
        for bx in 0..dw {
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in (by * 4)..((by * 4 + 4).min(h as usize)) {
                for x in (bx * 4)..((bx * 4 + 4).min(w as usize)) {
                    sum += raw[y * w as usize + x] as f64;
                    n += 1.0;
                }
            }
            out[by * dw + bx] = sum / n;
        }
    }
    (dw, dh, out)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Positions (into `frames`) of the frames kept by the duplicate filter.
///
/// Frame 0 is always kept; a later frame is kept when its mean absolute difference to the
/// last kept frame is at least `tau`.
pub fn dedup_indices(frames: &[FrameRecord], tau: f64) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty frame sequence".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput("tau must be non-negative".into()));
    }
    let dims = frames[0].image.dimensions();
    if let Some(f) = frames.iter().find(|f| f.image.dimensions() != dims) {
        return Err(Error::InvalidInput(format!(
            "frame {} has size {:?}, expected {:?}",
            f.index,
            f.image.dimensions(),
            dims
        )));
    }
    let mut kept = vec![0];
    let mut last = downsample4(&frames[0].image.to_gray()).2;
    for (i, f) in frames.iter().enumerate().skip(1) {
        let cur = downsample4(&f.image.to_gray()).2;
        if mean_abs_diff(&cur, &last) >= tau {
            kept.push(i);
            last = cur;
        }
    }
    Ok(kept)
}

pub fn dedup_frames(frames: &[FrameRecord], tau: f64) -> Result<Vec<FrameRecord>> {
    Ok(dedup_indices(frames, tau)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Half-open slice `[begin, end)` of a sequence.
pub fn select_range<T: Clone>(frames: &[T], begin: usize, end: usize) -> Result<Vec<T>> {
    if begin > end || end > frames.len() {
        return Err(Error::InvalidInput(format!(
            "range [{begin}, {end}) outside sequence of length {}",
            frames.len()
        )));
    }
    Ok(frames[begin..end].to_vec())
}

/// Standard deviation of the 4-neighbour Laplacian over the image interior.
pub fn laplacian_std(img: &GrayImage) -> f64 {
    let (w, h) = img.dimensions();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let p = |x: u32, y: u32| img.get_pixel(x, y).0[0] as f64;
    let mut vals = Vec::with_capacity(((w - 2) * (h - 2)) as usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            vals.push(p(x - 1, y) + p(x + 1, y) + p(x, y - 1) + p(x, y + 1) - 4.0 * p(x, y));
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    name.strip_prefix("frame_")?.strip_suffix(".png")?.parse().ok()
}

/// Lists `frame_%06d.png` files of a directory sorted by index.
pub fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            Some((parse_frame_index(&name)?, e.path()))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads a frame directory as colour or single-channel records, keeping the file index.
pub fn load_frames(dir: &Path) -> Result<Vec<FrameRecord>> {
    list_frames(dir)?
        .into_iter()
        .map(|(index, path)| {
            let img = image::open(&path)?;
            let image = match img.color().channel_count() {
                1 | 2 => FrameImage::Gray(img.to_luma8()),
                _ => FrameImage::Rgb(img.to_rgb8()),
            };
            let channel = match image {
                FrameImage::Gray(_) => ChannelTag::Red,
                FrameImage::Rgb(_) => ChannelTag::Rgb,
            };
            Ok(FrameRecord {
                index,
                image,
                channel,
                source_id: path.display().to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessManifest {
    pub channel: ChannelTag,
    pub tau: f64,
    pub input_count: usize,
    /// Original frame indices that survived duplicate removal.
    pub kept: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};
    use proptest::prelude::*;

    fn rgb_frame(index: usize, f: impl Fn(u32, u32) -> [u8; 3]) -> FrameRecord {
        FrameRecord {
            index,
            image: FrameImage::Rgb(RgbImage::from_fn(16, 12, |x, y| Rgb(f(x, y)))),
            channel: ChannelTag::Rgb,
            source_id: "test".into(),
        }
    }

    fn gray_frame(index: usize, v: u8) -> FrameRecord {
        FrameRecord {
            index,
            image: FrameImage::Gray(GrayImage::from_pixel(16, 16, Luma([v]))),
            channel: ChannelTag::Red,
            source_id: "test".into(),
        }
    }

    #[test]
    fn split_picks_each_channel() {
        let [r, g, b] = split_channels(&rgb_frame(3, |_, _| [10, 20, 30])).unwrap();
        for (plane, v, tag) in [
            (r, 10, ChannelTag::Red),
            (g, 20, ChannelTag::Green),
            (b, 30, ChannelTag::Blue),
        ] {
            assert_eq!(plane.index, 3);
            assert_eq!(plane.channel, tag);
            let FrameImage::Gray(img) = plane.image else { panic!() };
            assert_eq!(img.dimensions(), (16, 12));
            assert!(img.pixels().all(|p| p.0[0] == v));
        }
    }

    #[test]
    fn gray_content_gives_identical_planes() {
        let [r, g, b] = split_channels(&rgb_frame(0, |x, y| {
            let v = (x * 7 + y * 3) as u8;
            [v, v, v]
        }))
        .unwrap();
        assert_eq!(r.image, g.image);
        assert_eq!(g.image, b.image);
    }

    #[test]
    fn split_rejects_single_channel() {
        assert!(split_channels(&gray_frame(0, 1)).is_err());
    }

    #[test]
    fn identical_frames_are_dropped() {
        let frames = [gray_frame(0, 5), gray_frame(1, 5)];
        assert_eq!(dedup_indices(&frames, 1.0).unwrap(), vec![0]);
    }

    #[test]
    fn distinct_frames_are_kept() {
        let frames = [gray_frame(0, 0), gray_frame(1, 50), gray_frame(2, 100)];
        assert_eq!(dedup_indices(&frames, 1.0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn difference_equal_to_tau_is_kept() {
        let frames = [gray_frame(0, 10), gray_frame(1, 12)];
        assert_eq!(dedup_indices(&frames, 2.0).unwrap(), vec![0, 1]);
        assert_eq!(dedup_indices(&frames, 2.0001).unwrap(), vec![0]);
    }

    #[test]
    fn dedup_rejects_mismatched_sizes() {
        let mut small = gray_frame(1, 0);
        small.image = FrameImage::Gray(GrayImage::new(8, 8));
        assert!(dedup_indices(&[gray_frame(0, 0), small], 1.0).is_err());
        assert!(dedup_indices(&[], 1.0).is_err());
    }

    #[test]
    fn range_selection() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(select_range(&v, 0, 10).unwrap(), v);
        assert!(select_range(&v, 3, 3).unwrap().is_empty());
        assert_eq!(select_range(&v, 2, 5).unwrap(), vec![2, 3, 4]);
        assert!(select_range(&v, 5, 11).is_err());
        assert!(select_range(&v, 6, 5).is_err());
    }

    #[test]
    fn frame_names_round_trip() {
        assert_eq!(frame_file_name(12), "frame_000012.png");
        assert_eq!(parse_frame_index("frame_000012.png"), Some(12));
        assert_eq!(parse_frame_index("frame_12.jpg"), None);
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_subsequence(levels in proptest::collection::vec(0u8..40, 1..20), tau in 0.0..10.0f64) {
            let frames: Vec<FrameRecord> = levels.iter().enumerate().map(|(i, &v)| gray_frame(i, v)).collect();
            let once = dedup_frames(&frames, tau).unwrap();
            let twice = dedup_frames(&once, tau).unwrap();
            prop_assert_eq!(&once, &twice);
            let idx: Vec<usize> = once.iter().map(|f| f.index).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(idx[0], 0);
        }

        #[test]
        fn split_then_merge_is_identity(seed in any::<u64>()) {
            let frame = rgb_frame(0, |x, y| {
                let h = seed.wrapping_mul(x as u64 * 31 + y as u64 * 17 + 1);
                [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
            });
            let [r, g, b] = split_channels(&frame).unwrap();
            let (FrameImage::Gray(r), FrameImage::Gray(g), FrameImage::Gray(b)) = (r.image, g.image, b.image) else { panic!() };
            let FrameImage::Rgb(orig) = frame.image else { panic!() };
            prop_assert_eq!(merge_channels(&r, &g, &b).unwrap(), orig);
        }
    }
}
