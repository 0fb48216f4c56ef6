use std::path::{Path, PathBuf};

use log::warn;

use super::{SampleMeta, Sequence};
use crate::error::{Error, Result};

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;
/// Gray levels above this are foreground.
pub const THRESHOLD: u8 = 127;

/// Binary silhouette, row-major, every pixel 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Data(format!(
                "{} pixels for a {height}x{width} frame",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Data("frame pixels must be 0 or 1".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0; height * width] }
    }

    /// Binarizes gray levels at [`THRESHOLD`].
    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(height, width, gray.iter().map(|&g| u8::from(g > THRESHOLD)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.pixels[y * self.width + x] = u8::from(v);
    }

    pub fn foreground(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    /// 0/255 gray levels.
    pub fn to_gray(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| p * 255).collect()
    }
}

/// Vertical bounding-box crop, aspect-preserving nearest-neighbour resize
/// to `height` rows, then horizontal centring of the foreground centroid on
/// a `width`-column canvas. `None` for an empty frame.
pub fn normalize(frame: &Frame, height: usize, width: usize) -> Option<Frame> {
    let (h, w) = (frame.height, frame.width);
    let row_has = |y: usize| frame.pixels[y * w..(y + 1) * w].iter().any(|&p| p == 1);
    let top = (0..h).find(|&y| row_has(y))?;
    let bottom = (0..h).rev().find(|&y| row_has(y))?;
    let ch = bottom - top + 1;
    let rw = ((w * height * 2 + ch) / (2 * ch)).max(1);
    let mut resized = vec![0u8; height * rw];
    let (mut count, mut sum_x) = (0i64, 0i64);
    for y in 0..height {
        let sy = top + (2 * y + 1) * ch / (2 * height);
        for x in 0..rw {
            let sx = (2 * x + 1) * w / (2 * rw);
            let v = frame.pixels[sy * w + sx];
            resized[y * rw + x] = v;
            if v == 1 {
                count += 1;
                sum_x += x as i64;
            }
        }
    }
    // output column x reads resized column x - shift
    let shift = (width as i64 * count - 2 * sum_x).div_euclid(2 * count);
    let mut out = Frame::blank(height, width);
    for y in 0..height {
        for x in 0..width {
            let sx = x as i64 - shift;
            if (0..rw as i64).contains(&sx) {
                out.pixels[y * width + x] = resized[y * rw + sx as usize];
            }
        }
    }
    Some(out)
}

fn is_frame_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
}

/// Lexicographically ordered PNG/PGM files of a directory.
fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_frame_file(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads, binarizes and normalizes every frame of a directory.
pub fn load_frames(dir: &Path, height: usize, width: usize) -> Result<Vec<Frame>> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for path in files {
        let img = image::open(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .to_luma8();
        let raw = Frame::from_gray(img.height() as usize, img.width() as usize, img.as_raw())?;
        match normalize(&raw, height, width) {
            Some(f) => frames.push(f),
            None => warn!("dropping empty frame {}", path.display()),
        }
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("empty sequence in {}", dir.display())));
    }
    Ok(frames)
}

/// [`load_frames`] at the standard 64x44 size.
pub fn load_sequence(dir: &Path, meta: SampleMeta) -> Result<Sequence> {
    Ok(Sequence { frames: load_frames(dir, FRAME_HEIGHT, FRAME_WIDTH)?, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binarizes_at_threshold() {
        let f = Frame::from_gray(1, 4, &[0, 127, 128, 255]).unwrap();
        assert_eq!(f.pixels(), &[0, 0, 1, 1]);
        assert!(Frame::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn empty_frame_is_rejected() {
        assert!(normalize(&Frame::blank(10, 10), 64, 44).is_none());
    }

    #[test]
    fn output_has_target_size_and_full_height() {
        let mut f = Frame::blank(100, 80);
        for y in 20..90 {
            for x in 30..45 {
                f.set(y, x, true);
            }
        }
        let n = normalize(&f, 64, 44).unwrap();
        assert_eq!((n.height(), n.width()), (64, 44));
        assert!((0..44).any(|x| n.get(0, x) == 1));
        assert!((0..44).any(|x| n.get(63, x) == 1));
        assert_eq!(normalize(&n, 64, 44).unwrap(), n);
    }

    fn centred_frame() -> impl Strategy<Value = Frame> {
        // A blob within the middle columns touching the top and bottom rows.
        (proptest::collection::vec(proptest::bool::weighted(0.4), 64 * 20), 0usize..20, 0usize..20).prop_map(
            |(bits, a, b)| {
                let mut f = Frame::blank(64, 44);
                for y in 0..64 {
                    for x in 0..20 {
                        f.set(y, 12 + x, bits[y * 20 + x]);
                    }
                }
                f.set(0, 12 + a, true);
                f.set(63, 12 + b, true);
                // recentre with the same integer rule
                let (count, sum) = (0..64)
                    .flat_map(|y| (0..44).map(move |x| (y, x)))
                    .filter(|&(y, x)| f.get(y, x) == 1)
                    .fold((0i64, 0i64), |(c, s), (_, x)| (c + 1, s + x as i64));
                let shift = (44 * count - 2 * sum).div_euclid(2 * count);
                let mut g = Frame::blank(64, 44);
                for y in 0..64 {
                    for x in 0..44 {
                        let sx = x as i64 - shift;
                        if (0..44).contains(&sx) {
                            g.set(y, x, f.get(y, sx as usize) == 1);
                        }
                    }
                }
                g
            },
        )
    }

    proptest! {
        #[test]
        fn normalize_is_identity_on_normalized_frames(f in centred_frame()) {
            prop_assert_eq!(normalize(&f, 64, 44).unwrap(), f);
        }

        #[test]
        fn normalize_output_is_binary_and_sized(bits in proptest::collection::vec(any::<u8>(), 30 * 25)) {
            let f = Frame::from_gray(30, 25, &bits).unwrap();
            if let Some(n) = normalize(&f, 64, 44) {
                prop_assert_eq!((n.height(), n.width()), (64, 44));
                prop_assert!(n.pixels().iter().all(|&p| p <= 1));
            }
        }
    }
}
