//! Procedural walker silhouettes.
//!
//! A side-view articulated figure (head, torso ellipse, two-segment legs and
//! arms as capsules) walks in place. Identity lives in limb proportions,
//! widths, gait period and swing amplitudes. A view angle compresses and
//! shears the figure horizontally.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::normalize;
use super::protocol::{apply_protocol, Manifest, ManifestEntry, Protocol, SampleMeta, Split};
use super::{Frame, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};

const CANVAS_H: usize = 120;
const CANVAS_W: usize = 100;
const TOP: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modifier {
    None,
    /// Outline dilated by 2 px.
    Coat,
    /// Elliptical blob at hip height.
    Bag,
}

impl Modifier {
    /// Directory label of the condition.
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "nm",
            Self::Coat => "cl",
            Self::Bag => "bg",
        }
    }
}

impl std::str::FromStr for Modifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "nm" => Ok(Self::None),
            "coat" | "cl" => Ok(Self::Coat),
            "bag" | "bg" => Ok(Self::Bag),
            other => Err(Error::Config(format!("unknown condition modifier {other:?}"))),
        }
    }
}

/// Limb geometry in canvas pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub head_radius: f64,
    pub neck: f64,
    pub torso_length: f64,
    pub torso_width: f64,
    pub thigh_length: f64,
    pub shin_length: f64,
    pub leg_width: f64,
    pub upper_arm_length: f64,
    pub forearm_length: f64,
    pub arm_width: f64,
}

/// Everything needed to re-render one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub subject_seed: u64,
    /// Frames per gait cycle.
    pub period: f64,
    pub geometry: Geometry,
    /// Thigh swing amplitude, radians.
    pub stride_amplitude: f64,
    pub arm_amplitude: f64,
    pub knee_amplitude: f64,
    /// Degrees in `[0, 180]`.
    pub view_angle: f64,
    pub condition: Modifier,
    /// Per-pixel flip probability.
    pub noise: f64,
    /// Gait phase of frame 0, radians.
    pub phase: f64,
    pub frames: usize,
    /// Seed of the noise stream.
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub views: Vec<f64>,
    pub conditions: Vec<Modifier>,
    pub seqs_per_cell: usize,
    pub frames_per_seq: usize,
    pub master_seed: u64,
    pub noise: f64,
}

impl SynthSpec {
    /// 16 subjects, views 0/30/60/90, plain and coat, 2 sequences of 40 frames.
    pub fn desk(master_seed: u64) -> Self {
        Self {
            num_subjects: 16,
            views: vec![0.0, 30.0, 60.0, 90.0],
            conditions: vec![Modifier::None, Modifier::Coat],
            seqs_per_cell: 2,
            frames_per_seq: 40,
            master_seed,
            noise: 0.0,
        }
    }
}

/// Descriptor written next to a rendered dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDescriptor {
    pub spec: SynthSpec,
    pub sequences: Vec<(ManifestEntry, SequenceParams)>,
}

pub struct SyntheticSet {
    pub manifest: Manifest,
    pub descriptor: SyntheticDescriptor,
    pub frames: Vec<Vec<Frame>>,
}

fn subject_seed(master: u64, subject: usize) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(subject as u64 + 1)
}

struct Identity {
    period: f64,
    geometry: Geometry,
    stride: f64,
    arm: f64,
    knee: f64,
}

fn identity(seed: u64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    Identity {
        period: u(8.0, 14.0),
        geometry: Geometry {
            head_radius: u(4.5, 7.0),
            neck: u(1.5, 4.0),
            torso_length: u(20.0, 29.0),
            torso_width: u(9.0, 17.0),
            thigh_length: u(16.0, 23.0),
            shin_length: u(16.0, 23.0),
            leg_width: u(3.5, 7.5),
            upper_arm_length: u(11.0, 16.0),
            forearm_length: u(9.0, 14.0),
            arm_width: u(2.5, 5.0),
        },
        stride: u(0.2, 0.55),
        arm: u(0.15, 0.6),
        knee: u(0.2, 0.9),
    }
}

/// Renders the whole dataset in memory.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticSet> {
    if spec.num_subjects < 2 {
        return Err(Error::Config("synthetic set needs at least 2 subjects".into()));
    }
    if spec.views.is_empty() || spec.conditions.is_empty() || spec.seqs_per_cell == 0 {
        return Err(Error::Config("synthetic set needs views, conditions and sequences".into()));
    }
    if spec.views.iter().any(|v| !(0.0..=180.0).contains(v)) {
        return Err(Error::Config("view angles must lie in [0, 180]".into()));
    }
    if !(0.0..=0.05).contains(&spec.noise) {
        return Err(Error::Config(format!("noise {} outside [0, 0.05]", spec.noise)));
    }
    let view_labels: Vec<String> = spec.views.iter().map(|v| format!("{:03}", v.round() as i64)).collect();
    let cond_labels: Vec<String> = spec.conditions.iter().map(|c| c.label().to_string()).collect();
    let mut entries = Vec::new();
    let mut params = Vec::new();
    for s in 0..spec.num_subjects {
        let seed = subject_seed(spec.master_seed, s);
        let id = identity(seed);
        if (spec.frames_per_seq as f64) < id.period {
            return Err(Error::Config(format!(
                "sequence shorter than one cycle: {} frames, period {:.2}",
                spec.frames_per_seq, id.period
            )));
        }
        let subject = format!("{:03}", s + 1);
        for (ci, &condition) in spec.conditions.iter().enumerate() {
            for seq in 1..=spec.seqs_per_cell {
                for (vi, &view) in spec.views.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((ci * 4096 + seq) * 256 + vi) as u64 + 1);
                    let p = SequenceParams {
                        subject_seed: seed,
                        period: id.period,
                        geometry: id.geometry.clone(),
                        stride_amplitude: id.stride,
                        arm_amplitude: id.arm,
                        knee_amplitude: id.knee,
                        view_angle: view,
                        condition,
                        noise: spec.noise,
                        phase: rng.random_range(0.0..2.0 * PI),
                        frames: spec.frames_per_seq,
                        noise_seed: rng.random(),
                    };
                    let seq_dir = format!("{}-{:02}", cond_labels[ci], seq);
                    entries.push(ManifestEntry {
                        path: PathBuf::from(&subject).join(seq_dir).join(&view_labels[vi]),
                        subject: subject.clone(),
                        condition: cond_labels[ci].clone(),
                        view: view_labels[vi].clone(),
                        seq_index: seq,
                        split: Split::Train,
                        role: None,
                    });
                    params.push(p);
                }
            }
        }
    }
    let mut manifest = Manifest {
        protocol: String::new(),
        conditions: cond_labels,
        views: view_labels,
        entries,
    };
    apply_protocol(&mut manifest, Protocol::Synthetic)?;
    let frames = params.iter().map(render_sequence).collect::<Result<Vec<_>>>()?;
    let descriptor = SyntheticDescriptor {
        spec: spec.clone(),
        sequences: manifest.entries.iter().cloned().zip(params).collect(),
    };
    Ok(SyntheticSet { manifest, descriptor, frames })
}

impl SyntheticSet {
    pub fn meta(&self, i: usize) -> Result<SampleMeta> {
        self.manifest.meta(&self.manifest.entries[i])
    }
}

/// Writes frames as PNG plus `manifest.json` and `synthetic.json`.
pub fn write_synthetic(set: &SyntheticSet, root: &Path) -> Result<()> {
    for (entry, frames) in set.manifest.entries.iter().zip(&set.frames) {
        let dir = root.join(&entry.path);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in frames.iter().enumerate() {
            let path = dir.join(format!("{t:04}.png"));
            image::GrayImage::from_raw(f.width() as u32, f.height() as u32, f.to_gray())
                .expect("buffer matches frame size")
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
        }
    }
    set.manifest.write(&root.join("manifest.json"))?;
    let path = root.join("synthetic.json");
    std::fs::write(&path, serde_json::to_string_pretty(&set.descriptor)?).map_err(|e| Error::io(&path, e))
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        cx * cx + cy * cy <= self.r * self.r
    }
}

struct Ellipse {
    c: (f64, f64),
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = ((p.0 - self.c.0) / self.rx, (p.1 - self.c.1) / self.ry);
        dx * dx + dy * dy <= 1.0
    }
}

fn limb(from: (f64, f64), angle: f64, length: f64) -> (f64, f64) {
    (from.0 + length * angle.sin(), from.1 + length * angle.cos())
}

/// Body-frame shapes at gait phase `phi`; x forward, y down from the crown.
fn pose(p: &SequenceParams, phi: f64) -> (Vec<Capsule>, Vec<Ellipse>) {
    let g = &p.geometry;
    let bob = 1.0 - (2.0 * phi).cos();
    let shoulder = (0.0, bob + 2.0 * g.head_radius + g.neck + 2.0);
    let hip = (0.0, bob + 2.0 * g.head_radius + g.neck + g.torso_length);
    let mut capsules = vec![Capsule {
        a: (0.0, bob + 2.0 * g.head_radius - 1.0),
        b: shoulder,
        r: g.torso_width / 5.0,
    }];
    let mut ellipses = vec![
        Ellipse { c: (0.0, bob + g.head_radius), rx: g.head_radius, ry: g.head_radius },
        Ellipse {
            c: (0.0, (shoulder.1 - 2.0 + hip.1) / 2.0),
            rx: g.torso_width / 2.0,
            ry: (hip.1 - shoulder.1 + 2.0) / 2.0 + 1.0,
        },
    ];
    for side in [0.0, PI] {
        let ph = phi + side;
        let thigh = p.stride_amplitude * ph.sin();
        let knee = limb(hip, thigh, g.thigh_length);
        let flex = p.knee_amplitude * (-ph.cos()).max(0.0);
        let foot = limb(knee, thigh - flex, g.shin_length);
        let r = g.leg_width / 2.0;
        capsules.push(Capsule { a: hip, b: knee, r });
        capsules.push(Capsule { a: knee, b: foot, r: r * 0.85 });
        let swing = -p.arm_amplitude * ph.sin();
        let elbow = limb(shoulder, swing, g.upper_arm_length);
        let hand = limb(elbow, swing + 0.35, g.forearm_length);
        let ra = g.arm_width / 2.0;
        capsules.push(Capsule { a: shoulder, b: elbow, r: ra });
        capsules.push(Capsule { a: elbow, b: hand, r: ra * 0.85 });
    }
    if p.condition == Modifier::Bag {
        ellipses.push(Ellipse { c: (g.torso_width / 2.0 + 4.0, hip.1 - 3.0), rx: 5.0, ry: 7.0 });
    }
    (capsules, ellipses)
}

fn dilate(f: &Frame, radius: i64) -> Frame {
    let (h, w) = (f.height() as i64, f.width() as i64);
    let mut out = Frame::blank(f.height(), f.width());
    for y in 0..h {
        for x in 0..w {
            if f.get(y as usize, x as usize) == 0 {
                continue;
            }
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (ny, nx) = (y + dy, x + dx);
                    if dx * dx + dy * dy <= radius * radius && (0..h).contains(&ny) && (0..w).contains(&nx) {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Rasterizes one frame on the working canvas, before normalization.
fn raster(p: &SequenceParams, t: usize) -> Frame {
    let phi = 2.0 * PI * t as f64 / p.period + p.phase;
    let (mut capsules, mut ellipses) = pose(p, phi);
    let theta = p.view_angle.to_radians();
    let scale = 0.35 + 0.65 * theta.sin();
    let shear = 0.4 * theta.cos();
    let cx = CANVAS_W as f64 / 2.0;
    // limb thickness is kept; only the skeleton is compressed and sheared
    let view = |(x, y): (f64, f64)| (cx + scale * x + shear * (y - 40.0), y + TOP);
    for c in &mut capsules {
        c.a = view(c.a);
        c.b = view(c.b);
    }
    for e in &mut ellipses {
        e.c = view(e.c);
    }
    let mut f = Frame::blank(CANVAS_H, CANVAS_W);
    for y in 0..CANVAS_H {
        for x in 0..CANVAS_W {
            let q = (x as f64 + 0.5, y as f64 + 0.5);
            if capsules.iter().any(|c| c.contains(q)) || ellipses.iter().any(|e| e.contains(q)) {
                f.set(y, x, true);
            }
        }
    }
    if p.condition == Modifier::Coat {
        f = dilate(&f, 2);
    }
    f
}

/// Renders a sequence at the standard frame size. Each frame is a fixed
/// point of [`normalize`], so reloading written frames is lossless.
pub fn render_sequence(p: &SequenceParams) -> Result<Vec<Frame>> {
    let mut noise = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let mut frames = Vec::with_capacity(p.frames);
    for t in 0..p.frames {
        let canvas = raster(p, t);
        let border = (0..CANVAS_W).any(|x| canvas.get(0, x) == 1 || canvas.get(CANVAS_H - 1, x) == 1)
            || (0..CANVAS_H).any(|y| canvas.get(y, 0) == 1 || canvas.get(y, CANVAS_W - 1) == 1);
        if border {
            return Err(Error::Data(format!("walker leaves the canvas at frame {t}")));
        }
        let mut f = normalize(&canvas, FRAME_HEIGHT, FRAME_WIDTH)
            .ok_or_else(|| Error::Data(format!("empty render at frame {t}")))?;
        let mut settled = false;
        for _ in 0..8 {
            let next = normalize(&f, FRAME_HEIGHT, FRAME_WIDTH)
                .ok_or_else(|| Error::Data(format!("empty render at frame {t}")))?;
            if next == f {
                settled = true;
                break;
            }
            f = next;
        }
        if !settled {
            return Err(Error::Data(format!("frame {t} does not settle under normalization")));
        }
        if p.noise > 0.0 {
            for y in 0..f.height() {
                for x in 0..f.width() {
                    if noise.random_bool(p.noise) {
                        let v = f.get(y, x) == 0;
                        f.set(y, x, v);
                    }
                }
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec {
            num_subjects: 3,
            views: vec![0.0, 90.0, 180.0],
            conditions: vec![Modifier::None, Modifier::Bag, Modifier::Coat],
            seqs_per_cell: 1,
            frames_per_seq: 16,
            master_seed: 5,
            noise: 0.0,
        }
    }

    #[test]
    fn renders_fit_and_are_fixed_points() {
        let set = generate_synthetic(&tiny()).unwrap();
        assert_eq!(set.frames.len(), 27);
        for frames in &set.frames {
            for f in frames {
                assert_eq!((f.height(), f.width()), (FRAME_HEIGHT, FRAME_WIDTH));
                assert_eq!(normalize(f, FRAME_HEIGHT, FRAME_WIDTH).as_ref(), Some(f));
            }
        }
    }

    #[test]
    fn distinct_seeds_distinct_geometry() {
        let g: Vec<Geometry> = (0..64).map(|s| identity(subject_seed(7, s)).geometry).collect();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                assert_ne!(g[i], g[j]);
            }
        }
    }

    #[test]
    fn short_sequences_rejected() {
        let spec = SynthSpec { frames_per_seq: 5, ..tiny() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(m)) if m.contains("shorter than one cycle")));
    }

    #[test]
    fn descriptor_rerenders_exactly() {
        let set = generate_synthetic(&tiny()).unwrap();
        let json = serde_json::to_string(&set.descriptor).unwrap();
        let back: SyntheticDescriptor = serde_json::from_str(&json).unwrap();
        for ((_, p), frames) in back.sequences.iter().zip(&set.frames) {
            assert_eq!(&render_sequence(p).unwrap(), frames);
        }
    }

    #[test]
    fn noise_flips_pixels() {
        let set = generate_synthetic(&tiny()).unwrap();
        let mut p = set.descriptor.sequences[0].1.clone();
        p.noise = 0.05;
        let noisy = render_sequence(&p).unwrap();
        let flipped: usize = noisy[0].pixels().iter().zip(set.frames[0][0].pixels()).filter(|(a, b)| a != b).count();
        let n = (FRAME_HEIGHT * FRAME_WIDTH) as f64;
        assert!((flipped as f64 - 0.05 * n).abs() < 4.0 * (0.05 * 0.95 * n).sqrt());
    }
}
