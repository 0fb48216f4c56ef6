//! Silhouette sequences: loading, synthesis, protocols and sampling.

mod frame;
mod protocol;
mod sampler;
mod synth;

pub use frame::{load_frames, load_sequence, normalize, Frame, FRAME_HEIGHT, FRAME_WIDTH, THRESHOLD};
pub use protocol::{
    apply_protocol, open_dataset, scan_dataset, Dataset, Manifest, ManifestEntry, Protocol, Role, SampleMeta, Split,
};
pub use sampler::{batch_sampler, sample_clip, Batch, BatchSampler};
pub use synth::{
    generate_synthetic, render_sequence, write_synthetic, Geometry, Modifier, SequenceParams, SynthSpec,
    SyntheticDescriptor, SyntheticSet,
};

use crate::tensor::Tensor;

/// A sequence in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub meta: SampleMeta,
}

/// Stacks frames into a `[T, h, w]` tensor of 0/1 values, resampling each
/// frame with nearest neighbour when the sizes differ.
pub fn clip_tensor(frames: &[&Frame], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        for y in 0..h {
            let sy = (2 * y + 1) * f.height() / (2 * h);
            for x in 0..w {
                let sx = (2 * x + 1) * f.width() / (2 * w);
                data.push(f.get(sy, sx) as f64);
            }
        }
    }
    Tensor::new(&[frames.len(), h, w], data).expect("consistent clip size")
}
