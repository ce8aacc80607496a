//! Frames, frame pairs, SSIM and the synthetic video generator.

mod frames;
mod ssim;
mod synth;

pub use frames::{
    decode_frame, extract_pairs, frame_paths, holdout_cut, load_frames, load_videos, save_frame_png, split_pairs, stack_frames,
    stack_pairs, FramePair, FrameSequence,
};
pub use ssim::{ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use synth::{synth_video, MotionKind, MotionState, SynthVideo};
