use std::collections::VecDeque;

use super::Observation;
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

/// Nearest-neighbor resampling of a `[h, w, c]` frame.
pub fn rescale(frame: &Observation, target_h: usize, target_w: usize) -> Result<Observation> {
    let &[h, w, c] = frame.shape() else {
        return Err(Error::shape(format!("frame must be [h, w, c], got {:?}", frame.shape())));
    };
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("rescale target must be positive"));
    }
    if (h, w) == (target_h, target_w) {
        return Ok(frame.clone());
    }
    let src = frame.data();
    let mut out = Vec::with_capacity(target_h * target_w * c);
    for i in 0..target_h {
        let si = i * h / target_h;
        for j in 0..target_w {
            let sj = j * w / target_w;
            out.extend_from_slice(&src[(si * w + sj) * c..(si * w + sj + 1) * c]);
        }
    }
    Tensor::from_vec(&[target_h, target_w, c], Layout::Flat, out)
}

/// Stacks frames channel-wise, oldest first, newest in the last channel block.
/// When fewer than `frame_history` frames exist the oldest blocks are zero.
pub fn stack_frames(history: &[Observation], frame_history: usize) -> Result<Tensor<f32>> {
    let newest = history.last().ok_or_else(|| Error::invalid("empty frame history"))?;
    if frame_history == 0 || history.len() > frame_history {
        return Err(Error::invalid(format!(
            "{} frames for a history of {frame_history}",
            history.len()
        )));
    }
    let &[h, w, c] = newest.shape() else {
        return Err(Error::shape(format!("frame must be [h, w, c], got {:?}", newest.shape())));
    };
    if history.iter().any(|f| f.shape() != newest.shape()) {
        return Err(Error::shape("frames in history differ in shape"));
    }
    let missing = frame_history - history.len();
    let depth = c * frame_history;
    let mut out = vec![0.0f32; h * w * depth];
    for (slot, frame) in history.iter().enumerate() {
        let block = (missing + slot) * c;
        for (px, chunk) in frame.data().chunks_exact(c).enumerate() {
            out[px * depth + block..px * depth + block + c].copy_from_slice(chunk);
        }
    }
    Tensor::from_vec(&[h, w, depth], Layout::Flat, out)
}

/// Ring of the last `capacity` frames.
#[derive(Debug, Clone)]
pub struct FrameStack {
    capacity: usize,
    frames: VecDeque<Observation>,
}

impl FrameStack {
    pub fn new(capacity: usize) -> Self {
        FrameStack {
            capacity: capacity.max(1),
            frames: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: Observation) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stacked(&self) -> Result<Tensor<f32>> {
        let frames: Vec<Observation> = self.frames.iter().cloned().collect();
        stack_frames(&frames, self.capacity)
    }
}

/// Raw observation -> rescaled -> stacked network state.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    image: (usize, usize),
    stack: FrameStack,
}

impl Preprocessor {
    pub fn new(image: (usize, usize), frame_history: usize) -> Self {
        Preprocessor {
            image,
            stack: FrameStack::new(frame_history),
        }
    }

    pub fn reset(&mut self, obs: &Observation) -> Result<Tensor<f32>> {
        self.stack.clear();
        self.push(obs)
    }

    pub fn push(&mut self, obs: &Observation) -> Result<Tensor<f32>> {
        self.stack.push(rescale(obs, self.image.0, self.image.1)?);
        self.stack.stacked()
    }

    /// `[h, w, c]` of produced states given raw frames with `obs_channels`.
    pub fn state_dims(&self, obs_channels: usize) -> [usize; 3] {
        [self.image.0, self.image.1, obs_channels * self.stack.capacity]
    }
}
