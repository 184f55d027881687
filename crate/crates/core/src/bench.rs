//! Phase-resolved inference timing and the FPS report.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::data::{load_image_ppm, DataError};
use crate::eval::DetectionBox;
use crate::tensor::Tensor;
use crate::toynet::{decode, nms, ToyError, ToyNet, DEFAULT_CONF, DEFAULT_NMS_IOU};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no benchmark inputs")]
    NoInputs,
    #[error("iters must be at least 1")]
    NoIterations,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ToyError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Mean seconds per frame for each phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingBreakdown {
    pub t_pre: f64,
    pub t_inference: f64,
    pub t_post: f64,
    pub iters: usize,
    pub warmup: usize,
}

impl TimingBreakdown {
    pub fn fps(&self) -> f64 {
        1.0 / (self.t_pre + self.t_inference + self.t_post)
    }
}

pub enum BenchInput {
    /// PPM files, decoded inside the timed preprocessing phase.
    Files(Vec<PathBuf>),
    /// Ready `[3, S, S]` tensors; preprocessing is not timed.
    Tensors(Vec<Tensor>),
}

impl BenchInput {
    fn len(&self) -> usize {
        match self {
            BenchInput::Files(f) => f.len(),
            BenchInput::Tensors(t) => t.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub warmup: usize,
    pub iters: usize,
    pub conf: f64,
    /// `None` skips NMS and marshaling, leaving `t_post` at zero.
    pub nms_iou: Option<f64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            iters: 100,
            conf: DEFAULT_CONF,
            nms_iou: Some(DEFAULT_NMS_IOU),
        }
    }
}

fn to_batch(img: Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    Ok(img.reshape(&shape).map_err(ToyError::from)?)
}

/// Times batch-1 inference cycling through `inputs`: preprocessing (load
/// and tensor layout), inference (forward and decode), post (NMS and
/// marshaling to label text). Runs single-threaded on a monotonic clock.
pub fn measure_fps(
    model: &ToyNet,
    inputs: &BenchInput,
    opts: &BenchOptions,
) -> Result<TimingBreakdown> {
    if inputs.len() == 0 {
        return Err(BenchError::NoInputs);
    }
    if opts.iters == 0 {
        return Err(BenchError::NoIterations);
    }
    let (mut pre, mut inf, mut post) = (0.0, 0.0, 0.0);
    for step in 0..opts.warmup + opts.iters {
        let timed = step >= opts.warmup;
        let k = step % inputs.len();

        let t0 = Instant::now();
        let x = match inputs {
            BenchInput::Files(f) => to_batch(load_image_ppm(&f[k])?)?,
            BenchInput::Tensors(t) => to_batch(t[k].clone())?,
        };
        let t_pre = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let pred = model.predict(&x)?;
        let boxes = decode(&pred, opts.conf, model.config.num_classes)?;
        let t_inf = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        if let Some(iou) = opts.nms_iou {
            let kept = nms(&boxes, iou);
            std::hint::black_box(marshal(&kept));
        }
        let t_post = t2.elapsed().as_secs_f64();

        if timed {
            if matches!(inputs, BenchInput::Files(_)) {
                pre += t_pre;
            }
            inf += t_inf;
            if opts.nms_iou.is_some() {
                post += t_post;
            }
        }
    }
    let n = opts.iters as f64;
    Ok(TimingBreakdown {
        t_pre: pre / n,
        t_inference: inf / n,
        t_post: post / n,
        iters: opts.iters,
        warmup: opts.warmup,
    })
}

fn marshal(boxes: &[DetectionBox]) -> String {
    crate::data::serialize_predictions(boxes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchEntry {
    pub label: String,
    pub params: usize,
    pub flops: u64,
    pub timing: TimingBreakdown,
}

/// Text table (label, params, FLOPs, phase times in ms, FPS) plus the JSON
/// array `[{label, params, flops, t_pre, t_inference, t_post, fps}]`. Both
/// are rendered from the same numbers.
pub fn bench_report(entries: &[BenchEntry], sort_by_fps: bool) -> (String, serde_json::Value) {
    let mut rows: Vec<&BenchEntry> = entries.iter().collect();
    if sort_by_fps {
        rows.sort_by(|a, b| b.timing.fps().total_cmp(&a.timing.fps()));
    }
    let mut text = format!(
        "{:<16} {:>10} {:>12} {:>10} {:>10} {:>10} {:>10}\n",
        "Model", "Params", "FLOPs", "pre ms", "infer ms", "post ms", "FPS"
    );
    let mut json = Vec::new();
    for e in rows {
        let t = &e.timing;
        let _ = writeln!(
            text,
            "{:<16} {:>10} {:>12} {:>10.4} {:>10.4} {:>10.4} {:>10.2}",
            e.label,
            e.params,
            e.flops,
            t.t_pre * 1e3,
            t.t_inference * 1e3,
            t.t_post * 1e3,
            t.fps()
        );
        json.push(serde_json::json!({
            "label": e.label,
            "params": e.params,
            "flops": e.flops,
            "t_pre": t.t_pre,
            "t_inference": t.t_inference,
            "t_post": t.t_post,
            "fps": t.fps(),
        }));
    }
    (text, serde_json::Value::Array(json))
}
