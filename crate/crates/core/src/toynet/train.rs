use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{decode, detection_loss, nms, stack_images, Result, ToyError, ToyNet};
use crate::blocks::{Mode, ParamKind, Parameterized};
use crate::eval::{map50, DetectionBox, GroundTruthBox};
use crate::tensor::{Tape, Tensor};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`. Only
/// trainable tensors are touched.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(ToyError::Config(format!(
                "need lr > 0 and momentum in [0, 1), got {lr} and {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// `grads` holds one vector per trainable tensor in visiting order, as
    /// produced by [`Parameterized::collect_grads`].
    pub fn step(&mut self, model: &mut dyn Parameterized, grads: &[Vec<f64>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let mut idx = 0;
        let mut err = None;
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |role, kind, t| {
            if kind != ParamKind::Trainable || err.is_some() {
                return;
            }
            match (grads.get(idx), velocity.get_mut(idx)) {
                (Some(g), Some(v)) if g.len() == t.numel() && v.len() == g.len() => {
                    for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
                _ => err = Some(format!("no matching gradient for {role}")),
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(ToyError::Input(e)),
            None if idx != grads.len() => Err(ToyError::Input(format!(
                "{} gradients for {idx} trainable tensors",
                grads.len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Confidence floor for the per-epoch training-set mAP evaluation.
    pub eval_conf: f64,
    pub nms_iou: f64,
    /// Stop once training mAP50 reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            eval_conf: 0.01,
            nms_iou: super::DEFAULT_NMS_IOU,
            stop_at: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_map50: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept (the earliest best), `None` if no epoch
    /// ran.
    pub best_epoch: Option<usize>,
    pub best_map50: f64,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_map50\n");
        for e in &self.log {
            s += &format!("{},{},{}\n", e.epoch, e.loss, e.train_map50);
        }
        s
    }
}

/// Inference-mode detections for `images` (after NMS), with image ids equal
/// to positions in `images`.
pub fn detect(
    model: &ToyNet,
    images: &[Tensor],
    conf: f64,
    nms_iou: f64,
    batch: usize,
) -> Result<Vec<DetectionBox>> {
    let mut out = Vec::new();
    for (k, chunk) in images.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let pred = model.predict(&stack_images(&refs)?)?;
        for mut d in decode(&pred, conf, model.config.num_classes)? {
            d.image_id += k * batch.max(1);
            out.push(d);
        }
    }
    Ok(nms(&out, nms_iou))
}

/// Training-set style mAP50 of `model` on `images`.
pub fn evaluate_map50(
    model: &ToyNet,
    images: &[Tensor],
    targets: &[Vec<GroundTruthBox>],
    conf: f64,
    nms_iou: f64,
) -> Result<f64> {
    let preds = detect(model, images, conf, nms_iou, 32)?;
    let gts: Vec<GroundTruthBox> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |b| GroundTruthBox { image_id: i, ..*b }))
        .collect();
    map50(&preds, &gts, model.config.num_classes).map_err(|e| ToyError::Input(e.to_string()))
}

/// Minibatch SGD over a seeded shuffle. After every epoch the training-set
/// mAP50 is measured in inference mode, and the weights of the best epoch
/// (earliest on ties) are what `model` holds on return.
pub fn train_toy(
    model: &mut ToyNet,
    images: &[Tensor],
    targets: &[Vec<GroundTruthBox>],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(ToyError::Input(format!(
            "{} images with {} target lists",
            images.len(),
            targets.len()
        )));
    }
    if opts.batch_size == 0 {
        return Err(ToyError::Config("batch size must be positive".into()));
    }
    let mut sgd = Sgd::new(opts.lr, opts.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ToyNet)> = None;
    let nc = model.config.num_classes;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let batch_targets: Vec<Vec<GroundTruthBox>> =
                chunk.iter().map(|&i| targets[i].clone()).collect();
            let mut tape = Tape::new();
            let x = tape.constant(stack_images(&refs)?);
            let pred = model.forward(&mut tape, x, Mode::Train)?;
            let loss = detection_loss(&mut tape, pred, &batch_targets, nc)?;
            tape.backward(loss)?;
            total += tape.value(loss).data()[0] * chunk.len() as f64;
            let grads = model.collect_grads(&tape);
            model.commit_batch_stats(&tape);
            sgd.step(model, &grads)?;
        }
        let train_map50 = evaluate_map50(model, images, targets, opts.eval_conf, opts.nms_iou)?;
        let entry = EpochLog {
            epoch,
            loss: total / images.len() as f64,
            train_map50,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(_, m, _)| train_map50 > *m) {
            best = Some((epoch, train_map50, model.clone()));
        }
        if opts.stop_at.is_some_and(|t| train_map50 >= t) {
            break;
        }
    }
    let (best_epoch, best_map50) = match best {
        Some((e, m, weights)) => {
            *model = weights;
            (Some(e), m)
        }
        None => (None, 0.0),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_map50,
    })
}
