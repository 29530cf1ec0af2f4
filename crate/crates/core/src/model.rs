//! The desk-scale classifier, its training loop, and the pretrain,
//! transfer-expand, fine-tune workflow that produces the snapshot set used
//! for voting.

use crate::dataset::DatasetHandle;
use crate::error::{CheckpointError, Error, Result};
use crate::interference::{
    apply_interference, encode_label, Background, InterferenceConfig, NoiseRealization,
};
use crate::kernels;
use crate::optim::{sgd_momentum_step, SgdState};
use crate::rng::{permutation, split, StreamRng};
use crate::tape::{ComputationTape, TensorId};
use crate::tensor::Tensor;

/// Parameter order is fixed; checkpoints and optimizers index by it.
pub const PARAM_NAMES: [&str; 8] = [
    "conv1.kernel",
    "conv1.bias",
    "conv2.kernel",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

const CONV1_FILTERS: usize = 32;
const CONV2_FILTERS: usize = 64;
const HIDDEN: usize = 128;

const LANE_INIT: u64 = 0x696e_6974;
const LANE_ORDER: u64 = 0x6f72_6465;
const LANE_JITTER: u64 = 0x6a69_7474;

/// conv(C->32, 3x3, pad 1) -> relu -> conv(32->64, 3x3, pad 1) -> relu ->
/// maxpool(2) -> flatten -> dense(->128) -> relu -> dense(-> n_outputs).
#[derive(Debug, Clone)]
pub struct SmallConvNet {
    pub input_shape: [usize; 3],
    pub n_outputs: usize,
    /// Order matches [`PARAM_NAMES`].
    pub params: Vec<Tensor>,
}

/// Total parameter count for a given input shape and logit width.
pub fn param_count(input_shape: [usize; 3], n_outputs: usize) -> usize {
    let [c, h, w] = input_shape;
    let flat = CONV2_FILTERS * (h / 2) * (w / 2);
    CONV1_FILTERS * c * 9
        + CONV1_FILTERS
        + CONV2_FILTERS * CONV1_FILTERS * 9
        + CONV2_FILTERS
        + HIDDEN * flat
        + HIDDEN
        + n_outputs * HIDDEN
        + n_outputs
}

impl SmallConvNet {
    pub fn new(input_shape: [usize; 3], n_outputs: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c == 0 || h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "input shape [{c},{h},{w}] needs even height/width of at least 4"
            )));
        }
        if n_outputs == 0 {
            return Err(Error::Config("network needs at least one output".into()));
        }
        let flat = CONV2_FILTERS * (h / 2) * (w / 2);
        let dims: [(Vec<usize>, Option<f32>); 8] = [
            (vec![CONV1_FILTERS, c, 3, 3], Some(2.0 / (c * 9) as f32)),
            (vec![CONV1_FILTERS], None),
            (vec![CONV2_FILTERS, CONV1_FILTERS, 3, 3], Some(2.0 / (CONV1_FILTERS * 9) as f32)),
            (vec![CONV2_FILTERS], None),
            (vec![HIDDEN, flat], Some(2.0 / flat as f32)),
            (vec![HIDDEN], None),
            (vec![n_outputs, HIDDEN], Some(2.0 / HIDDEN as f32)),
            (vec![n_outputs], None),
        ];
        let mut params = Vec::with_capacity(8);
        for (i, (shape, variance)) in dims.into_iter().enumerate() {
            let t = match variance {
                Some(v) => {
                    let std = v.sqrt();
                    let mut rng = StreamRng::new(seed, &[LANE_INIT, i as u64]);
                    let mut t = Tensor::zeros(shape);
                    for x in t.data_mut() {
                        *x = rng.next_gaussian() * std;
                    }
                    t
                }
                None => Tensor::zeros(shape),
            };
            params.push(t.with_grad());
        }
        Ok(SmallConvNet { input_shape, n_outputs, params })
    }

    pub fn param_count(&self) -> usize {
        param_count(self.input_shape, self.n_outputs)
    }

    fn flat_dim(&self) -> usize {
        CONV2_FILTERS * (self.input_shape[1] / 2) * (self.input_shape[2] / 2)
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        match shape {
            [n, bc, bh, bw] if *bc == c && *bh == h && *bw == w && *n > 0 => Ok(*n),
            other => Err(Error::Dimension {
                op: "small_conv_net",
                detail: format!("batch {:?} does not match input [{c},{h},{w}]", other),
            }),
        }
    }

    /// Places every parameter on the tape, in [`PARAM_NAMES`] order.
    pub fn place_params(&self, tape: &mut ComputationTape, trainable: bool) -> Vec<TensorId> {
        self.params.iter().map(|p| tape.leaf(p, trainable)).collect()
    }

    /// Builds the forward graph from an already-placed input batch and
    /// parameter set; returns the logits node.
    pub fn forward(
        &self,
        tape: &mut ComputationTape,
        input: TensorId,
        params: &[TensorId],
    ) -> Result<TensorId> {
        Ok(self.forward_trace(tape, input, params)?.logits)
    }

    /// Same graph as `forward`, exposing the pre-activation nodes so callers
    /// can inspect how far each value sits from a relu or pooling kink.
    pub(crate) fn forward_trace(
        &self,
        tape: &mut ComputationTape,
        input: TensorId,
        params: &[TensorId],
    ) -> Result<ForwardTrace> {
        let n = self.check_batch(tape.shape(input))?;
        if params.len() != 8 {
            return Err(Error::Contract("expected 8 parameter nodes".into()));
        }
        let c1 = tape.conv2d(input, params[0], params[1], 1, 1)?;
        let r1 = tape.relu(c1)?;
        let c2 = tape.conv2d(r1, params[2], params[3], 1, 1)?;
        let r2 = tape.relu(c2)?;
        let pooled = tape.maxpool2d(r2, 2)?;
        let flat = tape.reshape(pooled, vec![n, self.flat_dim()])?;
        let f1 = tape.dense(flat, params[4], params[5])?;
        let r3 = tape.relu(f1)?;
        let logits = tape.dense(r3, params[6], params[7])?;
        Ok(ForwardTrace { pre1: c1, pre2: c2, pool_input: r2, pre_fc1: f1, logits })
    }

    /// Discrete activation pattern of a recorded forward pass: the sign of
    /// every relu input plus each pooling window's argmax (first maximum
    /// wins, matching the pooling kernel). Between two points with equal
    /// patterns the network is affine, because every layer is affine once
    /// the pattern is fixed and an affine function cannot change sign or
    /// argmax between endpoints where they agree.
    pub(crate) fn activation_pattern(
        &self,
        tape: &ComputationTape,
        trace: &ForwardTrace,
    ) -> Vec<u32> {
        let mut pat = Vec::new();
        for id in [trace.pre1, trace.pre2, trace.pre_fc1] {
            pat.extend(tape.data(id).iter().map(|&v| (v > 0.0) as u32));
        }
        let data = tape.data(trace.pool_input);
        let shape = tape.shape(trace.pool_input);
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        for plane in 0..planes {
            let base = plane * h * w;
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for wy in 0..2 {
                        for wx in 0..2 {
                            let idx = base + (oy * 2 + wy) * w + (ox * 2 + wx);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    pat.push(best_idx);
                }
            }
        }
        pat
    }

    /// Tape-free forward pass for inference; returns logits `[n, n_outputs]`.
    pub fn forward_infer(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch.shape())?;
        let [c, h, w] = self.input_shape;
        let p = &self.params;
        let c1 = kernels::conv2d_forward(
            batch.data(), (n, c, h, w), p[0].data(), (CONV1_FILTERS, 3, 3), p[1].data(), 1, 1,
        );
        let r1 = kernels::relu_forward(&c1);
        let c2 = kernels::conv2d_forward(
            &r1, (n, CONV1_FILTERS, h, w), p[2].data(), (CONV2_FILTERS, 3, 3), p[3].data(), 1, 1,
        );
        let r2 = kernels::relu_forward(&c2);
        let (pooled, _) = kernels::maxpool_forward(&r2, (n, CONV2_FILTERS, h, w), 2);
        let flat_dim = self.flat_dim();
        let f1 = kernels::dense_forward(&pooled, n, flat_dim, p[4].data(), HIDDEN, p[5].data());
        let r3 = kernels::relu_forward(&f1);
        let logits =
            kernels::dense_forward(&r3, n, HIDDEN, p[6].data(), self.n_outputs, p[7].data());
        let out = Tensor::from_vec(vec![n, self.n_outputs], logits)?;
        out.check_finite("forward_infer")?;
        Ok(out)
    }

    /// Softmax probabilities `[n, n_outputs]` from a tape-free forward pass.
    pub fn infer_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward_infer(batch)?;
        let n = logits.shape()[0];
        let (probs, _) = kernels::softmax_rows(logits.data(), n, self.n_outputs);
        Tensor::from_vec(vec![n, self.n_outputs], probs)
    }
}

/// Node handles from one `forward_trace` call.
pub(crate) struct ForwardTrace {
    pub pre1: TensorId,
    pub pre2: TensorId,
    pub pool_input: TensorId,
    pub pre_fc1: TensorId,
    pub logits: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(
        batch_size: usize,
        momentum: f32,
        weight_decay: f32,
        learning_rate: f32,
        epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [("momentum", momentum), ("weight_decay", weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        Ok(TrainConfig { batch_size, momentum, weight_decay, learning_rate, epochs, seed })
    }

    /// Desk defaults: batch 128, momentum 0.9, weight decay 5e-4, lr 0.01.
    pub fn desk(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            learning_rate: 0.01,
            epochs,
            seed,
        }
    }
}

/// Per-epoch training record. `transforms_per_epoch` counts interference
/// applications; clean training records zeros.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_mean_losses: Vec<f64>,
    pub transforms_per_epoch: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SnapshotMeta {
    pub n: usize,
    pub k: usize,
    pub icfg: InterferenceConfig,
    pub tcfg: TrainConfig,
    pub dataset_id: String,
    pub input_shape: [usize; 3],
}

/// One parameter checkpoint per fine-tuning epoch, plus the configuration
/// that produced them.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub snapshots: Vec<Vec<Tensor>>,
    pub meta: SnapshotMeta,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Reconstructs the network as of the given epoch snapshot.
    pub fn model_for(&self, index: usize) -> Result<SmallConvNet> {
        let params = self.snapshots.get(index).ok_or_else(|| {
            Error::Config(format!("snapshot {index} of {} requested", self.snapshots.len()))
        })?;
        Ok(SmallConvNet {
            input_shape: self.meta.input_shape,
            n_outputs: self.meta.n * self.meta.k,
            params: params.clone(),
        })
    }
}

/// What the loop feeds the network: raw pixels or interference-blended
/// pixels with composite labels.
enum BatchSource<'a> {
    Clean,
    Inn { icfg: &'a InterferenceConfig, backgrounds: &'a [Background] },
}

impl BatchSource<'_> {
    fn k(&self) -> usize {
        match self {
            BatchSource::Clean => 1,
            BatchSource::Inn { icfg, .. } => icfg.k,
        }
    }
}

/// Assembles one batch. The realization counter is the epoch index, so each
/// image sees exactly one fresh realization per epoch. Returns the pixel
/// batch, composite labels, and the number of transform applications.
fn assemble_batch(
    dataset: &DatasetHandle,
    indices: &[usize],
    source: &BatchSource,
    epoch: usize,
) -> Result<(Tensor, Vec<u32>, u64)> {
    let shape = dataset.image_shape()?;
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut batch = Tensor::zeros(vec![indices.len(), c, h, w]);
    let stride = c * h * w;
    let mut labels = Vec::with_capacity(indices.len());
    let mut transforms = 0u64;
    for (slot, &i) in indices.iter().enumerate() {
        let img = &dataset.images[i];
        let base = dataset.labels[i] as usize;
        match source {
            BatchSource::Clean => {
                batch.data_mut()[slot * stride..(slot + 1) * stride]
                    .copy_from_slice(img.pixels.data());
                labels.push(base as u32);
            }
            BatchSource::Inn { icfg, backgrounds } => {
                let r = NoiseRealization::draw_for(
                    icfg,
                    icfg.master_seed,
                    img.id,
                    epoch as u64,
                    img.pixels.shape(),
                )?;
                let blended = apply_interference(&img.pixels, icfg, backgrounds, &r)?;
                batch.data_mut()[slot * stride..(slot + 1) * stride]
                    .copy_from_slice(blended.pixels.data());
                let composite =
                    encode_label(base, r.background_index, dataset.n_classes, icfg.k)?;
                labels.push(composite as u32);
                transforms += 1;
            }
        }
    }
    Ok((batch, labels, transforms))
}

/// Mean cross-entropy of the model over the dataset without updating it,
/// using the given epoch's realizations when a transform is active.
fn frozen_mean_loss(
    model: &SmallConvNet,
    dataset: &DatasetHandle,
    source: &BatchSource,
    batch_size: usize,
    epoch: usize,
) -> Result<f64> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut tape = ComputationTape::new();
    let mut total = 0.0f64;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels, _) = assemble_batch(dataset, chunk, source, epoch)?;
        tape.clear();
        let params = model.place_params(&mut tape, false);
        let input = tape.leaf(&batch, false);
        let logits = model.forward(&mut tape, input, &params)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        total += tape.value_f64(loss) * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// The single training loop behind both pretraining and fine-tuning: seeded
/// per-epoch shuffling, SGD with momentum, one snapshot per epoch.
fn train_loop(
    model: &mut SmallConvNet,
    dataset: &DatasetHandle,
    source: BatchSource,
    tcfg: &TrainConfig,
) -> Result<(Vec<Vec<Tensor>>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let expected = dataset.n_classes * source.k();
    if model.n_outputs != expected {
        return Err(Error::Label(format!(
            "model has {} outputs, label space needs {expected}",
            model.n_outputs
        )));
    }
    let shape = dataset.image_shape()?;
    if shape != model.input_shape {
        return Err(Error::Dimension {
            op: "train_loop",
            detail: format!("dataset images {:?} vs model input {:?}", shape, model.input_shape),
        });
    }

    let initial_loss = frozen_mean_loss(model, dataset, &source, tcfg.batch_size, 0)?;
    let mut state = SgdState::new(tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay);
    let mut tape = ComputationTape::new();
    let mut snapshots = Vec::with_capacity(tcfg.epochs);
    let mut epoch_mean_losses = Vec::with_capacity(tcfg.epochs);
    let mut transforms_per_epoch = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        let order = permutation(tcfg.seed, &[LANE_ORDER, epoch as u64], dataset.len());
        let mut epoch_loss = 0.0f64;
        let mut epoch_transforms = 0u64;
        for chunk in order.chunks(tcfg.batch_size) {
            let (batch, labels, transforms) = assemble_batch(dataset, chunk, &source, epoch)?;
            epoch_transforms += transforms;
            tape.clear();
            let params = model.place_params(&mut tape, true);
            let input = tape.leaf(&batch, false);
            let run = |tape: &mut ComputationTape| -> Result<f64> {
                let logits = model.forward(tape, input, &params)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                tape.backward(loss)?;
                Ok(tape.value_f64(loss))
            };
            let loss = run(&mut tape).map_err(|e| match e {
                Error::NonFinite { .. } => {
                    Error::Training { step, detail: e.to_string() }
                }
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Training { step, detail: format!("loss {loss}") });
            }
            epoch_loss += loss * chunk.len() as f64;
            for (param, id) in model.params.iter_mut().zip(&params) {
                param.grad = tape.grad(*id).map(|g| g.to_vec());
            }
            sgd_momentum_step(&mut model.params, &mut state)
                .map_err(|e| Error::Training { step, detail: e.to_string() })?;
            step += 1;
        }
        snapshots.push(model.params.clone());
        epoch_mean_losses.push(epoch_loss / dataset.len() as f64);
        transforms_per_epoch.push(epoch_transforms);
    }
    Ok((snapshots, TrainReport { initial_loss, epoch_mean_losses, transforms_per_epoch }))
}

/// Clean pretraining with the plain N-class label space.
pub fn pretrain(
    dataset: &DatasetHandle,
    tcfg: &TrainConfig,
    n: usize,
) -> Result<(SmallConvNet, TrainReport)> {
    if dataset.n_classes != n {
        return Err(Error::Label(format!(
            "dataset has {} classes, pretraining for {n}",
            dataset.n_classes
        )));
    }
    let shape = dataset.image_shape()?;
    let mut model =
        SmallConvNet::new([shape[0], shape[1], shape[2]], n, split(tcfg.seed, LANE_INIT))?;
    let (_, report) = train_loop(&mut model, dataset, BatchSource::Clean, tcfg)?;
    Ok((model, report))
}

/// Rebuilds the final layer for the N*K composite space; the row for
/// composite (c, k) starts from the pretrained row for c plus seeded
/// Gaussian jitter. Zero jitter with K=1 preserves the function exactly.
pub fn transfer_expand(
    pretrained: &SmallConvNet,
    n: usize,
    k: usize,
    jitter_std: f32,
    seed: u64,
) -> Result<SmallConvNet> {
    if pretrained.n_outputs != n {
        return Err(Error::Checkpoint(CheckpointError::Metadata(format!(
            "pretrained model has {} output logits, expected {n}",
            pretrained.n_outputs
        ))));
    }
    if k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !jitter_std.is_finite() || jitter_std < 0.0 {
        return Err(Error::Config(format!("jitter std must be >= 0, got {jitter_std}")));
    }
    let mut params = pretrained.params.clone();
    let old_w = params[6].data();
    let old_b = params[7].data();
    let mut rng = StreamRng::new(seed, &[LANE_JITTER]);
    let mut new_w = Tensor::zeros(vec![n * k, HIDDEN]);
    let mut new_b = Tensor::zeros(vec![n * k]);
    for c in 0..n {
        for ki in 0..k {
            let row = c * k + ki;
            for d in 0..HIDDEN {
                new_w.data_mut()[row * HIDDEN + d] =
                    old_w[c * HIDDEN + d] + jitter_std * rng.next_gaussian();
            }
            new_b.data_mut()[row] = old_b[c] + jitter_std * rng.next_gaussian();
        }
    }
    params[6] = new_w.with_grad();
    params[7] = new_b.with_grad();
    Ok(SmallConvNet { input_shape: pretrained.input_shape, n_outputs: n * k, params })
}

/// Fine-tunes over the interference transform with composite labels; every
/// image gets one fresh realization per epoch and the training set is never
/// enlarged. Returns one snapshot per epoch.
pub fn finetune_inn(
    mut model: SmallConvNet,
    dataset: &DatasetHandle,
    icfg: &InterferenceConfig,
    tcfg: &TrainConfig,
    backgrounds: &[Background],
) -> Result<(SnapshotSet, TrainReport)> {
    if backgrounds.len() != icfg.k {
        return Err(Error::Config(format!(
            "{} backgrounds for k = {}",
            backgrounds.len(),
            icfg.k
        )));
    }
    let input_shape = model.input_shape;
    let n = dataset.n_classes;
    let (snapshots, report) =
        train_loop(&mut model, dataset, BatchSource::Inn { icfg, backgrounds }, tcfg)?;
    let meta = SnapshotMeta {
        n,
        k: icfg.k,
        icfg: icfg.clone(),
        tcfg: tcfg.clone(),
        dataset_id: dataset.name.clone(),
        input_shape,
    };
    Ok((SnapshotSet { snapshots, meta }, report))
}

/// Mean frozen loss helper exposed for invariant checks: evaluates without
/// updating, drawing the given epoch's realizations.
pub fn mean_loss_at_epoch(
    model: &SmallConvNet,
    dataset: &DatasetHandle,
    transform: Option<(&InterferenceConfig, &[Background])>,
    batch_size: usize,
    epoch: usize,
) -> Result<f64> {
    let source = match transform {
        None => BatchSource::Clean,
        Some((icfg, backgrounds)) => BatchSource::Inn { icfg, backgrounds },
    };
    frozen_mean_loss(model, dataset, &source, batch_size, epoch)
}

/// Top-1 accuracy of the raw (undefended) model on raw pixels.
pub fn clean_accuracy(model: &SmallConvNet, dataset: &DatasetHandle) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        let shape = img.pixels.shape();
        let batch = Tensor::from_vec(
            vec![1, shape[0], shape[1], shape[2]],
            img.pixels.data().to_vec(),
        )?;
        let logits = model.forward_infer(&batch)?;
        let row = logits.data();
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_blobs;
    use crate::interference::generate_backgrounds;

    fn tiny_tcfg(epochs: usize, lr: f32, seed: u64) -> TrainConfig {
        TrainConfig::new(16, 0.9, 5e-4, lr, epochs, seed).unwrap()
    }

    #[test]
    fn param_count_matches_enumeration() {
        let net = SmallConvNet::new([1, 12, 12], 10, 0).unwrap();
        let total: usize = net.params.iter().map(|p| p.numel()).sum();
        assert_eq!(total, net.param_count());
        assert_eq!(net.params.len(), PARAM_NAMES.len());
    }

    #[test]
    fn rejects_odd_input_extent() {
        assert!(SmallConvNet::new([1, 11, 12], 10, 0).is_err());
        assert!(SmallConvNet::new([1, 12, 0], 10, 0).is_err());
        assert!(SmallConvNet::new([1, 12, 12], 0, 0).is_err());
    }

    #[test]
    fn forward_infer_matches_tape_forward() {
        let net = SmallConvNet::new([1, 8, 8], 4, 3).unwrap();
        let mut rng = StreamRng::new(5, &[1]);
        let mut batch = Tensor::zeros(vec![2, 1, 8, 8]);
        for v in batch.data_mut() {
            *v = rng.next_f32();
        }
        let fast = net.forward_infer(&batch).unwrap();
        let mut tape = ComputationTape::new();
        let params = net.place_params(&mut tape, false);
        let input = tape.leaf(&batch, false);
        let logits = net.forward(&mut tape, input, &params).unwrap();
        assert_eq!(fast.data(), tape.data(logits));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = SmallConvNet::new([1, 8, 8], 4, 9).unwrap();
        let b = SmallConvNet::new([1, 8, 8], 4, 9).unwrap();
        let c = SmallConvNet::new([1, 8, 8], 4, 10).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
        assert_ne!(a.params[0].data(), c.params[0].data());
    }

    #[test]
    fn blobs_pretrain_to_high_accuracy() {
        let train = two_blobs(64, 12, "train", 11).unwrap();
        let tcfg = tiny_tcfg(5, 0.05, 11);
        let (model, report) = pretrain(&train, &tcfg, 2).unwrap();
        assert!(
            report.epoch_mean_losses.last().unwrap() < &report.initial_loss,
            "loss did not decrease: {report:?}"
        );
        let acc = clean_accuracy(&model, &train).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let train = two_blobs(16, 12, "train", 2).unwrap();
        let tcfg = tiny_tcfg(1, 0.0, 2);
        let before = SmallConvNet::new([1, 12, 12], 2, split(tcfg.seed, LANE_INIT)).unwrap();
        let (model, _) = pretrain(&train, &tcfg, 2).unwrap();
        for (a, b) in model.params.iter().zip(&before.params) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn pretrain_is_bit_reproducible() {
        let train = two_blobs(32, 12, "train", 4).unwrap();
        let tcfg = tiny_tcfg(2, 0.05, 7);
        let (a, _) = pretrain(&train, &tcfg, 2).unwrap();
        let (b, _) = pretrain(&train, &tcfg, 2).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn transfer_expand_identity_at_k1_zero_jitter() {
        let net = SmallConvNet::new([1, 8, 8], 4, 1).unwrap();
        let expanded = transfer_expand(&net, 4, 1, 0.0, 99).unwrap();
        let mut rng = StreamRng::new(8, &[2]);
        let mut batch = Tensor::zeros(vec![3, 1, 8, 8]);
        for v in batch.data_mut() {
            *v = rng.next_f32();
        }
        let a = net.forward_infer(&batch).unwrap();
        let b = expanded.forward_infer(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn transfer_expand_builds_jittered_copies() {
        let net = SmallConvNet::new([1, 8, 8], 3, 1).unwrap();
        let expanded = transfer_expand(&net, 3, 4, 0.01, 5).unwrap();
        assert_eq!(expanded.n_outputs, 12);
        let w = expanded.params[6].data();
        let w0 = net.params[6].data();
        for c in 0..3 {
            for ki in 0..4 {
                let row = c * 4 + ki;
                for d in 0..HIDDEN {
                    let diff = (w[row * HIDDEN + d] - w0[c * HIDDEN + d]).abs();
                    assert!(diff <= 0.1, "row {row} dim {d} jitter {diff}");
                }
            }
        }
        assert!(transfer_expand(&expanded, 3, 2, 0.0, 0).is_err());
    }

    #[test]
    fn finetune_produces_one_snapshot_per_epoch() {
        let train = two_blobs(24, 12, "train", 6).unwrap();
        let icfg = InterferenceConfig::new(0.2, 0.2, 0.1, 2, 31).unwrap();
        let backgrounds = generate_backgrounds(2, 1, 12, 12, 31).unwrap();
        let (model, _) = pretrain(&train, &tiny_tcfg(1, 0.05, 3), 2).unwrap();
        let expanded = transfer_expand(&model, 2, 2, 0.01, 3).unwrap();
        let tcfg = tiny_tcfg(3, 0.02, 13);
        let (set, report) =
            finetune_inn(expanded, &train, &icfg, &tcfg, &backgrounds).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(report.transforms_per_epoch, vec![24, 24, 24]);
        for snap in &set.snapshots {
            assert_eq!(snap.len(), PARAM_NAMES.len());
        }
        let m = set.model_for(2).unwrap();
        assert_eq!(m.n_outputs, 4);
        assert!(set.model_for(3).is_err());
    }

    #[test]
    fn identity_transform_finetune_matches_plain_training_bitwise() {
        // All-zero intensities with K=1 must reduce to ordinary training:
        // same shuffles, same batches, same updates, bit for bit.
        let train = two_blobs(24, 12, "train", 8).unwrap();
        let tcfg = tiny_tcfg(2, 0.05, 21);
        let (plain, _) = pretrain(&train, &tcfg, 2).unwrap();

        let icfg = InterferenceConfig::new(0.0, 0.0, 0.0, 1, 77).unwrap();
        let backgrounds = generate_backgrounds(1, 1, 12, 12, 77).unwrap();
        let init = SmallConvNet::new([1, 12, 12], 2, split(tcfg.seed, LANE_INIT)).unwrap();
        let (set, _) = finetune_inn(init, &train, &icfg, &tcfg, &backgrounds).unwrap();
        let finetuned = set.model_for(set.len() - 1).unwrap();
        for (a, b) in plain.params.iter().zip(&finetuned.params) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rejects_mismatched_label_space() {
        let train = two_blobs(8, 12, "train", 1).unwrap();
        let icfg = InterferenceConfig::new(0.1, 0.1, 0.1, 3, 1).unwrap();
        let backgrounds = generate_backgrounds(3, 1, 12, 12, 1).unwrap();
        // Model with 2 outputs cannot host the 2*3 composite space.
        let model = SmallConvNet::new([1, 12, 12], 2, 0).unwrap();
        assert!(matches!(
            finetune_inn(model, &train, &icfg, &tcfg_for(&train), &backgrounds),
            Err(Error::Label(_))
        ));
    }

    fn tcfg_for(_d: &crate::dataset::DatasetHandle) -> TrainConfig {
        tiny_tcfg(1, 0.05, 0)
    }
}
