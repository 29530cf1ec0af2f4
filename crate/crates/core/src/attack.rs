//! White-box L-infinity attacks (FGSM and PGD) in the two gradient modes,
//! plus the binary adversarial-set format.
//!
//! Mode one differentiates through the full interference transform with a
//! fixed realization; mode two differentiates the raw image against the
//! marginal base-class objective. Attacks on distinct images are independent
//! and seeded per image, so results never depend on scheduling.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::atomic_write;
use crate::dataset::DatasetHandle;
use crate::error::{Error, Result};
use crate::interference::{
    encode_label, Background, Image, InterferenceConfig, NoiseRealization,
};
use crate::model::SmallConvNet;
use crate::tape::{ComputationTape, TensorId};
use crate::tensor::Tensor;

/// Gradient mode: through the fixed-realization transform (one) or on the
/// raw test image with the marginal base-class objective (two).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Inn1,
    Inn2,
}

impl AttackMode {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMode::Inn1 => "inn1",
            AttackMode::Inn2 => "inn2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L-infinity radius in [0,1] pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    /// Explicit step size; `None` selects 2.5 * epsilon / iterations.
    pub step_size: Option<f64>,
    pub mode: AttackMode,
    /// Which fine-tuning snapshot the attacker targets.
    pub attack_snapshot_index: usize,
    /// Redraw the realization every iteration instead of fixing one.
    pub eot_resample: bool,
    /// Start from a uniform point in the epsilon ball instead of x.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, iterations: usize, mode: AttackMode, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0,1], got {epsilon}")));
        }
        if iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(AttackConfig {
            epsilon,
            iterations,
            step_size: None,
            mode,
            attack_snapshot_index: 2,
            eot_resample: false,
            random_start: false,
            seed,
        })
    }

    pub fn with_step_size(mut self, step: f64) -> Result<Self> {
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::Config(format!("step size must be positive, got {step}")));
        }
        self.step_size = Some(step);
        Ok(self)
    }

    /// The step actually taken each iteration.
    pub fn effective_step(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None => 2.5 * self.epsilon / self.iterations as f64,
        }
    }
}

/// Anything attackable: places itself on a tape and maps an input batch
/// node to logits.
pub trait AttackTarget: Sync {
    fn logits(&self, tape: &mut ComputationTape, input: TensorId) -> Result<TensorId>;
    fn n_outputs(&self) -> usize;
}

impl AttackTarget for SmallConvNet {
    fn logits(&self, tape: &mut ComputationTape, input: TensorId) -> Result<TensorId> {
        let params = self.place_params(tape, false);
        self.forward(tape, input, &params)
    }

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }
}

/// A perturbed image with its provenance. Constructing one enforces the box
/// constraints.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub original: Image,
    pub perturbed: Image,
    pub epsilon: f64,
    pub mode: AttackMode,
    pub achieved_loss: f64,
}

impl AdversarialExample {
    pub fn new(
        original: Image,
        perturbed: Tensor,
        epsilon: f64,
        mode: AttackMode,
        achieved_loss: f64,
    ) -> Result<Self> {
        if perturbed.shape() != original.pixels.shape() {
            return Err(Error::Dimension {
                op: "adversarial_example",
                detail: format!(
                    "perturbed {:?} vs original {:?}",
                    perturbed.shape(),
                    original.pixels.shape()
                ),
            });
        }
        let worst = original
            .pixels
            .data()
            .iter()
            .zip(perturbed.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0f64, f64::max);
        if worst > epsilon + 1e-6 {
            return Err(Error::Contract(format!(
                "perturbation {worst} exceeds epsilon {epsilon}"
            )));
        }
        let id = original.id;
        // Image::new re-validates the [0,1] range.
        let perturbed = Image::new(perturbed, id)?;
        Ok(AdversarialExample { original, perturbed, epsilon, mode, achieved_loss })
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Objective gradient with respect to the input pixels, and the loss value.
///
/// Mode one: forward through white noise, salt-and-pepper, and overlay with
/// the given fixed realization; cross-entropy against the composite label
/// for the realization's background. Mode two: forward on the raw pixels;
/// negative log marginal probability of the base class.
pub fn attack_gradient(
    x: &Tensor,
    base_label: u32,
    target: &dyn AttackTarget,
    mode: AttackMode,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
    realization: &NoiseRealization,
) -> Result<(Tensor, f64)> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "attack_gradient",
            detail: format!("input rank {} must be 3", shape.len()),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if target.n_outputs() % icfg.k != 0 {
        return Err(Error::Config(format!(
            "{} logits not divisible by k {}",
            target.n_outputs(),
            icfg.k
        )));
    }
    let n = target.n_outputs() / icfg.k;

    let mut tape = ComputationTape::new();
    let input = tape.leaf_from(vec![1, c, h, w], x.data().to_vec(), true);
    let loss = match mode {
        AttackMode::Inn1 => {
            if backgrounds.len() != icfg.k {
                return Err(Error::Config(format!(
                    "{} backgrounds for k = {}",
                    backgrounds.len(),
                    icfg.k
                )));
            }
            let bg = &backgrounds[realization.background_index];
            let numel = c * h * w;
            let mut whitened = input;
            // (x + beta*n) / (1 + beta); identity when beta is zero.
            let shift: Vec<f32> =
                realization.white.data().iter().map(|&nv| icfg.beta * nv).collect();
            whitened = tape.shift_div(whitened, &shift, 1.0 + icfg.beta)?;
            // Replaced pixels carry zero gradient.
            let mut mask = vec![false; numel];
            let mut fill = vec![0.0f32; numel];
            let hw = h * w;
            for ci in 0..c {
                for p in 0..hw {
                    mask[ci * hw + p] = realization.sp_mask[p];
                    fill[ci * hw + p] = if realization.sp_value[p] { 1.0 } else { 0.0 };
                }
            }
            let speckled = tape.masked_fill(whitened, mask, &fill)?;
            // x' + alpha*y passes gradient unchanged.
            let overlay_shift: Vec<f32> =
                bg.pixels.data().iter().map(|&bv| icfg.alpha * bv).collect();
            let blended = tape.shift_div(speckled, &overlay_shift, 1.0)?;
            let logits = target.logits(&mut tape, blended)?;
            let composite = encode_label(base_label as usize, realization.background_index, n, icfg.k)?;
            tape.softmax_cross_entropy(logits, &[composite as u32])?
        }
        AttackMode::Inn2 => {
            let logits = target.logits(&mut tape, input)?;
            tape.marginal_nll(logits, &[base_label], icfg.k)?
        }
    };
    tape.backward(loss)?;
    let grad = tape
        .grad(input)
        .ok_or_else(|| Error::Contract("input gradient missing after backward".into()))?
        .to_vec();
    let value = tape.value_f64(loss);
    Ok((Tensor::from_vec(vec![c, h, w], grad)?, value))
}

/// Loss only, at the given point, under the same objective.
fn objective_loss(
    x: &Tensor,
    base_label: u32,
    target: &dyn AttackTarget,
    mode: AttackMode,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
    realization: &NoiseRealization,
) -> Result<f64> {
    let (_, loss) =
        attack_gradient(x, base_label, target, mode, icfg, backgrounds, realization)?;
    Ok(loss)
}

/// Lane separating the attacker's realization stream from training and
/// evaluation draws.
const LANE_ATTACK: u64 = 0x6174_746b;
const LANE_START: u64 = 0x7374_6172;

fn attacker_realization(
    cfg: &AttackConfig,
    icfg: &InterferenceConfig,
    image_id: u64,
    counter: u64,
    shape: &[usize],
) -> Result<NoiseRealization> {
    NoiseRealization::draw(
        crate::rng::split(cfg.seed, LANE_ATTACK),
        image_id,
        counter,
        shape,
        icfg.gamma,
        icfg.k,
    )
}

/// Single-step attack: clip(x + epsilon * sign(grad), 0, 1).
pub fn fgsm(
    img: &Image,
    base_label: u32,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
) -> Result<AdversarialExample> {
    let realization = attacker_realization(cfg, icfg, img.id, 0, img.pixels.shape())?;
    let (grad, _) = attack_gradient(
        &img.pixels,
        base_label,
        target,
        cfg.mode,
        icfg,
        backgrounds,
        &realization,
    )?;
    let eps = cfg.epsilon as f32;
    let mut out = img.pixels.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + eps * sign(g)).clamp(0.0, 1.0);
    }
    let loss =
        objective_loss(&out, base_label, target, cfg.mode, icfg, backgrounds, &realization)?;
    AdversarialExample::new(img.clone(), out, cfg.epsilon, cfg.mode, loss)
}

/// Iterated attack: T steps of size `effective_step`, each projected back
/// into the epsilon ball around x and the unit box. Starts at x unless
/// `random_start` is set.
pub fn pgd(
    img: &Image,
    base_label: u32,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
) -> Result<AdversarialExample> {
    let shape = img.pixels.shape().to_vec();
    let realization = attacker_realization(cfg, icfg, img.id, 0, &shape)?;
    if cfg.epsilon == 0.0 {
        let loss = objective_loss(
            &img.pixels,
            base_label,
            target,
            cfg.mode,
            icfg,
            backgrounds,
            &realization,
        )?;
        return AdversarialExample::new(
            img.clone(),
            img.pixels.clone(),
            cfg.epsilon,
            cfg.mode,
            loss,
        );
    }

    let eps = cfg.epsilon as f32;
    let step = cfg.effective_step() as f32;
    let x0 = img.pixels.data();
    let mut current = img.pixels.clone();
    if cfg.random_start {
        let mut rng = crate::rng::StreamRng::new(
            crate::rng::split(cfg.seed, LANE_START),
            &[img.id],
        );
        for (v, &orig) in current.data_mut().iter_mut().zip(x0) {
            *v = (orig + rng.next_symmetric(eps)).clamp(0.0, 1.0);
        }
    }

    let mut last_realization = realization;
    for t in 0..cfg.iterations {
        if cfg.eot_resample && t > 0 {
            last_realization = attacker_realization(cfg, icfg, img.id, t as u64, &shape)?;
        }
        let (grad, _) = attack_gradient(
            &current,
            base_label,
            target,
            cfg.mode,
            icfg,
            backgrounds,
            &last_realization,
        )?;
        for ((v, &g), &orig) in current.data_mut().iter_mut().zip(grad.data()).zip(x0) {
            let moved = *v + step * sign(g);
            *v = moved.clamp(orig - eps, orig + eps).clamp(0.0, 1.0);
        }
    }
    let loss = objective_loss(
        &current,
        base_label,
        target,
        cfg.mode,
        icfg,
        backgrounds,
        &last_realization,
    )?;
    AdversarialExample::new(img.clone(), current, cfg.epsilon, cfg.mode, loss)
}

/// PGD over a whole dataset. Images are independent jobs with per-image
/// seeds; the result order follows the dataset order regardless of the
/// worker count.
pub fn attack_dataset(
    dataset: &DatasetHandle,
    target: &SmallConvNet,
    cfg: &AttackConfig,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
) -> Result<Vec<AdversarialExample>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot attack an empty dataset".into()));
    }
    dataset
        .images
        .par_iter()
        .zip(&dataset.labels)
        .map(|(img, &label)| pgd(img, label, target, cfg, icfg, backgrounds))
        .collect()
}

const ADV_MAGIC: &[u8; 4] = b"INNA";
const ADV_VERSION: u32 = 1;

/// An adversarial set as stored on disk: attack provenance plus perturbed
/// pixels keyed by original image id.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub epsilon: f64,
    pub iterations: u32,
    pub mode: AttackMode,
    pub snapshot_index: u32,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub records: Vec<(u32, Tensor)>,
}

impl AdversarialSet {
    pub fn from_examples(cfg: &AttackConfig, examples: &[AdversarialExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::AdvSet("empty example list".into()))?;
        let shape = first.perturbed.pixels.shape();
        let image_shape = [shape[0], shape[1], shape[2]];
        let records = examples
            .iter()
            .map(|e| (e.original.id as u32, e.perturbed.pixels.clone()))
            .collect();
        Ok(AdversarialSet {
            epsilon: cfg.epsilon,
            iterations: cfg.iterations as u32,
            mode: cfg.mode,
            snapshot_index: cfg.attack_snapshot_index as u32,
            seed: cfg.seed,
            image_shape,
            records,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ADV_MAGIC);
        buf.extend_from_slice(&ADV_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.epsilon.to_le_bytes());
        buf.extend_from_slice(&self.iterations.to_le_bytes());
        buf.push(match self.mode {
            AttackMode::Inn1 => 1,
            AttackMode::Inn2 => 2,
        });
        buf.extend_from_slice(&self.snapshot_index.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for d in self.image_shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (id, pixels) in &self.records {
            buf.extend_from_slice(&id.to_le_bytes());
            for &v in pixels.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, len: usize, what: &str| -> Result<&[u8]> {
            if *pos + len > buf.len() {
                return Err(Error::AdvSet(format!("truncated while reading {what}")));
            }
            let s = &buf[*pos..*pos + len];
            *pos += len;
            Ok(s)
        };
        let magic = take(&mut pos, 4, "magic")?;
        if magic != ADV_MAGIC {
            return Err(Error::AdvSet("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
        if version != ADV_VERSION {
            return Err(Error::AdvSet(format!("unsupported version {version}")));
        }
        let epsilon = f64::from_le_bytes(take(&mut pos, 8, "epsilon")?.try_into().unwrap());
        let iterations = u32::from_le_bytes(take(&mut pos, 4, "iterations")?.try_into().unwrap());
        let mode = match take(&mut pos, 1, "mode")?[0] {
            1 => AttackMode::Inn1,
            2 => AttackMode::Inn2,
            other => return Err(Error::AdvSet(format!("unknown mode byte {other}"))),
        };
        let snapshot_index =
            u32::from_le_bytes(take(&mut pos, 4, "snapshot index")?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(&mut pos, 8, "seed")?.try_into().unwrap());
        let mut image_shape = [0usize; 3];
        for d in &mut image_shape {
            *d = u32::from_le_bytes(take(&mut pos, 4, "image shape")?.try_into().unwrap())
                as usize;
        }
        let count = u32::from_le_bytes(take(&mut pos, 4, "record count")?.try_into().unwrap());
        let numel = image_shape.iter().product::<usize>();
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            let id =
                u32::from_le_bytes(take(&mut pos, 4, &format!("record {i} id"))?.try_into().unwrap());
            let raw = take(&mut pos, numel * 4, &format!("record {i} pixels"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push((id, Tensor::from_vec(image_shape.to_vec(), data)?));
        }
        Ok(AdversarialSet {
            epsilon,
            iterations,
            mode,
            snapshot_index,
            seed,
            image_shape,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interference::generate_backgrounds;
    use crate::rng::StreamRng;

    fn test_image(seed: u64, id: u64) -> Image {
        let mut rng = StreamRng::new(seed, &[id]);
        let mut t = Tensor::zeros(vec![1, 8, 8]);
        for v in t.data_mut() {
            *v = rng.next_f32();
        }
        Image::new(t, id).unwrap()
    }

    fn small_net(outputs: usize, seed: u64) -> SmallConvNet {
        SmallConvNet::new([1, 8, 8], outputs, seed).unwrap()
    }

    #[test]
    fn default_step_is_the_documented_expression() {
        let cfg = AttackConfig::new(16.0 / 255.0, 500, AttackMode::Inn2, 0).unwrap();
        assert_eq!(cfg.effective_step(), 2.5 * (16.0 / 255.0) / 500.0);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.5), 1.0);
        assert_eq!(sign(-0.1), -1.0);
    }

    #[test]
    fn fgsm_zero_epsilon_returns_the_image_bits() {
        let img = test_image(1, 0);
        let net = small_net(4, 2);
        let icfg = InterferenceConfig::identity(5);
        let bgs = generate_backgrounds(1, 1, 8, 8, 5).unwrap();
        let cfg = AttackConfig::new(0.0, 1, AttackMode::Inn2, 7).unwrap();
        let adv = fgsm(&img, 1, &net, &cfg, &icfg, &bgs).unwrap();
        assert_eq!(adv.perturbed.pixels.data(), img.pixels.data());
    }

    #[test]
    fn outputs_respect_both_boxes_even_at_boundaries() {
        let net = small_net(4, 3);
        let icfg = InterferenceConfig::identity(5);
        let bgs = generate_backgrounds(1, 1, 8, 8, 5).unwrap();
        let cfg = AttackConfig::new(0.25, 5, AttackMode::Inn2, 11).unwrap();
        for (id, fill) in [(0u64, 0.0f32), (1, 1.0)] {
            let img = Image::new(Tensor::full(vec![1, 8, 8], fill), id).unwrap();
            let adv = pgd(&img, 2, &net, &cfg, &icfg, &bgs).unwrap();
            for (&o, &p) in img.pixels.data().iter().zip(adv.perturbed.pixels.data()) {
                assert!((0.0..=1.0).contains(&p));
                assert!((o as f64 - p as f64).abs() <= 0.25 + 1e-6);
            }
        }
    }

    #[test]
    fn pgd_single_big_step_equals_fgsm_bitwise() {
        let img = test_image(4, 9);
        let net = small_net(6, 5);
        let icfg = InterferenceConfig::new(0.3, 0.2, 0.2, 2, 21).unwrap();
        let bgs = generate_backgrounds(2, 1, 8, 8, 21).unwrap();
        for mode in [AttackMode::Inn1, AttackMode::Inn2] {
            let cfg = AttackConfig::new(8.0 / 255.0, 1, mode, 13)
                .unwrap()
                .with_step_size(0.5)
                .unwrap();
            let a = fgsm(&img, 2, &net, &cfg, &icfg, &bgs).unwrap();
            let b = pgd(&img, 2, &net, &cfg, &icfg, &bgs).unwrap();
            assert_eq!(a.perturbed.pixels.data(), b.perturbed.pixels.data());
        }
    }

    #[test]
    fn pgd_is_deterministic() {
        let img = test_image(6, 3);
        let net = small_net(8, 8);
        let icfg = InterferenceConfig::new(0.5, 0.4, 0.4, 4, 2).unwrap();
        let bgs = generate_backgrounds(4, 1, 8, 8, 2).unwrap();
        let cfg = AttackConfig::new(4.0 / 255.0, 5, AttackMode::Inn1, 17).unwrap();
        let a = pgd(&img, 1, &net, &cfg, &icfg, &bgs).unwrap();
        let b = pgd(&img, 1, &net, &cfg, &icfg, &bgs).unwrap();
        assert_eq!(a.perturbed.pixels.data(), b.perturbed.pixels.data());
        assert_eq!(a.achieved_loss.to_bits(), b.achieved_loss.to_bits());
    }

    #[test]
    fn identity_transform_makes_modes_agree_exactly() {
        // beta = gamma = alpha = 0 and K = 1: both modes reduce to plain
        // cross-entropy on the raw image; gradients must match bit for bit.
        let img = test_image(7, 5);
        let net = small_net(5, 6);
        let icfg = InterferenceConfig::identity(9);
        let bgs = generate_backgrounds(1, 1, 8, 8, 9).unwrap();
        let r = NoiseRealization::draw(3, 5, 0, &[1, 8, 8], 0.0, 1).unwrap();
        let (g1, l1) =
            attack_gradient(&img.pixels, 3, &net, AttackMode::Inn1, &icfg, &bgs, &r).unwrap();
        let (g2, l2) =
            attack_gradient(&img.pixels, 3, &net, AttackMode::Inn2, &icfg, &bgs, &r).unwrap();
        assert_eq!(g1.data(), g2.data());
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn masked_pixels_have_exactly_zero_gradient() {
        let img = test_image(8, 2);
        let net = small_net(4, 1);
        let icfg = InterferenceConfig::new(0.2, 0.3, 0.5, 2, 3).unwrap();
        let bgs = generate_backgrounds(2, 1, 8, 8, 3).unwrap();
        let r = NoiseRealization::draw(11, 2, 0, &[1, 8, 8], 0.5, 2).unwrap();
        let (g, _) =
            attack_gradient(&img.pixels, 0, &net, AttackMode::Inn1, &icfg, &bgs, &r).unwrap();
        assert!(r.sp_mask.iter().any(|&m| m), "mask drew no pixels");
        for (p, &masked) in r.sp_mask.iter().enumerate() {
            if masked {
                assert_eq!(g.data()[p], 0.0, "pixel {p}");
            }
        }
    }

    #[test]
    fn white_noise_scales_gradient_by_inverse_denominator() {
        // Compare the transform graph against a manual forward from the
        // blended point; the input gradient must be the blended-point
        // gradient divided by (1 + beta), computed by the same f32 op.
        let img = test_image(9, 4);
        let net = small_net(4, 7);
        let beta = 0.7f32;
        let icfg = InterferenceConfig::new(0.0, beta, 0.0, 1, 13).unwrap();
        let bgs = generate_backgrounds(1, 1, 8, 8, 13).unwrap();
        let r = NoiseRealization::draw(5, 4, 0, &[1, 8, 8], 0.0, 1).unwrap();
        let (g, _) =
            attack_gradient(&img.pixels, 1, &net, AttackMode::Inn1, &icfg, &bgs, &r).unwrap();

        let mut blended = img.pixels.clone();
        for (v, &nv) in blended.data_mut().iter_mut().zip(r.white.data()) {
            *v = (*v + beta * nv) / (1.0 + beta);
        }
        let mut tape = ComputationTape::new();
        let input = tape.leaf_from(vec![1, 1, 8, 8], blended.data().to_vec(), true);
        let logits = net.logits(&mut tape, input).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let direct = tape.grad(input).unwrap();
        for (&a, &b) in g.data().iter().zip(direct) {
            assert_eq!(a, b / (1.0 + beta));
        }
    }

    #[test]
    fn eot_resample_changes_the_trajectory() {
        let img = test_image(10, 6);
        let net = small_net(8, 9);
        let icfg = InterferenceConfig::new(0.5, 0.4, 0.4, 4, 6).unwrap();
        let bgs = generate_backgrounds(4, 1, 8, 8, 6).unwrap();
        let fixed = AttackConfig::new(8.0 / 255.0, 6, AttackMode::Inn1, 23).unwrap();
        let mut eot = fixed.clone();
        eot.eot_resample = true;
        let a = pgd(&img, 1, &net, &fixed, &icfg, &bgs).unwrap();
        let b = pgd(&img, 1, &net, &eot, &icfg, &bgs).unwrap();
        assert_ne!(a.perturbed.pixels.data(), b.perturbed.pixels.data());
    }

    #[test]
    fn adv_set_round_trips() {
        let img = test_image(12, 7);
        let net = small_net(4, 10);
        let icfg = InterferenceConfig::identity(1);
        let bgs = generate_backgrounds(1, 1, 8, 8, 1).unwrap();
        let cfg = AttackConfig::new(2.0 / 255.0, 3, AttackMode::Inn2, 31).unwrap();
        let adv = pgd(&img, 0, &net, &cfg, &icfg, &bgs).unwrap();
        let set = AdversarialSet::from_examples(&cfg, &[adv]).unwrap();
        let bytes = set.encode();
        let back = AdversarialSet::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.records.len(), 1);
        assert_eq!(back.records[0].0, 7);
        assert_eq!(back.records[0].1.data(), set.records[0].1.data());

        let truncated = &bytes[..bytes.len() - 3];
        match AdversarialSet::decode(truncated) {
            Err(Error::AdvSet(m)) => assert!(m.contains("pixels"), "{m}"),
            other => panic!("expected AdvSet error, got {other:?}"),
        }
    }

    #[test]
    fn constraint_violations_are_rejected() {
        let img = test_image(13, 8);
        let mut bad = img.pixels.clone();
        bad.data_mut()[0] = (img.pixels.data()[0] + 0.5).min(1.0);
        assert!(AdversarialExample::new(
            img.clone(),
            bad,
            0.01,
            AttackMode::Inn2,
            0.0
        )
        .is_err());
    }
}
