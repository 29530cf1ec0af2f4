//! Defended inference and evaluation: per-snapshot forward passes on one
//! blended input, uniform soft voting, base-class marginalization, and the
//! robustness-vs-epsilon curve.

use rayon::prelude::*;

use crate::attack::{attack_dataset, AdversarialSet, AttackConfig, AttackMode};
use crate::dataset::DatasetHandle;
use crate::error::{Error, Result};
use crate::interference::{
    apply_interference, Background, Image, InterferenceConfig, NoiseRealization,
};
use crate::model::{SmallConvNet, SnapshotSet};
use crate::tensor::Tensor;

const LANE_EVAL: u64 = 0x6576_616c;

/// A softmax distribution over the N*K composite space.
#[derive(Debug, Clone)]
pub struct ClassDistribution {
    pub probs: Vec<f32>,
    pub n: usize,
    pub k: usize,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f32>, n: usize, k: usize) -> Result<Self> {
        if probs.len() != n * k {
            return Err(Error::Dimension {
                op: "class_distribution",
                detail: format!("{} probabilities for {n} x {k} classes", probs.len()),
            });
        }
        if let Some(p) = probs.iter().find(|&&p| !(0.0..=1.0 + 1e-5).contains(&p)) {
            return Err(Error::Contract(format!("probability {p} outside [0,1]")));
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("probabilities sum to {sum}")));
        }
        Ok(ClassDistribution { probs, n, k })
    }

    /// P(base c) = sum over k of P(composite (c, k)), accumulated in f64.
    pub fn marginalize(&self) -> Vec<f64> {
        (0..self.n)
            .map(|c| (0..self.k).map(|ki| self.probs[c * self.k + ki] as f64).sum())
            .collect()
    }

    /// Argmax base class; exact ties resolve to the smallest index.
    pub fn top_base_class(&self) -> (usize, f64) {
        let marginal = self.marginalize();
        let mut best = 0usize;
        for c in 1..marginal.len() {
            if marginal[c] > marginal[best] {
                best = c;
            }
        }
        (best, marginal[best])
    }
}

fn check_meta(snapshots: &SnapshotSet, icfg: &InterferenceConfig) -> Result<()> {
    if snapshots.is_empty() {
        return Err(Error::Config("snapshot set is empty".into()));
    }
    if snapshots.meta.icfg != *icfg {
        return Err(Error::Config(format!(
            "interference config {:?} does not match snapshot metadata {:?}",
            icfg, snapshots.meta.icfg
        )));
    }
    Ok(())
}

/// Uniform average of per-snapshot probability rows, in snapshot order.
fn soft_vote(rows: &[Vec<f32>]) -> Vec<f32> {
    let len = rows[0].len();
    let mut avg = vec![0.0f32; len];
    for j in 0..len {
        let mut acc = 0.0f64;
        for row in rows {
            acc += row[j] as f64;
        }
        avg[j] = (acc / rows.len() as f64) as f32;
    }
    avg
}

/// Defended prediction for one image: draw the defender's own realization,
/// blend once, run every snapshot on the same blended input, soft-vote,
/// marginalize.
pub fn defended_predict(
    x: &Image,
    snapshots: &SnapshotSet,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
    seed: u64,
) -> Result<(usize, ClassDistribution)> {
    check_meta(snapshots, icfg)?;
    let r = NoiseRealization::draw(
        crate::rng::split(seed, LANE_EVAL),
        x.id,
        0,
        x.pixels.shape(),
        icfg.gamma,
        icfg.k,
    )?;
    let blended = apply_interference(&x.pixels, icfg, backgrounds, &r)?;
    let shape = blended.pixels.shape();
    let batch = Tensor::from_vec(
        vec![1, shape[0], shape[1], shape[2]],
        blended.pixels.data().to_vec(),
    )?;
    let mut rows = Vec::with_capacity(snapshots.len());
    for i in 0..snapshots.len() {
        let model = snapshots.model_for(i)?;
        rows.push(model.infer_probs(&batch)?.data().to_vec());
    }
    let dist = ClassDistribution::new(soft_vote(&rows), snapshots.meta.n, snapshots.meta.k)?;
    let (base, _) = dist.top_base_class();
    Ok((base, dist))
}

/// What to evaluate: clean dataset images, or an adversarial set whose
/// labels come from the originating dataset by image id.
pub enum EvalInputs<'a> {
    Clean(&'a DatasetHandle),
    Adversarial(&'a AdversarialSet, &'a DatasetHandle),
}

impl EvalInputs<'_> {
    /// Materializes (image, label) pairs in evaluation order.
    fn items(&self) -> Result<Vec<(Image, u32)>> {
        match self {
            EvalInputs::Clean(d) => Ok(d
                .images
                .iter()
                .zip(&d.labels)
                .map(|(img, &l)| (img.clone(), l))
                .collect()),
            EvalInputs::Adversarial(set, d) => set
                .records
                .iter()
                .map(|(id, pixels)| {
                    let label = d.label_of_id(*id as u64).ok_or_else(|| {
                        Error::Label(format!("no label for adversarial image id {id}"))
                    })?;
                    Ok((Image::new(pixels.clone(), *id as u64)?, label))
                })
                .collect(),
        }
    }
}

/// One evaluated image.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: u64,
    pub true_label: u32,
    pub predicted: usize,
    pub max_prob: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalResult {
    fn from_records(records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("evaluation over zero images".into()));
        }
        let correct = records.iter().filter(|r| r.predicted == r.true_label as usize).count();
        Ok(EvalResult { accuracy: correct as f64 / records.len() as f64, records })
    }

    /// Line-delimited `id,true,pred,maxprob` records.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                r.id, r.true_label, r.predicted, r.max_prob
            ));
        }
        out
    }
}

/// Top-1 base-class accuracy of the defended ensemble. Images are
/// independent jobs; records come back in input order.
pub fn evaluate(
    inputs: &EvalInputs,
    snapshots: &SnapshotSet,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
    seed: u64,
) -> Result<EvalResult> {
    check_meta(snapshots, icfg)?;
    let items = inputs.items()?;
    let records: Vec<EvalRecord> = items
        .par_iter()
        .map(|(img, label)| {
            let (predicted, dist) = defended_predict(img, snapshots, icfg, backgrounds, seed)?;
            let (_, max_prob) = dist.top_base_class();
            Ok(EvalRecord { id: img.id, true_label: *label, predicted, max_prob })
        })
        .collect::<Result<_>>()?;
    EvalResult::from_records(records)
}

/// Raw, undefended Top-1 accuracy of a single model on the same inputs.
pub fn evaluate_undefended(model: &SmallConvNet, inputs: &EvalInputs) -> Result<EvalResult> {
    let items = inputs.items()?;
    let records: Vec<EvalRecord> = items
        .par_iter()
        .map(|(img, label)| {
            let shape = img.pixels.shape();
            let batch = Tensor::from_vec(
                vec![1, shape[0], shape[1], shape[2]],
                img.pixels.data().to_vec(),
            )?;
            let probs = model.infer_probs(&batch)?;
            let row = probs.data();
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            Ok(EvalRecord {
                id: img.id,
                true_label: *label,
                predicted: best,
                max_prob: row[best] as f64,
            })
        })
        .collect::<Result<_>>()?;
    EvalResult::from_records(records)
}

/// Curve modes: the undefended baseline under plain PGD, or the defended
/// pipeline under one of the two gradient modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMode {
    Undefended,
    Inn1,
    Inn2,
}

impl CurveMode {
    pub fn tag(self) -> &'static str {
        match self {
            CurveMode::Undefended => "undefended",
            CurveMode::Inn1 => "inn1",
            CurveMode::Inn2 => "inn2",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub epsilon: f64,
    pub mode: CurveMode,
    pub top1_base_accuracy: f64,
    pub n_images: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RobustnessCurve {
    pub rows: Vec<CurveRow>,
}

impl RobustnessCurve {
    /// CSV per the external interface: floats with six decimals, rows
    /// sorted by (mode, epsilon).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,mode,top1_base_accuracy,n_images,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.6},{},{:.6},{},{}\n",
                r.epsilon,
                r.mode.tag(),
                r.top1_base_accuracy,
                r.n_images,
                r.seed
            ));
        }
        out
    }
}

/// Full curve: for each (mode, epsilon), attack (epsilon zero means clean)
/// and evaluate. The baseline model is required for the undefended mode and
/// as the attack surface for defended modes is the configured snapshot.
#[allow(clippy::too_many_arguments)]
pub fn robustness_curve(
    epsilon_grid: &[f64],
    modes: &[CurveMode],
    snapshots: &SnapshotSet,
    icfg: &InterferenceConfig,
    backgrounds: &[Background],
    template: &AttackConfig,
    baseline: Option<&SmallConvNet>,
    eval_set: &DatasetHandle,
    seed: u64,
) -> Result<RobustnessCurve> {
    if epsilon_grid.is_empty() {
        return Err(Error::Config("epsilon grid is empty".into()));
    }
    let mut grid = epsilon_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite epsilons"));
    if grid.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("epsilon grid has duplicates".into()));
    }
    check_meta(snapshots, icfg)?;
    if snapshots.len() <= template.attack_snapshot_index {
        return Err(Error::Config(format!(
            "attack snapshot {} of {}",
            template.attack_snapshot_index,
            snapshots.len()
        )));
    }
    let identity = InterferenceConfig::identity(icfg.master_seed);
    let mut rows = Vec::new();
    for &mode in modes {
        let attacked_model = match mode {
            CurveMode::Undefended => baseline
                .ok_or_else(|| {
                    Error::Config("undefended mode needs the baseline model".into())
                })?
                .clone(),
            _ => snapshots.model_for(template.attack_snapshot_index)?,
        };
        for &eps in &grid {
            let eval_seed = crate::rng::split(crate::rng::split(seed, mode as u64), eps.to_bits());
            let accuracy = if eps == 0.0 {
                match mode {
                    CurveMode::Undefended => {
                        evaluate_undefended(&attacked_model, &EvalInputs::Clean(eval_set))?
                            .accuracy
                    }
                    _ => evaluate(
                        &EvalInputs::Clean(eval_set),
                        snapshots,
                        icfg,
                        backgrounds,
                        eval_seed,
                    )?
                    .accuracy,
                }
            } else {
                let mut cfg = template.clone();
                cfg.epsilon = eps;
                match mode {
                    CurveMode::Undefended => {
                        cfg.mode = AttackMode::Inn2;
                        let examples =
                            attack_dataset(eval_set, &attacked_model, &cfg, &identity, &[])?;
                        let set = AdversarialSet::from_examples(&cfg, &examples)?;
                        evaluate_undefended(
                            &attacked_model,
                            &EvalInputs::Adversarial(&set, eval_set),
                        )?
                        .accuracy
                    }
                    CurveMode::Inn1 | CurveMode::Inn2 => {
                        cfg.mode = match mode {
                            CurveMode::Inn1 => AttackMode::Inn1,
                            _ => AttackMode::Inn2,
                        };
                        let examples =
                            attack_dataset(eval_set, &attacked_model, &cfg, icfg, backgrounds)?;
                        let set = AdversarialSet::from_examples(&cfg, &examples)?;
                        evaluate(
                            &EvalInputs::Adversarial(&set, eval_set),
                            snapshots,
                            icfg,
                            backgrounds,
                            eval_seed,
                        )?
                        .accuracy
                    }
                }
            };
            rows.push(CurveRow {
                epsilon: eps,
                mode,
                top1_base_accuracy: accuracy,
                n_images: eval_set.len(),
                seed,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.mode
            .tag()
            .cmp(b.mode.tag())
            .then(a.epsilon.partial_cmp(&b.epsilon).expect("finite epsilons"))
    });
    Ok(RobustnessCurve { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_blobs;
    use crate::interference::generate_backgrounds;
    use crate::model::{finetune_inn, pretrain, transfer_expand, TrainConfig};
    use crate::rng::StreamRng;

    fn toy_snapshots(k: usize, epochs: usize) -> (SnapshotSet, Vec<Background>, DatasetHandle) {
        let train = two_blobs(16, 12, "train", 3).unwrap();
        let icfg = InterferenceConfig::new(0.2, 0.2, 0.1, k, 5).unwrap();
        let backgrounds = generate_backgrounds(k, 1, 12, 12, 5).unwrap();
        let tcfg = TrainConfig::new(16, 0.9, 5e-4, 0.02, epochs, 9).unwrap();
        let (model, _) = pretrain(&train, &TrainConfig::new(16, 0.9, 5e-4, 0.05, 2, 1).unwrap(), 2)
            .unwrap();
        let expanded = transfer_expand(&model, 2, k, 0.01, 7).unwrap();
        let (set, _) = finetune_inn(expanded, &train, &icfg, &tcfg, &backgrounds).unwrap();
        (set, backgrounds, train)
    }

    #[test]
    fn marginalization_matches_brute_force() {
        let mut rng = StreamRng::new(1, &[2]);
        for _ in 0..50 {
            let (n, k) = (1 + rng.next_below(5), 1 + rng.next_below(4));
            let mut raw: Vec<f32> = (0..n * k).map(|_| rng.next_f32() + 1e-3).collect();
            let sum: f64 = raw.iter().map(|&v| v as f64).sum();
            for v in &mut raw {
                *v = (*v as f64 / sum) as f32;
            }
            let dist = ClassDistribution::new(raw.clone(), n, k).unwrap();
            let marginal = dist.marginalize();
            let total: f64 = marginal.iter().sum();
            assert!((total - 1.0).abs() < 1e-5, "marginal total {total}");
            for c in 0..n {
                let brute: f64 =
                    raw.iter().enumerate().filter(|(i, _)| i / k == c).map(|(_, &v)| v as f64).sum();
                assert!((marginal[c] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn within_class_permutation_leaves_marginals_unchanged() {
        let mut rng = StreamRng::new(4, &[1]);
        let (n, k) = (3, 4);
        let mut raw: Vec<f32> = (0..n * k).map(|_| rng.next_f32() + 1e-3).collect();
        let sum: f64 = raw.iter().map(|&v| v as f64).sum();
        for v in &mut raw {
            *v = (*v as f64 / sum) as f32;
        }
        let dist = ClassDistribution::new(raw.clone(), n, k).unwrap();
        let mut permuted = raw.clone();
        for c in 0..n {
            permuted[c * k..(c + 1) * k].reverse();
        }
        let dist_p = ClassDistribution::new(permuted, n, k).unwrap();
        for (a, b) in dist.marginalize().iter().zip(dist_p.marginalize()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(dist.top_base_class().0, dist_p.top_base_class().0);
    }

    #[test]
    fn ties_break_to_smallest_index() {
        let dist = ClassDistribution::new(vec![0.25, 0.25, 0.25, 0.25], 2, 2).unwrap();
        assert_eq!(dist.top_base_class().0, 0);
    }

    #[test]
    fn rejects_unnormalized_distributions() {
        assert!(ClassDistribution::new(vec![0.6, 0.6], 2, 1).is_err());
        assert!(ClassDistribution::new(vec![0.5, 0.5, 0.0], 2, 1).is_err());
    }

    #[test]
    fn single_snapshot_vote_is_that_snapshot() {
        let (mut set, backgrounds, data) = toy_snapshots(2, 1);
        assert_eq!(set.len(), 1);
        let icfg = set.meta.icfg.clone();
        let img = &data.images[0];
        let (pred, dist) = defended_predict(img, &set, &icfg, &backgrounds, 42).unwrap();

        // Rebuild the same blended input and compare against the lone model.
        let r = NoiseRealization::draw(
            crate::rng::split(42, LANE_EVAL),
            img.id,
            0,
            img.pixels.shape(),
            icfg.gamma,
            icfg.k,
        )
        .unwrap();
        let blended = apply_interference(&img.pixels, &icfg, &backgrounds, &r).unwrap();
        let batch =
            Tensor::from_vec(vec![1, 1, 12, 12], blended.pixels.data().to_vec()).unwrap();
        let model = set.model_for(0).unwrap();
        let own = model.infer_probs(&batch).unwrap();
        assert_eq!(dist.probs, own.data());

        // Duplicating the snapshot leaves the averaged distribution intact.
        set.snapshots.push(set.snapshots[0].clone());
        let (pred2, dist2) = defended_predict(img, &set, &icfg, &backgrounds, 42).unwrap();
        assert_eq!(pred, pred2);
        assert_eq!(dist.probs, dist2.probs);
    }

    #[test]
    fn evaluate_counts_and_logs() {
        let (set, backgrounds, data) = toy_snapshots(2, 2);
        let icfg = set.meta.icfg.clone();
        let result =
            evaluate(&EvalInputs::Clean(&data), &set, &icfg, &backgrounds, 1).unwrap();
        assert_eq!(result.records.len(), data.len());
        let manual = result
            .records
            .iter()
            .filter(|r| r.predicted == r.true_label as usize)
            .count() as f64
            / data.len() as f64;
        assert_eq!(result.accuracy, manual);
        let log = result.to_log();
        assert_eq!(log.lines().count(), data.len());
        assert!(log.lines().next().unwrap().split(',').count() == 4);
    }

    #[test]
    fn evaluate_rejects_empty_and_unknown_ids() {
        let (set, backgrounds, data) = toy_snapshots(2, 1);
        let icfg = set.meta.icfg.clone();
        let adv = AdversarialSet {
            epsilon: 0.01,
            iterations: 1,
            mode: AttackMode::Inn2,
            snapshot_index: 0,
            seed: 0,
            image_shape: [1, 12, 12],
            records: vec![(999, data.images[0].pixels.clone())],
        };
        match evaluate(
            &EvalInputs::Adversarial(&adv, &data),
            &set,
            &icfg,
            &backgrounds,
            0,
        ) {
            Err(Error::Label(m)) => assert!(m.contains("999")),
            other => panic!("expected Label error, got {other:?}"),
        }

        let empty = AdversarialSet { records: vec![], ..adv };
        assert!(evaluate(
            &EvalInputs::Adversarial(&empty, &data),
            &set,
            &icfg,
            &backgrounds,
            0
        )
        .is_err());
    }

    #[test]
    fn curve_zero_epsilon_equals_clean_accuracy() {
        let (set, backgrounds, data) = toy_snapshots(2, 2);
        let icfg = set.meta.icfg.clone();
        let (baseline, _) =
            pretrain(&data, &TrainConfig::new(16, 0.9, 5e-4, 0.05, 2, 1).unwrap(), 2).unwrap();
        let mut template = AttackConfig::new(0.05, 2, AttackMode::Inn1, 3).unwrap();
        template.attack_snapshot_index = 1;
        let curve = robustness_curve(
            &[0.0, 2.0 / 255.0],
            &[CurveMode::Undefended, CurveMode::Inn1],
            &set,
            &icfg,
            &backgrounds,
            &template,
            Some(&baseline),
            &data,
            5,
        )
        .unwrap();
        assert_eq!(curve.rows.len(), 4);
        let clean_undef = evaluate_undefended(&baseline, &EvalInputs::Clean(&data))
            .unwrap()
            .accuracy;
        let row = curve
            .rows
            .iter()
            .find(|r| r.mode == CurveMode::Undefended && r.epsilon == 0.0)
            .unwrap();
        assert_eq!(row.top1_base_accuracy, clean_undef);

        let eval_seed = crate::rng::split(
            crate::rng::split(5, CurveMode::Inn1 as u64),
            0.0f64.to_bits(),
        );
        let clean_inn = evaluate(&EvalInputs::Clean(&data), &set, &icfg, &backgrounds, eval_seed)
            .unwrap()
            .accuracy;
        let row = curve
            .rows
            .iter()
            .find(|r| r.mode == CurveMode::Inn1 && r.epsilon == 0.0)
            .unwrap();
        assert_eq!(row.top1_base_accuracy, clean_inn);
    }

    #[test]
    fn curve_csv_is_sorted_and_formatted() {
        let rows = vec![
            CurveRow {
                epsilon: 0.0,
                mode: CurveMode::Undefended,
                top1_base_accuracy: 0.5,
                n_images: 10,
                seed: 1,
            },
            CurveRow {
                epsilon: 2.0 / 255.0,
                mode: CurveMode::Inn1,
                top1_base_accuracy: 1.0,
                n_images: 10,
                seed: 1,
            },
        ];
        let csv = RobustnessCurve { rows }.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epsilon,mode,top1_base_accuracy,n_images,seed");
        assert_eq!(lines.next().unwrap(), "0.000000,undefended,0.500000,10,1");
        assert_eq!(lines.next().unwrap(), "0.007843,inn1,1.000000,10,1");
    }

    #[test]
    fn curve_rejects_duplicate_epsilons() {
        let (set, backgrounds, data) = toy_snapshots(2, 1);
        let icfg = set.meta.icfg.clone();
        let mut template = AttackConfig::new(0.05, 1, AttackMode::Inn1, 3).unwrap();
        template.attack_snapshot_index = 0;
        assert!(robustness_curve(
            &[0.0, 0.0],
            &[CurveMode::Inn2],
            &set,
            &icfg,
            &backgrounds,
            &template,
            None,
            &data,
            5,
        )
        .is_err());
    }
}
