use innlab_core::model::clean_accuracy;
use innlab_core::rng::split;
use innlab_core::{
    evaluate, finetune_inn, generate_backgrounds, load_checkpoint, transfer_expand, EvalInputs,
    InterferenceConfig, SnapshotSet, TrainConfig,
};

#[test]
#[ignore]
fn schedule_probe() {
    let dseed = "glyphs:train=2048,test=512,size=12"
        .bytes()
        .fold(0x6461_7461u64, |s, b| split(s, u64::from(b)));
    let dataset = innlab_core::dataset::synthetic_glyphs(2048, 12, "train", dseed).unwrap();
    let test = innlab_core::dataset::synthetic_glyphs(512, 12, "test", dseed).unwrap();
    let pre = load_checkpoint(std::path::Path::new("/tmp/c5/snapshots/pretrain.innc"))
        .unwrap()
        .to_model()
        .unwrap();
    println!("pretrain clean {:.4}", clean_accuracy(&pre, &test).unwrap());

    let seed = 1u64;
    let bgs = generate_backgrounds(8, 1, 12, 12, split(seed, 6)).unwrap();
    let mut model = transfer_expand(&pre, dataset.n_classes, 8, 0.02, seed).unwrap();

    // Curriculum phases: (gamma, epochs, batch, lr, wd); alpha/beta/k fixed.
    let phases: &[(f32, usize, usize, f32, f32)] = &[
        (0.0, 5, 32, 0.005, 5e-4),
        (0.2, 5, 32, 0.003, 1e-4),
        (0.4, 12, 64, 0.003, 1e-4),
        (0.4, 12, 64, 0.0015, 1e-4),
        (0.4, 4, 64, 0.0008, 1e-4),
    ];
    let full = InterferenceConfig::new(0.5, 0.4, 0.4, 8, seed).unwrap();
    let mut last: Option<SnapshotSet> = None;
    let t0 = std::time::Instant::now();
    for (pi, &(gamma, epochs, batch, lr, wd)) in phases.iter().enumerate() {
        let icfg = InterferenceConfig::new(0.5, 0.4, gamma, 8, seed).unwrap();
        let tcfg = TrainConfig::new(batch, 0.9, wd, lr, epochs, split(seed, 100 + pi as u64))
            .unwrap();
        let (set, report) = finetune_inn(model, &dataset, &icfg, &tcfg, &bgs).unwrap();
        println!(
            "phase {pi} (gamma {gamma}, lr {lr}): init {:.4} losses {:?}",
            report.initial_loss,
            report
                .epoch_mean_losses
                .iter()
                .map(|l| (l * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
        model = set.model_for(set.len() - 1).unwrap();
        last = Some(set);
    }
    println!("finetune wall {:.1}s", t0.elapsed().as_secs_f64());

    let set = last.unwrap();
    let subset = test.subset_seeded(256, split(seed, 5)).unwrap();
    let res = evaluate(&EvalInputs::Clean(&subset), &set, &full, &bgs, split(seed, 7)).unwrap();
    println!("defended clean (last {} snapshots) {:.4}", set.len(), res.accuracy);
}
