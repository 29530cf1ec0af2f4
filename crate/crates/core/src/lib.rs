//! Interference-network robustness laboratory: core library.
//!
//! Everything here is deterministic by construction. Random draws come from
//! splittable counter-based streams ([`rng`]), numeric kernels use fixed
//! accumulation orders ([`kernels`]), and parallelism only ever distributes
//! independent work items, so identical seeds give bit-identical results
//! regardless of thread count.

pub mod attack;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod interference;
pub mod model;
mod kernels;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use attack::{
    attack_dataset, attack_gradient, fgsm, pgd, AdversarialExample, AdversarialSet,
    AttackConfig, AttackMode, AttackTarget,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use dataset::DatasetHandle;
pub use ensemble::{
    defended_predict, evaluate, evaluate_undefended, robustness_curve, ClassDistribution,
    CurveMode, CurveRow, EvalInputs, EvalRecord, EvalResult, RobustnessCurve,
};
pub use error::{CheckpointError, Error, Result};
pub use gradcheck::grad_check;
pub use interference::{
    apply_interference, decode_label, encode_label, generate_backgrounds, Background,
    BlendedInput, Image, InterferenceConfig, NoiseRealization,
};
pub use model::{
    finetune_inn, pretrain, transfer_expand, SmallConvNet, SnapshotMeta, SnapshotSet,
    TrainConfig, TrainReport,
};
pub use optim::{sgd_momentum_step, SgdState};
pub use tape::{ComputationTape, TensorId};
pub use tensor::Tensor;
