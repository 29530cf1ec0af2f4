//! Experiment configuration: a flat `key = value` file with `#` comments,
//! plus the named presets. Rendering writes every field, so
//! `parse(render(c)) == c` holds for any config.

use std::fmt::Write as _;

use innlab_core::{AttackMode, InterferenceConfig, Result, TrainConfig};

/// On-disk dataset encodings the loaders understand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Spec string like `glyphs:train=2048,test=512,size=12`; no files read.
    Synthetic,
    /// MNIST-style IDX pair per split in a directory.
    Idx,
    /// CIFAR-10 binary batches in a directory.
    Cifar,
}

impl DatasetFormat {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetFormat::Synthetic => "synthetic",
            DatasetFormat::Idx => "idx",
            DatasetFormat::Cifar => "cifar",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "synthetic" => Ok(DatasetFormat::Synthetic),
            "idx" => Ok(DatasetFormat::Idx),
            "cifar" => Ok(DatasetFormat::Cifar),
            other => Err(config_err(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Everything a run needs, in one place. Epsilons are stored as decimals
/// regardless of how they were written.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub dataset: String,
    pub format: DatasetFormat,
    pub seed: u64,
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub k: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub jitter_std: f32,
    pub attack_epsilon: f64,
    pub attack_iterations: usize,
    pub attack_mode: AttackMode,
    pub attack_snapshot: usize,
    pub eval_count: usize,
    pub eps_grid: Vec<f64>,
    pub out: String,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: identity interference, PGD-50, a 1000-image
    /// seeded evaluation subset, and the /255 grid used by the curves.
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            dataset: "glyphs:train=2048,test=512,size=12".into(),
            format: DatasetFormat::Synthetic,
            seed: 7,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            k: 1,
            pretrain_epochs: 6,
            finetune_epochs: 4,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            jitter_std: 0.01,
            attack_epsilon: 0.3,
            attack_iterations: 50,
            attack_mode: AttackMode::Inn1,
            attack_snapshot: 2,
            eval_count: 1000,
            eps_grid: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
            out: "runs/default".into(),
        }
    }
}

/// The four published operating points.
pub const PRESETS: [(&str, (f32, f32, f32, usize)); 4] = [
    ("fig3-blue", (0.5, 0.4, 0.4, 8)),
    ("fig3-green", (0.3, 0.3, 0.4, 4)),
    ("fig3-red", (0.2, 0.3, 0.2, 4)),
    ("fig3-purple", (0.1, 0.1, 0.1, 8)),
];

impl ExperimentConfig {
    /// Expands a preset name into its exact (alpha, beta, gamma, K) tuple.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (_, (alpha, beta, gamma, k)) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| config_err(format!("unknown preset `{name}`")))?;
        self.preset = Some(name.to_string());
        self.alpha = *alpha;
        self.beta = *beta;
        self.gamma = *gamma;
        self.k = *k;
        Ok(())
    }

    pub fn interference(&self) -> Result<InterferenceConfig> {
        InterferenceConfig::new(self.alpha, self.beta, self.gamma, self.k, self.seed)
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> Result<TrainConfig> {
        TrainConfig::new(
            self.batch_size,
            self.momentum,
            self.weight_decay,
            self.learning_rate,
            epochs,
            seed,
        )
    }

    /// Flat `key = value` text with every field present.
    pub fn render(&self) -> String {
        let mut s = String::from("# innlab experiment config\n");
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset = {p}");
        }
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "format = {}", self.format.tag());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "pretrain_epochs = {}", self.pretrain_epochs);
        let _ = writeln!(s, "finetune_epochs = {}", self.finetune_epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "jitter_std = {}", self.jitter_std);
        let _ = writeln!(s, "attack_epsilon = {}", self.attack_epsilon);
        let _ = writeln!(s, "attack_iterations = {}", self.attack_iterations);
        let _ = writeln!(s, "attack_mode = {}", self.attack_mode.tag());
        let _ = writeln!(s, "attack_snapshot = {}", self.attack_snapshot);
        let _ = writeln!(s, "eval_count = {}", self.eval_count);
        let grid: Vec<String> = self.eps_grid.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(s, "eps_grid = {}", grid.join(","));
        let _ = writeln!(s, "out = {}", self.out);
        s
    }

    /// Parses config text over the defaults. Unknown keys and malformed
    /// values are errors; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: `{raw}` has no `=`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| config_err(format!("line {}: {what}", lineno + 1));
            match key {
                "preset" => cfg.preset = Some(value.to_string()),
                "dataset" => cfg.dataset = value.to_string(),
                "format" => cfg.format = DatasetFormat::from_tag(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed is not a u64"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("alpha is not a float"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad("beta is not a float"))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad("gamma is not a float"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("k is not an integer"))?,
                "pretrain_epochs" => {
                    cfg.pretrain_epochs =
                        value.parse().map_err(|_| bad("pretrain_epochs is not an integer"))?
                }
                "finetune_epochs" => {
                    cfg.finetune_epochs =
                        value.parse().map_err(|_| bad("finetune_epochs is not an integer"))?
                }
                "batch_size" => {
                    cfg.batch_size =
                        value.parse().map_err(|_| bad("batch_size is not an integer"))?
                }
                "learning_rate" => {
                    cfg.learning_rate =
                        value.parse().map_err(|_| bad("learning_rate is not a float"))?
                }
                "momentum" => {
                    cfg.momentum = value.parse().map_err(|_| bad("momentum is not a float"))?
                }
                "weight_decay" => {
                    cfg.weight_decay =
                        value.parse().map_err(|_| bad("weight_decay is not a float"))?
                }
                "jitter_std" => {
                    cfg.jitter_std =
                        value.parse().map_err(|_| bad("jitter_std is not a float"))?
                }
                "attack_epsilon" => cfg.attack_epsilon = parse_epsilon(value)?,
                "attack_iterations" => {
                    cfg.attack_iterations =
                        value.parse().map_err(|_| bad("attack_iterations is not an integer"))?
                }
                "attack_mode" => cfg.attack_mode = parse_attack_mode(value)?,
                "attack_snapshot" => {
                    cfg.attack_snapshot =
                        value.parse().map_err(|_| bad("attack_snapshot is not an integer"))?
                }
                "eval_count" => {
                    cfg.eval_count =
                        value.parse().map_err(|_| bad("eval_count is not an integer"))?
                }
                "eps_grid" => cfg.eps_grid = parse_eps_grid(value)?,
                "out" => cfg.out = value.to_string(),
                other => return Err(config_err(format!("unknown config key `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

pub fn parse_attack_mode(s: &str) -> Result<AttackMode> {
    match s {
        "inn1" => Ok(AttackMode::Inn1),
        "inn2" => Ok(AttackMode::Inn2),
        other => Err(config_err(format!("unknown attack mode `{other}`"))),
    }
}

/// One epsilon: `a/b` fractions and decimals read as written; bare integers
/// are /255 units, matching how the curves are quoted.
pub fn parse_epsilon(s: &str) -> Result<f64> {
    let s = s.trim();
    let value = if let Some((num, den)) = s.split_once('/') {
        let num: f64 =
            num.trim().parse().map_err(|_| config_err(format!("bad epsilon `{s}`")))?;
        let den: f64 =
            den.trim().parse().map_err(|_| config_err(format!("bad epsilon `{s}`")))?;
        if den == 0.0 {
            return Err(config_err(format!("epsilon `{s}` divides by zero")));
        }
        num / den
    } else if s.contains('.') || s.contains('e') || s.contains('E') {
        s.parse().map_err(|_| config_err(format!("bad epsilon `{s}`")))?
    } else {
        let k: f64 = s.parse().map_err(|_| config_err(format!("bad epsilon `{s}`")))?;
        k / 255.0
    };
    if !(0.0..=1.0).contains(&value) {
        return Err(config_err(format!("epsilon `{s}` is outside [0,1]")));
    }
    Ok(value)
}

/// Comma-separated epsilons.
pub fn parse_eps_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_epsilon).collect()
}

fn config_err(msg: String) -> innlab_core::Error {
    innlab_core::Error::Config(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand_to_the_published_tuples() {
        for (name, (alpha, beta, gamma, k)) in PRESETS {
            let mut cfg = ExperimentConfig::default();
            cfg.apply_preset(name).unwrap();
            assert_eq!(
                (cfg.alpha, cfg.beta, cfg.gamma, cfg.k),
                (alpha, beta, gamma, k),
                "{name}"
            );
            assert_eq!(cfg.preset.as_deref(), Some(name));
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_preset("fig3-teal").is_err());
    }

    #[test]
    fn render_parse_round_trips_all_presets() {
        for (name, _) in PRESETS {
            let mut cfg = ExperimentConfig::default();
            cfg.apply_preset(name).unwrap();
            cfg.out = format!("runs/{name}");
            let back = ExperimentConfig::parse(&cfg.render()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn render_parse_round_trips_a_modified_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 41;
        cfg.attack_epsilon = 16.0 / 255.0;
        cfg.eps_grid = vec![0.0, 1.0 / 255.0, 0.125];
        cfg.attack_mode = AttackMode::Inn2;
        cfg.format = DatasetFormat::Idx;
        cfg.dataset = "data/mnist".into();
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn epsilons_accept_fractions_decimals_and_255_units() {
        assert_eq!(parse_epsilon("16/255").unwrap(), 16.0 / 255.0);
        assert_eq!(parse_epsilon("0.3").unwrap(), 0.3);
        assert_eq!(parse_epsilon("8").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_epsilon("0").unwrap(), 0.0);
        assert_eq!(parse_epsilon("1e-2").unwrap(), 0.01);
        assert!(parse_epsilon("2.0").is_err());
        assert!(parse_epsilon("300").is_err());
        assert!(parse_epsilon("-1").is_err());
        assert!(parse_epsilon("1/0").is_err());
        assert!(parse_epsilon("abc").is_err());
    }

    #[test]
    fn eps_grid_parses_the_curve_example() {
        let grid = parse_eps_grid("0,2,4,8,16").unwrap();
        assert_eq!(
            grid,
            vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0]
        );
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "# comment\n\n  seed =  9 \nalpha= 0.25\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 0.25);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("volume = 11\n").is_err());
    }
}
