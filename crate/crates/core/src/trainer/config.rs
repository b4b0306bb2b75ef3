use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ActiveTerms;
use crate::nn::Arch;
use crate::refinement::{KlForm, Perturbation};

/// Ablation arms. `Alc` is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Alc,
    AlcNoLs,
    AlcNoLr,
    Mt,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Mt, TrainMode::AlcNoLs, TrainMode::AlcNoLr, TrainMode::Alc];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Alc => "alc",
            TrainMode::AlcNoLs => "alc-no-ls",
            TrainMode::AlcNoLr => "alc-no-lr",
            TrainMode::Mt => "mt",
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            disable_ls: *self == TrainMode::AlcNoLs,
            disable_lr: *self == TrainMode::AlcNoLr,
            mt_baseline: *self == TrainMode::Mt,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// All refined samples go to the selected loss; the residual is empty.
    pub disable_ls: bool,
    /// Argmax of one teacher pass replaces the uncertainty-weighted fusion.
    pub disable_lr: bool,
    /// Only the HQ loss and the consistency loss are trained.
    pub mt_baseline: bool,
}

/// Targets of the residual (non-selected) LQ samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualTargets {
    #[default]
    Refined,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub hq_batch: usize,
    pub lq_batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// EMA decay of the teacher.
    pub gamma: f64,
    /// Perturbed teacher passes per LQ sample.
    pub m: usize,
    pub sigma: f64,
    pub use_noise: bool,
    pub use_dropout: bool,
    pub k_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Ramp-up horizon; `None` means 40% of `steps`.
    pub t_ramp: Option<usize>,
    pub ablation: Ablation,
    pub residual_targets: ResidualTargets,
    pub kl_form: KlForm,
    pub master_seed: u64,
    /// Evaluate (and checkpoint) every this many steps; 0 evaluates only
    /// at the end.
    pub eval_every: usize,
    /// Measure refined-label quality on LQ training samples at each eval.
    pub track_label_quality: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::desk(2),
            hq_batch: 4,
            lq_batch: 8,
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            gamma: 0.99,
            m: 8,
            sigma: 0.05,
            use_noise: true,
            use_dropout: true,
            k_ratio: 0.5,
            alpha: 3.0,
            beta: 2.0,
            t_ramp: None,
            ablation: Ablation::default(),
            residual_targets: ResidualTargets::Refined,
            kl_form: KlForm::Summed,
            master_seed: 1,
            eval_every: 500,
            track_label_quality: true,
        }
    }
}

impl TrainConfig {
    pub fn with_mode(mut self, mode: TrainMode) -> Self {
        self.ablation = mode.ablation();
        self
    }

    pub fn mode(&self) -> Option<TrainMode> {
        TrainMode::ALL.into_iter().find(|m| m.ablation() == self.ablation)
    }

    pub fn ramp_horizon(&self) -> usize {
        self.t_ramp
            .unwrap_or_else(|| (self.steps as f64 * 0.4).round() as usize)
            .max(1)
    }

    /// Selection ratio after ablations.
    pub fn effective_k_ratio(&self) -> f64 {
        if self.ablation.disable_ls {
            1.0
        } else {
            self.k_ratio
        }
    }

    pub fn active_terms(&self) -> ActiveTerms {
        if self.ablation.mt_baseline {
            ActiveTerms {
                hs: true,
                ls: false,
                n: false,
                c: true,
            }
        } else {
            ActiveTerms::default()
        }
    }

    pub fn perturbation(&self) -> Perturbation {
        Perturbation {
            dropout_rate: self.arch.dropout_rate,
            input_noise_sigma: self.sigma,
            use_dropout: self.use_dropout,
            use_noise: self.use_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.k_ratio) {
            return bad(format!("k must be in [0, 1], got {}", self.k_ratio));
        }
        if self.m < 2 {
            return bad(format!("m must be >= 2, got {}", self.m));
        }
        if self.hq_batch == 0 {
            return bad("hq batch must be >= 1".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.sigma < 0.0 {
            return bad("alpha, beta and sigma must be nonnegative".into());
        }
        Ok(())
    }
}
