use serde::{Deserialize, Serialize};

use super::engine::{train, TrainConfig, TrainReport};
use super::policy::FineTunePolicy;
use crate::blocks::{build_backbone, calibrate_norms, ArchitectureSpec, InitStrategy};
use crate::error::Result;
use crate::io::{synth_dataset, SynthSpec, PATTERN_COUNT};
use crate::params::ParamStore;

/// Full fine-tuning on the upper half of the synthetic patterns, giving
/// weights to transfer onto the lower half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourcePretrain {
    pub per_class: usize,
    pub size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Images used to set the frozen normalization statistics.
    pub calibration: usize,
    pub seed: u64,
}

impl Default for SourcePretrain {
    fn default() -> Self {
        SourcePretrain {
            per_class: 400,
            size: 16,
            epochs: 15,
            batch: 8,
            lr: 3e-3,
            calibration: 64,
            seed: 100,
        }
    }
}

/// Returns the trained store (head included) and the training report.
pub fn pretrain_source(arch: &ArchitectureSpec, cfg: &SourcePretrain) -> Result<(ParamStore<f32>, TrainReport)> {
    let classes = PATTERN_COUNT / 2;
    let data = synth_dataset(&SynthSpec {
        pattern_offset: classes,
        ..SynthSpec::new(classes, cfg.per_class, cfg.size, cfg.seed)
    })?;
    let mut arch = arch.clone();
    arch.head.n_classes = classes;
    arch.resolution = cfg.size;
    let (model, mut store) = build_backbone(&arch, &InitStrategy::RandomZeroScale, cfg.seed)?;
    let n = cfg.calibration.clamp(1, data.len());
    let (x, _) = data.batch(&(0..n).collect::<Vec<_>>())?;
    calibrate_norms(&model, &mut store, &x)?;
    let tc = TrainConfig::new(cfg.epochs, cfg.batch, cfg.lr, cfg.seed);
    let report = train(&model, &mut store, &data, &FineTunePolicy::FtFull, &tc)?;
    Ok((store, report))
}
