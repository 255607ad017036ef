//! Shared fixtures for the engine benchmarks.

use tinytl::blocks::{build_backbone, calibrate_norms, ArchitectureSpec, InitStrategy, Model};
use tinytl::io::{synth_dataset, Dataset, SynthSpec};
use tinytl::params::ParamStore;
use tinytl::tensor::Tensor;
use tinytl::train::{apply_policy, FineTunePolicy};
use tinytl::Result;

pub struct Fixture {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub data: Dataset,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// The reference network with calibrated norms, `policy` applied, and one
/// batch of synthetic images at `size` pixels.
pub fn fixture(policy: &FineTunePolicy, batch: usize, size: usize) -> Result<Fixture> {
    let mut arch = ArchitectureSpec::reference_tiny();
    arch.resolution = size;
    let data = synth_dataset(&SynthSpec::new(arch.head.n_classes, batch.max(8), size, 7))?;
    let (model, mut store) = build_backbone(&arch, &InitStrategy::RandomZeroScale, 0)?;
    let idx: Vec<usize> = (0..batch).collect();
    let (images, labels) = data.batch(&idx)?;
    calibrate_norms(&model, &mut store, &images)?;
    apply_policy(&mut store, policy)?;
    Ok(Fixture {
        model,
        store,
        data,
        images,
        labels,
    })
}
