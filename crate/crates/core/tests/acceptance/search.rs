use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinytl::blocks::{ArchitectureSpec, HeadSpec, InitStrategy, LiteResidualSpec, MbBlockSpec, Model, StageSpec, StemSpec};
use tinytl::io::{synth_dataset, SynthSpec};
use tinytl::ofa::{
    adapt_pipeline, collect_pairs, kendall_tau, predictor_train, AccuracyOracle, AdaptConfig, ElasticSpace, PredictorConfig, SubNetConfig,
    Supernet, ValidationOracle,
};
use tinytl::params::ParamStore;

use crate::Outcome;

/// Widths 8,8,16,16,16 at 8 pixels, stage 0 three blocks deep.
fn supernet_arch() -> ArchitectureSpec {
    let widths = [8, 8, 16, 16, 16];
    let mut prev = 8;
    let stages = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let depth = if i == 0 { 3 } else { 2 };
            let blocks = (0..depth)
                .map(|b| MbBlockSpec {
                    in_ch: if b == 0 { prev } else { w },
                    out_ch: w,
                    expand: 4,
                    kernel: 5,
                    stride: if b == 0 && i % 2 == 1 { 2 } else { 1 },
                    lite: LiteResidualSpec { groups: 2, kernel: 5 },
                })
                .collect();
            prev = w;
            StageSpec { depth, blocks }
        })
        .collect();
    ArchitectureSpec {
        version: 1,
        stem: StemSpec {
            out_ch: 8,
            kernel: 3,
            stride: 1,
        },
        stages,
        head: HeadSpec { n_classes: 3 },
        resolution: 8,
    }
}

/// 384 sub-networks: depth and kernel vary in stage 0, lite groups in stage 2,
/// expansion in stage 4, and two input resolutions.
fn space() -> ElasticSpace {
    let mut s = ElasticSpace::from_supernet(supernet_arch(), vec![8, 12]).unwrap();
    for (i, st) in s.stages.iter_mut().enumerate() {
        st.depth = vec![*st.depth.last().unwrap()];
        st.kernel = vec![3];
        st.expand = vec![3];
        st.lite_groups = vec![2];
        st.lite_kernel = vec![5];
        match i {
            0 => {
                st.depth = vec![2, 3];
                st.kernel = vec![3, 5];
            }
            2 => st.lite_groups = vec![2, 4],
            4 => st.expand = vec![3, 4],
            _ => {}
        }
    }
    s.validate().unwrap();
    s
}

/// A fixed random linear score of the architecture encoding.
struct LinearOracle {
    space: ElasticSpace,
    weights: Vec<f64>,
}

impl LinearOracle {
    fn new(space: &ElasticSpace, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..space.encoding_len()).map(|_| rng.gen_range(0.0..0.05)).collect();
        LinearOracle {
            space: space.clone(),
            weights,
        }
    }

    fn score(&self, c: &SubNetConfig) -> f64 {
        let e = self.space.encode(c).unwrap();
        0.3 + e.iter().zip(&self.weights).map(|(a, w)| *a as f64 * w).sum::<f64>()
    }
}

impl AccuracyOracle for LinearOracle {
    fn accuracy(&mut self, c: &SubNetConfig, _: &Model, _: &ParamStore<f32>) -> tinytl::Result<f64> {
        Ok(self.score(c))
    }
}

pub fn criterion_10() -> Outcome {
    let space = space();
    let all = space.enumerate(512).unwrap();
    let data = synth_dataset(&SynthSpec::new(3, 8, 8, 1)).unwrap();
    let mut hits = 0;
    let mut misses = Vec::new();
    let mut taus = Vec::new();
    for seed in 0..10u64 {
        let mut oracle = LinearOracle::new(&space, 1000 + seed);
        let truth = all.iter().max_by(|a, b| oracle.score(a).total_cmp(&oracle.score(b))).unwrap().clone();
        let mut sn = Supernet::new(space.clone(), &InitStrategy::RandomZeroScale, seed).unwrap();
        let cfg = AdaptConfig {
            seed,
            ..AdaptConfig::default()
        };
        let (best, ..) = adapt_pipeline(&mut sn, &data, &cfg, Some(&mut oracle)).unwrap();
        if best == truth {
            hits += 1;
        } else {
            misses.push(seed);
        }

        // ranking quality on configurations the predictor never saw
        let pairs = collect_pairs(&sn, &mut oracle, 150, seed).unwrap();
        let seen: BTreeSet<&SubNetConfig> = pairs.pairs.iter().map(|(c, _)| c).collect();
        let held: Vec<&SubNetConfig> = all.iter().filter(|c| !seen.contains(c)).collect();
        let encoded: Vec<(Vec<f32>, f64)> = pairs.pairs.iter().map(|(c, a)| (space.encode(c).unwrap(), *a)).collect();
        let predictor = predictor_train(&encoded, &PredictorConfig {
            seed,
            ..PredictorConfig::default()
        })
        .unwrap();
        let pred = predictor
            .predict_many(&held.iter().map(|c| space.encode(c).unwrap()).collect::<Vec<_>>())
            .unwrap();
        let truth: Vec<f64> = held.iter().map(|c| oracle.score(c)).collect();
        taus.push(kendall_tau(&truth, &pred));
    }
    let min_tau = taus.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::new(
        hits == 10 && min_tau > 0.8,
        format!(
            "{} configs; winner == brute-force argmax for {hits}/10 seeds (misses {misses:?}); held-out Kendall tau min {min_tau:.3}, mean {:.3}",
            all.len(),
            taus.iter().sum::<f64>() / taus.len() as f64
        ),
    )
}

pub fn criterion_11() -> Outcome {
    let space = ElasticSpace::from_supernet(supernet_arch(), vec![8, 12]).unwrap();
    let mut sn = Supernet::new(space, &InitStrategy::RandomZeroScale, 3).unwrap();
    // live lite branches so sampled networks run every kind of unit
    for id in sn.store.ids().collect::<Vec<_>>() {
        if sn.store.param(id).name.ends_with("conv2.norm.gamma") {
            sn.store.value_mut(id).data_mut().fill(0.5);
        }
    }
    let data = synth_dataset(&SynthSpec::new(3, 6, 8, 5)).unwrap();
    let mut oracle = ValidationOracle::new(&data, 6);
    let pairs = collect_pairs(&sn, &mut oracle, 20, 11).unwrap();
    Outcome::new(
        pairs.peak_saved_bytes == 0 && pairs.mac > 0,
        format!(
            "{} sub-networks scored on {} images, {} forward MACs, saved bytes {}",
            pairs.pairs.len(),
            data.len(),
            pairs.mac,
            pairs.peak_saved_bytes
        ),
    )
}
