use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ArchitectureSpec, LiteResidualSpec, DEPTH_OPTIONS, EXPAND_OPTIONS, KERNEL_OPTIONS, LITE_GROUP_OPTIONS,
    LITE_KERNEL_OPTIONS, STAGES,
};
use crate::error::{Error, Result};

pub const SPACE_VERSION: u32 = 1;

/// Choices available to every block of one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOptions {
    pub depth: Vec<usize>,
    pub kernel: Vec<usize>,
    pub expand: Vec<usize>,
    pub lite_groups: Vec<usize>,
    pub lite_kernel: Vec<usize>,
}

/// Elastic depth/kernel/expand/lite/resolution space over a weight-shared supernet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticSpace {
    pub version: u32,
    /// The largest network; every sub-network is a view into its weights.
    pub supernet: ArchitectureSpec,
    pub stages: Vec<StageOptions>,
    pub resolutions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockChoice {
    pub kernel: usize,
    pub expand: usize,
    pub lite_groups: usize,
    pub lite_kernel: usize,
}

/// One point of an [`ElasticSpace`]: a choice list per active block of each
/// stage, so inactive blocks carry nothing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubNetConfig {
    pub stages: Vec<Vec<BlockChoice>>,
    pub resolution: usize,
}

impl SubNetConfig {
    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

fn check_list(at: &str, list: &[usize], allowed: &[usize]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Spec(format!("{at}: option list is empty")));
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Spec(format!("{at}: options must be strictly increasing, got {list:?}")));
    }
    if let Some(v) = list.iter().find(|v| !allowed.contains(v)) {
        return Err(Error::Spec(format!("{at}: {v} not in {allowed:?}")));
    }
    Ok(())
}

impl StageOptions {
    fn slot_choices(&self) -> Vec<BlockChoice> {
        let mut out = Vec::new();
        for &kernel in &self.kernel {
            for &expand in &self.expand {
                for &lite_groups in &self.lite_groups {
                    for &lite_kernel in &self.lite_kernel {
                        out.push(BlockChoice {
                            kernel,
                            expand,
                            lite_groups,
                            lite_kernel,
                        });
                    }
                }
            }
        }
        out
    }

    fn max_depth(&self) -> usize {
        *self.depth.last().expect("validated nonempty")
    }

    fn slot_width(&self) -> usize {
        self.kernel.len() + self.expand.len() + self.lite_groups.len() + self.lite_kernel.len()
    }
}

impl ElasticSpace {
    /// Every allowed option that fits inside `supernet`.
    pub fn from_supernet(supernet: ArchitectureSpec, resolutions: Vec<usize>) -> Result<Self> {
        supernet.validate()?;
        let stages = supernet
            .stages
            .iter()
            .map(|st| {
                let min = |f: fn(&crate::blocks::MbBlockSpec) -> usize| st.blocks.iter().map(f).min().unwrap_or(0);
                StageOptions {
                    depth: DEPTH_OPTIONS.iter().copied().filter(|&d| d <= st.depth).collect(),
                    kernel: KERNEL_OPTIONS.iter().copied().filter(|&k| k <= min(|b| b.kernel)).collect(),
                    expand: EXPAND_OPTIONS.iter().copied().filter(|&e| e <= min(|b| b.expand)).collect(),
                    lite_groups: LITE_GROUP_OPTIONS
                        .iter()
                        .copied()
                        .filter(|&g| st.blocks.iter().all(|b| g % b.lite.groups == 0))
                        .collect(),
                    lite_kernel: LITE_KERNEL_OPTIONS
                        .iter()
                        .copied()
                        .filter(|&k| k <= min(|b| b.lite.kernel))
                        .collect(),
                }
            })
            .collect();
        let space = ElasticSpace {
            version: SPACE_VERSION,
            supernet,
            stages,
            resolutions,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPACE_VERSION {
            return Err(Error::Spec(format!("version: expected {SPACE_VERSION}, got {}", self.version)));
        }
        self.supernet.validate()?;
        if self.stages.len() != STAGES {
            return Err(Error::Spec(format!("stages: expected {STAGES}, got {}", self.stages.len())));
        }
        for (si, (o, st)) in self.stages.iter().zip(&self.supernet.stages).enumerate() {
            let at = format!("stages[{si}]");
            check_list(&format!("{at}.depth"), &o.depth, &DEPTH_OPTIONS)?;
            check_list(&format!("{at}.kernel"), &o.kernel, &KERNEL_OPTIONS)?;
            check_list(&format!("{at}.expand"), &o.expand, &EXPAND_OPTIONS)?;
            check_list(&format!("{at}.lite_groups"), &o.lite_groups, &LITE_GROUP_OPTIONS)?;
            check_list(&format!("{at}.lite_kernel"), &o.lite_kernel, &LITE_KERNEL_OPTIONS)?;
            if o.max_depth() > st.depth {
                return Err(Error::Spec(format!(
                    "{at}.depth: option {} exceeds the supernet's {} blocks",
                    o.max_depth(),
                    st.depth
                )));
            }
            for (bi, b) in st.blocks.iter().enumerate().take(o.max_depth()) {
                let at = format!("{at}.blocks[{bi}]");
                let over = |what: &str, opt: usize, have: usize| {
                    Err(Error::Spec(format!("{at}: {what} option {opt} exceeds the supernet's {have}")))
                };
                if let Some(&k) = o.kernel.iter().find(|&&k| k > b.kernel) {
                    return over("kernel", k, b.kernel);
                }
                if let Some(&e) = o.expand.iter().find(|&&e| e > b.expand) {
                    return over("expand", e, b.expand);
                }
                if let Some(&k) = o.lite_kernel.iter().find(|&&k| k > b.lite.kernel) {
                    return over("lite_kernel", k, b.lite.kernel);
                }
                if let Some(&g) = o.lite_groups.iter().find(|&&g| g % b.lite.groups != 0) {
                    return Err(Error::Spec(format!(
                        "{at}: lite_groups option {g} is not a refinement of the supernet's {}",
                        b.lite.groups
                    )));
                }
                for g in &o.lite_groups {
                    let spec = LiteResidualSpec {
                        groups: *g,
                        kernel: b.lite.kernel,
                    };
                    crate::blocks::MbBlockSpec { lite: spec, ..*b }.validate(&at)?;
                }
            }
        }
        if self.resolutions.is_empty() || self.resolutions.contains(&0) {
            return Err(Error::Spec("resolutions: need at least one positive resolution".into()));
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec("resolutions: must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Number of distinct sub-networks.
    pub fn size(&self) -> u128 {
        let mut n = self.resolutions.len() as u128;
        for o in &self.stages {
            let slot = o.slot_choices().len() as u128;
            n *= o.depth.iter().map(|&d| slot.pow(d as u32)).sum::<u128>();
        }
        n
    }

    /// Every sub-network; `limit` guards against accidental explosion.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<SubNetConfig>> {
        if self.size() > limit as u128 {
            return Err(Error::Spec(format!("space has {} configs, limit {limit}", self.size())));
        }
        let mut per_stage = Vec::new();
        for o in &self.stages {
            let slot = o.slot_choices();
            let mut lists: Vec<Vec<BlockChoice>> = Vec::new();
            for &d in &o.depth {
                let mut acc: Vec<Vec<BlockChoice>> = vec![vec![]];
                for _ in 0..d {
                    acc = acc
                        .into_iter()
                        .flat_map(|p| {
                            slot.iter().map(move |c| {
                                let mut q = p.clone();
                                q.push(*c);
                                q
                            })
                        })
                        .collect();
                }
                lists.extend(acc);
            }
            per_stage.push(lists);
        }
        let mut out = Vec::new();
        for &resolution in &self.resolutions {
            let mut acc: Vec<Vec<Vec<BlockChoice>>> = vec![vec![]];
            for lists in &per_stage {
                acc = acc
                    .into_iter()
                    .flat_map(|p| {
                        lists.iter().map(move |l| {
                            let mut q = p.clone();
                            q.push(l.clone());
                            q
                        })
                    })
                    .collect();
            }
            out.extend(acc.into_iter().map(|stages| SubNetConfig { stages, resolution }));
        }
        Ok(out)
    }

    /// Largest network: every option at its maximum except lite groups,
    /// where fewer groups means more weights.
    pub fn max_config(&self) -> SubNetConfig {
        self.extreme(|l| *l.last().expect("nonempty"), |l| l[0])
    }

    pub fn min_config(&self) -> SubNetConfig {
        self.extreme(|l| l[0], |l| *l.last().expect("nonempty"))
    }

    fn extreme(&self, pick: fn(&[usize]) -> usize, pick_groups: fn(&[usize]) -> usize) -> SubNetConfig {
        let stages = self
            .stages
            .iter()
            .map(|o| {
                let c = BlockChoice {
                    kernel: pick(&o.kernel),
                    expand: pick(&o.expand),
                    lite_groups: pick_groups(&o.lite_groups),
                    lite_kernel: pick(&o.lite_kernel),
                };
                vec![c; pick(&o.depth)]
            })
            .collect();
        SubNetConfig {
            stages,
            resolution: pick(&self.resolutions),
        }
    }

    /// Checks that every choice of `config` is an option of this space.
    pub fn contains(&self, config: &SubNetConfig) -> Result<()> {
        if config.stages.len() != self.stages.len() {
            return Err(Error::Spec(format!("config has {} stages, space {}", config.stages.len(), self.stages.len())));
        }
        if !self.resolutions.contains(&config.resolution) {
            return Err(Error::Spec(format!("resolution {} not in {:?}", config.resolution, self.resolutions)));
        }
        for (si, (o, blocks)) in self.stages.iter().zip(&config.stages).enumerate() {
            if !o.depth.contains(&blocks.len()) {
                return Err(Error::Spec(format!("stage {si}: depth {} not in {:?}", blocks.len(), o.depth)));
            }
            for (bi, c) in blocks.iter().enumerate() {
                let ok = o.kernel.contains(&c.kernel)
                    && o.expand.contains(&c.expand)
                    && o.lite_groups.contains(&c.lite_groups)
                    && o.lite_kernel.contains(&c.lite_kernel);
                if !ok {
                    return Err(Error::Spec(format!("stage {si} block {bi}: {c:?} outside the space")));
                }
            }
        }
        Ok(())
    }

    /// The standalone architecture of a sub-network.
    pub fn arch_of(&self, config: &SubNetConfig) -> Result<ArchitectureSpec> {
        self.contains(config)?;
        let mut arch = self.supernet.clone();
        arch.resolution = config.resolution;
        for (st, choices) in arch.stages.iter_mut().zip(&config.stages) {
            st.depth = choices.len();
            st.blocks.truncate(choices.len());
            for (b, c) in st.blocks.iter_mut().zip(choices) {
                b.kernel = c.kernel;
                b.expand = c.expand;
                b.lite = LiteResidualSpec {
                    groups: c.lite_groups,
                    kernel: c.lite_kernel,
                };
            }
        }
        Ok(arch)
    }

    /// Uniform independent choice per dimension. Genes of every slot are
    /// drawn even when the slot ends up inactive, so the stream of draws does
    /// not depend on earlier outcomes.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> SubNetConfig {
        let stages = self
            .stages
            .iter()
            .map(|o| {
                let depth = *o.depth.choose(rng).expect("nonempty");
                let mut blocks: Vec<BlockChoice> = (0..o.max_depth())
                    .map(|_| BlockChoice {
                        kernel: *o.kernel.choose(rng).expect("nonempty"),
                        expand: *o.expand.choose(rng).expect("nonempty"),
                        lite_groups: *o.lite_groups.choose(rng).expect("nonempty"),
                        lite_kernel: *o.lite_kernel.choose(rng).expect("nonempty"),
                    })
                    .collect();
                blocks.truncate(depth);
                blocks
            })
            .collect();
        SubNetConfig {
            stages,
            resolution: *self.resolutions.choose(rng).expect("nonempty"),
        }
    }

    /// Width of the one-hot encoding.
    pub fn encoding_len(&self) -> usize {
        self.stages
            .iter()
            .map(|o| o.depth.len() + o.max_depth() * o.slot_width())
            .sum::<usize>()
            + self.resolutions.len()
    }

    /// Per stage: depth one-hot, then per block slot kernel, expand,
    /// lite-groups and lite-kernel one-hots (all zero when inactive).
    /// A resolution one-hot closes the vector.
    pub fn encode(&self, config: &SubNetConfig) -> Result<Vec<f32>> {
        self.contains(config)?;
        let mut v = Vec::with_capacity(self.encoding_len());
        let one_hot = |v: &mut Vec<f32>, opts: &[usize], x: Option<usize>| {
            v.extend(opts.iter().map(|&o| if Some(o) == x { 1.0 } else { 0.0 }));
        };
        for (o, blocks) in self.stages.iter().zip(&config.stages) {
            one_hot(&mut v, &o.depth, Some(blocks.len()));
            for slot in 0..o.max_depth() {
                let c = blocks.get(slot);
                one_hot(&mut v, &o.kernel, c.map(|c| c.kernel));
                one_hot(&mut v, &o.expand, c.map(|c| c.expand));
                one_hot(&mut v, &o.lite_groups, c.map(|c| c.lite_groups));
                one_hot(&mut v, &o.lite_kernel, c.map(|c| c.lite_kernel));
            }
        }
        one_hot(&mut v, &self.resolutions, Some(config.resolution));
        Ok(v)
    }

    pub fn decode(&self, code: &[f32]) -> Result<SubNetConfig> {
        if code.len() != self.encoding_len() {
            return Err(Error::Spec(format!("encoding of length {}, expected {}", code.len(), self.encoding_len())));
        }
        let mut pos = 0;
        let mut take = |opts: &[usize]| -> Result<Option<usize>> {
            let part = &code[pos..pos + opts.len()];
            pos += opts.len();
            let hot: Vec<usize> = (0..part.len()).filter(|&i| part[i] == 1.0).collect();
            if part.iter().any(|&x| x != 0.0 && x != 1.0) || hot.len() > 1 {
                return Err(Error::Spec(format!("malformed one-hot {part:?}")));
            }
            Ok(hot.first().map(|&i| opts[i]))
        };
        let mut stages = Vec::new();
        for o in &self.stages {
            let depth = take(&o.depth)?.ok_or_else(|| Error::Spec("missing depth".into()))?;
            let mut blocks = Vec::new();
            for slot in 0..o.max_depth() {
                let genes = [take(&o.kernel)?, take(&o.expand)?, take(&o.lite_groups)?, take(&o.lite_kernel)?];
                match (slot < depth, genes) {
                    (true, [Some(kernel), Some(expand), Some(lite_groups), Some(lite_kernel)]) => blocks.push(BlockChoice {
                        kernel,
                        expand,
                        lite_groups,
                        lite_kernel,
                    }),
                    (false, [None, None, None, None]) => {}
                    _ => return Err(Error::Spec(format!("slot {slot} does not match depth {depth}"))),
                }
            }
            stages.push(blocks);
        }
        let resolution = take(&self.resolutions)?.ok_or_else(|| Error::Spec("missing resolution".into()))?;
        Ok(SubNetConfig { stages, resolution })
    }
}

/// Deterministic sub-network draw.
pub fn sample_subnet(space: &ElasticSpace, seed: u64) -> SubNetConfig {
    space.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}
