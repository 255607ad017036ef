use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GN_CHANNELS_PER_GROUP;

pub const EXPAND_OPTIONS: [usize; 3] = [3, 4, 6];
pub const KERNEL_OPTIONS: [usize; 3] = [3, 5, 7];
pub const DEPTH_OPTIONS: [usize; 3] = [2, 3, 4];
pub const LITE_GROUP_OPTIONS: [usize; 2] = [2, 4];
pub const LITE_KERNEL_OPTIONS: [usize; 2] = [3, 5];
pub const STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiteResidualSpec {
    pub groups: usize,
    pub kernel: usize,
}

impl Default for LiteResidualSpec {
    fn default() -> Self {
        LiteResidualSpec { groups: 2, kernel: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbBlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expand: usize,
    pub kernel: usize,
    pub stride: usize,
    pub lite: LiteResidualSpec,
}

impl MbBlockSpec {
    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }

    pub fn expanded(&self) -> usize {
        self.in_ch * self.expand
    }

    pub fn validate(&self, at: &str) -> Result<()> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Spec(format!("{at}: {what}"))) };
        check(self.in_ch > 0 && self.out_ch > 0, "channel counts must be positive".into())?;
        check(EXPAND_OPTIONS.contains(&self.expand), format!("expand {} not in {EXPAND_OPTIONS:?}", self.expand))?;
        check(KERNEL_OPTIONS.contains(&self.kernel), format!("kernel {} not in {KERNEL_OPTIONS:?}", self.kernel))?;
        check(self.stride == 1 || self.stride == 2, format!("stride {} not in [1, 2]", self.stride))?;
        check(
            LITE_GROUP_OPTIONS.contains(&self.lite.groups),
            format!("lite.groups {} not in {LITE_GROUP_OPTIONS:?}", self.lite.groups),
        )?;
        check(
            LITE_KERNEL_OPTIONS.contains(&self.lite.kernel),
            format!("lite.kernel {} not in {LITE_KERNEL_OPTIONS:?}", self.lite.kernel),
        )?;
        for (what, c) in [("in_ch", self.in_ch), ("out_ch", self.out_ch)] {
            check(
                c % self.lite.groups == 0 && c % GN_CHANNELS_PER_GROUP == 0,
                format!(
                    "{what} {c} must be divisible by lite.groups {} and the norm group size {GN_CHANNELS_PER_GROUP}",
                    self.lite.groups
                ),
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub depth: usize,
    pub blocks: Vec<MbBlockSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub n_classes: usize,
}

/// Declarative backbone: stem, five stages of MB-blocks, classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub version: u32,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    pub resolution: usize,
}

pub const ARCH_VERSION: u32 = 1;
pub const INPUT_CHANNELS: usize = 3;

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_VERSION {
            return Err(Error::Spec(format!("version: expected {ARCH_VERSION}, got {}", self.version)));
        }
        let s = &self.stem;
        if s.out_ch == 0 || s.kernel % 2 == 0 || !(s.stride == 1 || s.stride == 2) {
            return Err(Error::Spec(format!(
                "stem: needs out_ch > 0, odd kernel and stride 1 or 2 (got {s:?})"
            )));
        }
        if self.stages.len() != STAGES {
            return Err(Error::Spec(format!("stages: expected {STAGES}, got {}", self.stages.len())));
        }
        if self.head.n_classes < 2 {
            return Err(Error::Spec(format!("head.n_classes: need at least 2, got {}", self.head.n_classes)));
        }
        if self.resolution == 0 {
            return Err(Error::Spec("resolution: must be positive".into()));
        }
        let mut prev: (String, usize) = ("stem".into(), s.out_ch);
        for (si, stage) in self.stages.iter().enumerate() {
            if !DEPTH_OPTIONS.contains(&stage.depth) {
                return Err(Error::Spec(format!(
                    "stages[{si}].depth: {} not in {DEPTH_OPTIONS:?}",
                    stage.depth
                )));
            }
            if stage.blocks.len() != stage.depth {
                return Err(Error::Spec(format!(
                    "stages[{si}]: depth {} but {} blocks listed",
                    stage.depth,
                    stage.blocks.len()
                )));
            }
            for (bi, b) in stage.blocks.iter().enumerate() {
                let at = format!("stages[{si}].blocks[{bi}]");
                b.validate(&at)?;
                if b.in_ch != prev.1 {
                    return Err(Error::Spec(format!(
                        "{at}.in_ch = {} does not match {} output channels {}",
                        b.in_ch, prev.0, prev.1
                    )));
                }
                if bi > 0 && b.stride != 1 {
                    return Err(Error::Spec(format!(
                        "{at}.stride: only the first block of a stage may downsample"
                    )));
                }
                prev = (at, b.out_ch);
            }
        }
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MbBlockSpec> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks().last().map_or(self.stem.out_ch, |b| b.out_ch)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: ArchitectureSpec = crate::io::parse_json(text, std::path::Path::new("<arch>"))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    /// The bundled five-stage reference network (widths 8→16→24→32→48).
    pub fn reference_tiny() -> Self {
        Self::from_json(REFERENCE_TINY).expect("bundled architecture is valid")
    }
}

impl ArchitectureSpec {
    /// A seeded 8-channel network small enough for exhaustive gradient
    /// checks. Kernel, lite groups, strides and skip connections vary.
    pub fn random_tiny(seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let resolution = rng.gen_range(3..=4);
        let stages = (0..STAGES)
            .map(|_| {
                let stride = if rng.gen_bool(0.4) { 2 } else { 1 };
                let blocks = (0..2)
                    .map(|b| MbBlockSpec {
                        in_ch: 8,
                        out_ch: 8,
                        expand: 3,
                        kernel: if rng.gen_bool(0.25) { 5 } else { 3 },
                        stride: if b == 0 { stride } else { 1 },
                        lite: LiteResidualSpec {
                            groups: if rng.gen_bool(0.5) { 2 } else { 4 },
                            kernel: 3,
                        },
                    })
                    .collect();
                StageSpec { depth: 2, blocks }
            })
            .collect();
        ArchitectureSpec {
            version: ARCH_VERSION,
            stem: StemSpec {
                out_ch: 8,
                kernel: 3,
                stride: 1,
            },
            stages,
            head: HeadSpec {
                n_classes: rng.gen_range(2..=4),
            },
            resolution,
        }
    }
}

pub const REFERENCE_TINY: &str = include_str!("../../assets/reference-tiny.json");
