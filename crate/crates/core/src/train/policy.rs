use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

/// Which parameter groups are fine-tuned. The head is always trainable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FineTunePolicy {
    FtFull,
    FtLast,
    FtNormLast,
    TinyTlB,
    TinyTlL,
    TinyTlLB,
    /// Group names: weight, bias, norm_scale, norm_shift, lite, head.
    Custom(Vec<String>),
}

impl FineTunePolicy {
    pub const NAMED: [FineTunePolicy; 6] = [
        FineTunePolicy::FtFull,
        FineTunePolicy::FtLast,
        FineTunePolicy::FtNormLast,
        FineTunePolicy::TinyTlB,
        FineTunePolicy::TinyTlL,
        FineTunePolicy::TinyTlLB,
    ];

    pub fn groups(&self) -> Result<Vec<ParamGroup>> {
        use ParamGroup::*;
        let mut g = match self {
            FineTunePolicy::FtFull => ParamGroup::TRAINABLE_GROUPS.to_vec(),
            FineTunePolicy::FtLast => vec![],
            FineTunePolicy::FtNormLast => vec![NormScale, NormShift],
            FineTunePolicy::TinyTlB => vec![Bias],
            FineTunePolicy::TinyTlL => vec![Lite],
            FineTunePolicy::TinyTlLB => vec![Bias, Lite],
            FineTunePolicy::Custom(names) => names.iter().map(|n| group_by_name(n)).collect::<Result<_>>()?,
        };
        if !g.contains(&Head) {
            g.push(Head);
        }
        Ok(g)
    }
}

fn group_by_name(name: &str) -> Result<ParamGroup> {
    use ParamGroup::*;
    Ok(match name {
        "weight" => Weight,
        "bias" => Bias,
        "norm_scale" => NormScale,
        "norm_shift" => NormShift,
        "lite" => Lite,
        "head" => Head,
        other => return Err(spec_err!("unknown parameter group {other:?}")),
    })
}

impl FromStr for FineTunePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ft-full" => FineTunePolicy::FtFull,
            "ft-last" => FineTunePolicy::FtLast,
            "ft-norm-last" => FineTunePolicy::FtNormLast,
            "tinytl-b" => FineTunePolicy::TinyTlB,
            "tinytl-l" => FineTunePolicy::TinyTlL,
            "tinytl-lb" => FineTunePolicy::TinyTlLB,
            other => match other.strip_prefix("custom:") {
                Some(list) => {
                    let names: Vec<String> = list.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
                    let p = FineTunePolicy::Custom(names);
                    p.groups()?;
                    p
                }
                None => return Err(spec_err!("unknown policy {other:?}")),
            },
        })
    }
}

impl fmt::Display for FineTunePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FineTunePolicy::FtFull => f.write_str("ft-full"),
            FineTunePolicy::FtLast => f.write_str("ft-last"),
            FineTunePolicy::FtNormLast => f.write_str("ft-norm-last"),
            FineTunePolicy::TinyTlB => f.write_str("tinytl-b"),
            FineTunePolicy::TinyTlL => f.write_str("tinytl-l"),
            FineTunePolicy::TinyTlLB => f.write_str("tinytl-lb"),
            FineTunePolicy::Custom(n) => write!(f, "custom:{}", n.join(",")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainablePlan {
    pub trainable_ids: Vec<ParamId>,
    pub trainable_params: usize,
    pub frozen_params: usize,
}

/// Marks every parameter trainable or frozen according to `policy`.
pub fn apply_policy<T: Real>(store: &mut ParamStore<T>, policy: &FineTunePolicy) -> Result<TrainablePlan> {
    let groups = policy.groups()?;
    for id in store.ids().collect::<Vec<_>>() {
        let g = store.param(id).group;
        store.set_trainable(id, groups.contains(&g));
    }
    Ok(TrainablePlan {
        trainable_ids: store.trainable_ids(),
        trainable_params: store.trainable_count(),
        frozen_params: store.param_count() - store.trainable_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_backbone, ArchitectureSpec, InitStrategy};

    #[test]
    fn policy_trainable_sets() {
        let (_, mut s) = build_backbone(&ArchitectureSpec::reference_tiny(), &InitStrategy::RandomZeroScale, 0).unwrap();
        let last = apply_policy(&mut s, &FineTunePolicy::FtLast).unwrap();
        assert_eq!(last.trainable_params, 48 * 4 + 4);
        assert!(last.trainable_ids.iter().all(|&id| s.param(id).group == ParamGroup::Head));
        let full = apply_policy(&mut s, &FineTunePolicy::FtFull).unwrap();
        assert_eq!(full.trainable_params, s.param_count());
        assert_eq!(full.frozen_params, 0);
        apply_policy(&mut s, &FineTunePolicy::TinyTlLB).unwrap();
        for (_, p) in s.iter() {
            let want = matches!(p.group, ParamGroup::Bias | ParamGroup::Lite | ParamGroup::Head);
            assert_eq!(p.trainable, want, "{}", p.name);
        }
        let custom: FineTunePolicy = "custom:bias,norm_scale".parse().unwrap();
        apply_policy(&mut s, &custom).unwrap();
        assert!(s.iter().all(|(_, p)| p.trainable == matches!(p.group, ParamGroup::Bias | ParamGroup::NormScale | ParamGroup::Head)));
        assert!(apply_policy(&mut s, &FineTunePolicy::Custom(vec!["kernels".into()])).is_err());
        assert!("custom:kernels".parse::<FineTunePolicy>().is_err());
    }

    #[test]
    fn names_round_trip() {
        for p in FineTunePolicy::NAMED {
            assert_eq!(p.to_string().parse::<FineTunePolicy>().unwrap(), p);
        }
        assert!("ft-everything".parse::<FineTunePolicy>().is_err());
    }
}
