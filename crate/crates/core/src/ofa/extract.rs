use super::space::{ElasticSpace, SubNetConfig};
use crate::blocks::{build_backbone, InitStrategy, LiteResidualSpec, Model, NormUnit};
use crate::error::{Error, Result};
use crate::layers::ConvSpec;
use crate::params::ParamStore;

/// The largest network of a space together with the weights all
/// sub-networks share.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: ElasticSpace,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Supernet {
    pub fn new(space: ElasticSpace, init: &InitStrategy, seed: u64) -> Result<Self> {
        space.validate()?;
        let (model, store) = build_backbone(&space.supernet, init, seed)?;
        Ok(Supernet { space, model, store })
    }

    pub fn extract(&self, config: &SubNetConfig) -> Result<Model> {
        subnet_extract(&self.space, &self.model, config)
    }
}

/// A view of `supernet` restricted to `config`: the first blocks of each
/// stage, centred kernels and leading expanded channels. Parameters are
/// referenced, never copied.
pub fn subnet_extract(space: &ElasticSpace, supernet: &Model, config: &SubNetConfig) -> Result<Model> {
    let arch = space.arch_of(config)?;
    if supernet.arch.stages != space.supernet.stages {
        return Err(Error::Structural("model is not the space's supernet".into()));
    }
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (st, full) in arch.stages.iter().zip(&space.supernet.stages) {
        for (bi, spec) in st.blocks.iter().enumerate() {
            let src = &supernet.blocks[offset + bi];
            let e = spec.expanded();
            let l = spec.lite;
            let mut b = src.clone();
            b.spec = *spec;
            b.expand = src.expand.view(ConvSpec::new(spec.in_ch, e, 1, 1, 1))?;
            b.depthwise = src.depthwise.view(ConvSpec::new(e, e, spec.kernel, spec.stride, e))?;
            b.project = src.project.view(ConvSpec::new(e, spec.out_ch, 1, 1, 1))?;
            if let (Some(lite), Some(src_lite)) = (b.lite.as_mut(), src.lite.as_ref()) {
                lite.spec = LiteResidualSpec {
                    groups: l.groups,
                    kernel: l.kernel,
                };
                lite.conv1 = src_lite.conv1.view(ConvSpec::new(spec.in_ch, spec.in_ch, l.kernel, 1, l.groups))?;
                lite.conv2 = src_lite.conv2.view(ConvSpec::new(spec.in_ch, spec.out_ch, l.kernel, 1, l.groups))?;
            }
            blocks.push(b);
        }
        offset += full.depth;
    }
    Ok(Model {
        arch,
        stem: supernet.stem.clone(),
        blocks,
        head: supernet.head,
    })
}

/// A standalone model of `config` holding copies of the sliced weights.
pub fn materialize(supernet: &Supernet, config: &SubNetConfig) -> Result<(Model, ParamStore<f32>)> {
    let view = supernet.extract(config)?;
    let (model, mut store) = build_backbone(&view.arch, &InitStrategy::RandomZeroScale, 0)?;
    let src = &supernet.store;
    let slice = |s: crate::autograd::ParamSlice| crate::tensor::Tensor::new(vec![s.len], src.value(s.id).data()[..s.len].to_vec());
    for (dst, from) in model.units().zip(view.units()) {
        *store.value_mut(dst.weight.id) = from.weight.gather(src.value(from.weight.id), &from.spec)?;
        *store.value_mut(dst.bias.id) = slice(from.bias)?;
        match (dst.norm, from.norm) {
            (NormUnit::Frozen(d), NormUnit::Frozen(f)) => {
                for (d, f) in d.iter().zip(&f) {
                    *store.value_mut(d.id) = slice(*f)?;
                }
            }
            (NormUnit::Group { gamma: dg, beta: db }, NormUnit::Group { gamma: fg, beta: fb }) => {
                *store.value_mut(dg.id) = slice(fg)?;
                *store.value_mut(db.id) = slice(fb)?;
            }
            _ => return Err(Error::Structural(format!("norm kind differs at {}", dst.name))),
        }
    }
    *store.value_mut(model.head.weight) = src.value(view.head.weight).clone();
    *store.value_mut(model.head.bias) = src.value(view.head.bias).clone();
    Ok((model, store))
}
