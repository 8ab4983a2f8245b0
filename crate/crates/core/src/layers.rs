//! Weight + bias pairs stored in a [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{he_normal, normal_tensor};
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

impl Layer {
    /// Finds `{name}.weight` / `{name}.bias` and checks the weight shape.
    pub fn lookup(store: &ParamStore, name: &str, shape: &[usize]) -> Result<Self> {
        let find = |suffix: &str, want: &[usize]| {
            let full = format!("{name}.{suffix}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {full}")))?;
            if store.get(id).shape() != want {
                return Err(Error::Format(format!(
                    "parameter {full} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    want
                )));
            }
            Ok(id)
        };
        Ok(Self {
            w: find("weight", shape)?,
            b: find("bias", &shape[..1])?,
        })
    }

    /// Registers `weight` and a zero bias.
    pub fn init(store: &mut ParamStore, name: &str, weight: Tensor) -> Result<Self> {
        let out = weight.shape()[0];
        Ok(Self {
            w: store.add(format!("{name}.weight"), weight)?,
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?,
        })
    }

    /// Registers He-normal weights (or Gaussian weights of `std` when
    /// given) and a zero bias.
    pub fn random(
        store: &mut ParamStore,
        name: &str,
        shape: &[usize],
        rng: &mut ChaCha8Rng,
        std: Option<f64>,
    ) -> Result<Self> {
        let fan_in = shape[1..].iter().product();
        let w = match std {
            Some(s) => normal_tensor(rng, shape, s),
            None => he_normal(rng, shape, fan_in),
        };
        Self::init(store, name, w)
    }

    pub fn conv(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), stride, pad)
    }

    pub fn linear(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}
