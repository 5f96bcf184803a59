//! Adaptor blocks attached to the frozen base codec: the dual-branch
//! feature-extraction adaptor, the task aggregation module and multi-scale
//! fusion. Each block is a descriptor (parameter prefix plus dimensions)
//! that initializes its entries in a [`ParameterSet`](crate::ParameterSet)
//! and runs on a [`Session`](crate::autograd::Session).

mod fe;
mod msf;
mod tam;

pub use fe::FeAdaptor;
pub use msf::Msf;
pub use tam::{Tam, TamOutput};

use crate::tensor::{FeatureMap, Tensor};

pub(crate) fn unbatch(t: &Tensor, scale_index: usize) -> FeatureMap {
    let (_, h, w, c) = t.nhwc();
    FeatureMap::unchecked(t.clone().reshape(&[h, w, c]), scale_index)
}
