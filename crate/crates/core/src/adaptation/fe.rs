use std::sync::Once;

use rand::Rng;

use crate::autograd::{Session, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, ParameterSet};
use crate::spectral::half_width;
use crate::tensor::{FeatureMap, Tensor};

static RESIZE_NOTICE: Once = Once::new();

/// `F + γ · (DWConv3x3(F) + Re IFFT(M ⊙ FFT(F)))`.
///
/// `M` lives on the half spectrum of a nominal `mask_h x mask_w` grid and is
/// bilinearly resized when the feature grid differs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeAdaptor {
    pub prefix: String,
    pub channels: usize,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl FeAdaptor {
    pub fn new(prefix: impl Into<String>, channels: usize, mask_h: usize, mask_w: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            mask_h,
            mask_w,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn mask_shape(&self) -> [usize; 3] {
        [self.mask_h, half_width(self.mask_w), self.channels]
    }

    pub fn param_count(&self) -> usize {
        9 * self.channels + self.mask_shape().iter().product::<usize>() + 1
    }

    /// All-pass mask, small random depthwise kernel, `γ = 0`.
    pub fn init(&self, p: &mut ParameterSet, rng: &mut impl Rng) {
        p.insert(self.name("dw"), uniform(rng, &[3, 3, self.channels], 1.0 / 3.0));
        p.insert(self.name("mask"), Tensor::full(&self.mask_shape(), 1.0));
        p.insert(self.name("gamma"), Tensor::scalar(0.0));
    }

    /// Mask expanded to the half spectrum of an `h x w` grid.
    fn mask_for(&self, s: &mut Session, h: usize, w: usize) -> Var {
        let m = s.p(&self.name("mask"));
        let (hw, [mh, mw, c]) = (half_width(w), self.mask_shape());
        if (h, hw) == (mh, mw) {
            return m;
        }
        RESIZE_NOTICE.call_once(|| {
            log::info!("spectral mask {mh}x{mw} resized to {h}x{hw}; further resizes are not logged");
        });
        let m4 = s.reshape(m, &[1, mh, mw, c]);
        let r = s.resize_bilinear(m4, h, hw);
        s.reshape(r, &[h, hw, c])
    }

    pub fn frequency_branch(&self, s: &mut Session, x: Var) -> Var {
        let (_, h, w, _) = s.value(x).nhwc();
        let m = self.mask_for(s, h, w);
        s.spectral_filter(x, m)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let c = s.value(x).channels();
        assert_eq!(c, self.channels, "{}: {c} input channels, adaptor has {}", self.prefix, self.channels);
        let dw = s.p(&self.name("dw"));
        let spatial = s.dwconv3x3(x, dw);
        let freq = self.frequency_branch(s, x);
        let branch = s.add(spatial, freq);
        let gamma = s.p(&self.name("gamma"));
        let scaled = s.mul_scalar(branch, gamma);
        s.add(x, scaled)
    }

    /// Applies the adaptor to one feature map.
    pub fn apply(&self, params: &ParameterSet, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "{}: feature map has {} channels, adaptor expects {}",
                self.prefix,
                x.channels(),
                self.channels
            )));
        }
        let mut s = Session::new(&[params], false);
        let xv = s.constant(x.to_batch());
        let y = self.forward(&mut s, xv);
        Ok(super::unbatch(s.value(y), x.scale_index))
    }
}
