use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Rng;

/// Cubic-kernel 3D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    /// Stride-1 convolution with "same" padding.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, cin, cout, kernel, 1, kernel / 2, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_kernel(format!("{name}.weight"), cout, cin, kernel, rng);
        let bias = bias.then(|| store.add_bias(format!("{name}.bias"), cout));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.conv(x, self.weight, self.bias, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel.pow(3) + if self.bias.is_some() { self.cout } else { 0 }
    }
}
