use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_init(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            gain,
            rng,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_init(format!("{name}.weight"), &[output, input], input, gain, rng);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Pre-activation residual block, optionally modulated by a conditioning
/// vector through a per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    modulation: Option<Linear>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(params, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0, rng);
        let conv2 = Conv2d::new(params, &format!("{name}.conv2"), channels, channels, 3, 1, 0.5, rng);
        let modulation = cond_dim.map(|d| Linear::new(params, &format!("{name}.film"), d, 2 * channels, 0.5, rng));
        Self {
            conv1,
            conv2,
            modulation,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, cond: Option<Var>) -> Result<Var> {
        let h = g.silu(x);
        let mut h = self.conv1.forward(g, h)?;
        if let (Some(lin), Some(c)) = (&self.modulation, cond) {
            let m = lin.forward(g, c)?;
            h = g.film(h, m)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(x, h)
    }
}
