//! Feed-forward network with GELU hidden layers.

use super::ops::{gelu, gelu_grad, linear, linear_backward};
use super::params::{Grads, Init, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub params: ParamSet,
}

pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths = [in, hidden…, out]`. The last layer starts at zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = crate::rng::stream(seed, &[]);
        let mut params = ParamSet::default();
        let last = widths.len() - 2;
        for (l, w) in widths.windows(2).enumerate() {
            let init = if l == last {
                Init::Zeros
            } else {
                Init::Normal((2.0 / w[0] as f64).sqrt())
            };
            params.add(format!("layer{l}.w"), &[w[0], w[1]], init, &mut rng);
            params.add(format!("layer{l}.b"), &[w[1]], Init::Zeros, &mut rng);
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut a = x.to_vec();
        let layers = self.widths.len() - 1;
        for l in 0..layers {
            let (di, dout) = (self.widths[l], self.widths[l + 1]);
            let z = linear(&a, self.params.get(2 * l), self.params.get(2 * l + 1), n, di, dout);
            cache.inputs.push(a);
            if l + 1 == layers {
                return (z, cache);
            }
            a = z.iter().map(|&v| gelu(v)).collect();
            cache.pre.push(z);
        }
        unreachable!()
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], n: usize) -> Grads {
        let mut g = self.params.zero_grads();
        let mut d = d_out.to_vec();
        for l in (0..self.widths.len() - 1).rev() {
            let (di, dout) = (self.widths[l], self.widths[l + 1]);
            let (lo, hi) = g.0.split_at_mut(2 * l + 1);
            let mut dx = linear_backward(&cache.inputs[l], self.params.get(2 * l), &d, n, di, dout, &mut lo[2 * l], &mut hi[0]);
            if l > 0 {
                dx.iter_mut().zip(&cache.pre[l - 1]).for_each(|(a, &z)| *a *= gelu_grad(z));
            }
            d = dx;
        }
        g
    }
}
