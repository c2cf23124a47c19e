use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BoundParams, ModelParams, ParamGroup, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(-b, b) with b = sqrt(6 / fan_in).
    KaimingUniform {
        fan_in: usize,
    },
    /// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in forward order.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, path: String, group: ParamGroup, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { path, group, shape, init });
    }

    /// `name.weight` (cout x cin x k x k) and `name.bias`.
    pub fn conv(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize) {
        let init = Init::KaimingUniform { fan_in: cin * k * k };
        self.push(format!("{name}.weight"), group, vec![cout, cin, k, k], init);
        self.push(format!("{name}.bias"), group, vec![cout], Init::Zeros);
    }

    /// `name.weight` (din x dout, applied as x W) and `name.bias`.
    pub fn linear(&mut self, name: &str, group: ParamGroup, din: usize, dout: usize, init: Init) {
        self.push(format!("{name}.weight"), group, vec![din, dout], init);
        self.push(format!("{name}.bias"), group, vec![dout], Init::Zeros);
    }

    /// Q/K/V/output projections. The key projection has no bias: a bias on
    /// keys shifts every score of a query row equally and cancels in softmax.
    pub fn attention(&mut self, name: &str, group: ParamGroup, d: usize) {
        let init = Init::XavierUniform { fan_in: d, fan_out: d };
        for proj in ["q", "k", "v", "o"] {
            if proj == "k" {
                self.push(format!("{name}.k.weight"), group, vec![d, d], init);
            } else {
                self.linear(&format!("{name}.{proj}"), group, d, d, init);
            }
        }
    }

    /// Draws every declared tensor from one seeded stream, in declaration
    /// order, so f32 and f64 instances share values up to rounding.
    pub fn init<T: Real>(&self, seed: u64) -> Result<ModelParams<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for s in &self.specs {
            let n: usize = s.shape.iter().product();
            let bound = match s.init {
                Init::KaimingUniform { fan_in } => (6.0 / fan_in as f64).sqrt(),
                Init::XavierUniform { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Zeros => 0.0,
            };
            let data: Vec<f64> =
                (0..n).map(|_| if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) }).collect();
            params.insert(s.path.clone(), s.group, Tensor::from_f64(&s.shape, &data)?)?;
        }
        Ok(params)
    }
}

pub fn conv<'t, T: Real>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    x.conv2d(p.var(&format!("{name}.weight"))?, Some(p.var(&format!("{name}.bias"))?), 1, pad)
}

/// 3x3 convolution followed by GELU.
pub fn conv_block<'t, T: Real>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(conv(p, name, x, 1)?.gelu())
}

/// `x W + b` over the trailing axis.
pub fn linear<'t, T: Real>(p: &BoundParams<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(p.var(&format!("{name}.weight"))?)?.add(p.var(&format!("{name}.bias"))?)
}

pub struct AttentionOut<'t, T: Real> {
    /// N x Lq x d.
    pub output: Var<'t, T>,
    /// (N * heads) x Lq x Lk softmax weights.
    pub weights: Var<'t, T>,
}

/// Multi-head scaled dot-product attention of `query` tokens (N x Lq x d)
/// over `kv` tokens (N x Lk x d) with learned Q/K/V/output projections.
pub fn cross_attention<'t, T: Real>(
    p: &BoundParams<'t, T>,
    name: &str,
    query: Var<'t, T>,
    kv: Var<'t, T>,
    heads: usize,
) -> Result<AttentionOut<'t, T>> {
    let (qs, ks) = (query.shape(), kv.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || qs[2] % heads != 0 {
        return Err(crate::error::Error::shape("cross_attention", &qs, &ks));
    }
    let (n, lq, lk, d) = (qs[0], qs[1], ks[1], qs[2]);
    let dh = d / heads;
    let split = |x: Var<'t, T>, l: usize| -> Result<Var<'t, T>> {
        x.reshape(&[n, l, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * heads, l, dh])
    };
    let q = split(linear(p, &format!("{name}.q"), query)?, lq)?;
    let k = split(kv.matmul(p.var(&format!("{name}.k.weight"))?)?, lk)?;
    let v = split(linear(p, &format!("{name}.v"), kv)?, lk)?;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let scores = q.matmul(k.transpose(1, 2)?)?.mul_scalar(scale);
    let weights = scores.softmax(2)?;
    let ctx = weights.matmul(v)?.reshape(&[n, heads, lq, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, lq, d])?;
    Ok(AttentionOut { output: linear(p, &format!("{name}.o"), ctx)?, weights })
}
