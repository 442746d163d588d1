use rand::Rng;

use super::{DenoiserConfig, InjectionStrategy};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `y = x · weight + bias` with `weight: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    /// Gaussian weights with variance `gain² · 2 / (fan_in + fan_out)`, zero bias.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear { weight: Tensor::randn(&[fan_in, fan_out], std, rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear { weight: Tensor::randn(&[fan_in, fan_out], std, rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape[1]
    }
}

/// Action MLP: one-hot → hidden (width d, GELU) → d.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionParams<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossParams<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// Produces `[β1, γ1 − 1, α1, β2, γ2 − 1, α2]` from the group embedding.
    pub modulation: Linear<T>,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub cross: Option<CrossParams<T>>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

/// Effective modulation for one token group of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams<T> {
    pub alpha1: Vec<T>,
    pub gamma1: Vec<T>,
    pub beta1: Vec<T>,
    pub alpha2: Vec<T>,
    pub gamma2: Vec<T>,
    pub beta2: Vec<T>,
}

impl<T: Real> ModulationParams<T> {
    /// Splits a raw `6d` head output.
    pub fn from_raw(raw: &[T]) -> Self {
        let d = raw.len() / 6;
        let part = |i: usize| raw[i * d..(i + 1) * d].to_vec();
        let one_plus = |i: usize| raw[i * d..(i + 1) * d].iter().map(|&v| T::one() + v).collect();
        ModulationParams {
            beta1: part(0),
            gamma1: one_plus(1),
            alpha1: part(2),
            beta2: part(3),
            gamma2: one_plus(4),
            alpha2: part(5),
        }
    }
}

/// All learnable weights of the denoiser plus its configuration. The same type
/// doubles as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParameters<T> {
    pub config: DenoiserConfig,
    pub patch_embed: Linear<T>,
    pub time_hidden: Linear<T>,
    pub time_out: Linear<T>,
    pub action: Option<ActionParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
    /// Produces `[β, γ − 1]` for the output norm.
    pub final_modulation: Linear<T>,
    pub unembed: Linear<T>,
}

fn cross_params<T: Real, R: Rng + ?Sized>(d: usize, rng: &mut R) -> CrossParams<T> {
    CrossParams {
        query: Linear::xavier(d, d, 1.0, rng),
        key: Linear::xavier(d, d, 1.0, rng),
        value: Linear::xavier(d, d, 1.0, rng),
        out: Linear::zeros(d, d),
    }
}

impl<T: Real> DenoiserParameters<T> {
    /// Fresh weights. Every modulation head is zero, so each block starts as the
    /// identity and the output norm as a plain LayerNorm.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p = config.patch_dim();
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                modulation: Linear::zeros(d, 6 * d),
                qkv: Linear::xavier(d, 3 * d, 1.0, rng),
                attn_out: Linear::xavier(d, d, 1.0, rng),
                cross: None,
                mlp_in: Linear::xavier(d, config.mlp_ratio * d, 1.0, rng),
                mlp_out: Linear::xavier(config.mlp_ratio * d, d, 1.0, rng),
            })
            .collect();
        let mut params = DenoiserParameters {
            config: DenoiserConfig { action: None, ..config },
            patch_embed: Linear::xavier(p, d, 1.0, rng),
            time_hidden: Linear::normal(d, d, 0.02, rng),
            time_out: Linear::normal(d, d, 0.02, rng),
            action: None,
            blocks,
            final_modulation: Linear::zeros(d, 2 * d),
            unembed: Linear::normal(d, p, 0.02, rng),
        };
        if let Some(strategy) = config.action {
            params.attach_action_module(strategy, rng)?;
        }
        Ok(params)
    }

    /// Adds the control module to a model that has none (stage 1 → stage 2).
    /// Cross-attention output projections start at zero, so the attached model
    /// computes exactly what it did before for every action.
    pub fn attach_action_module<R: Rng + ?Sized>(&mut self, strategy: InjectionStrategy, rng: &mut R) -> Result<()> {
        if let Some(existing) = self.config.action {
            return Err(Error::ConfigMismatch(format!("model already has a {existing} action module")));
        }
        let d = self.config.dim;
        self.action = Some(ActionParams { hidden: Linear::xavier(3, d, 1.0, rng), out: Linear::xavier(d, d, 1.0, rng) });
        if strategy == InjectionStrategy::CrossAttn {
            for b in &mut self.blocks {
                b.cross = Some(cross_params(d, rng));
            }
        }
        self.config.action = Some(strategy);
        Ok(())
    }

    /// Zero-filled structure with the same shapes, for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill_zero());
        z
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        let mut lin = |name: String, l: &'a Linear<T>| {
            f(format!("{name}.weight"), &l.weight);
            f(format!("{name}.bias"), &l.bias);
        };
        lin("patch_embed".into(), &self.patch_embed);
        lin("time_hidden".into(), &self.time_hidden);
        lin("time_out".into(), &self.time_out);
        if let Some(a) = &self.action {
            lin("action.hidden".into(), &a.hidden);
            lin("action.out".into(), &a.out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            lin(format!("blocks.{i}.modulation"), &b.modulation);
            lin(format!("blocks.{i}.qkv"), &b.qkv);
            lin(format!("blocks.{i}.attn_out"), &b.attn_out);
            if let Some(c) = &b.cross {
                lin(format!("blocks.{i}.cross.query"), &c.query);
                lin(format!("blocks.{i}.cross.key"), &c.key);
                lin(format!("blocks.{i}.cross.value"), &c.value);
                lin(format!("blocks.{i}.cross.out"), &c.out);
            }
            lin(format!("blocks.{i}.mlp_in"), &b.mlp_in);
            lin(format!("blocks.{i}.mlp_out"), &b.mlp_out);
        }
        lin("final_modulation".into(), &self.final_modulation);
        lin("unembed".into(), &self.unembed);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut Tensor<T>)) {
        let mut lin = |name: String, l: &'a mut Linear<T>| {
            f(&format!("{name}.weight"), &mut l.weight);
            f(&format!("{name}.bias"), &mut l.bias);
        };
        lin("patch_embed".into(), &mut self.patch_embed);
        lin("time_hidden".into(), &mut self.time_hidden);
        lin("time_out".into(), &mut self.time_out);
        if let Some(a) = &mut self.action {
            lin("action.hidden".into(), &mut a.hidden);
            lin("action.out".into(), &mut a.out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            lin(format!("blocks.{i}.modulation"), &mut b.modulation);
            lin(format!("blocks.{i}.qkv"), &mut b.qkv);
            lin(format!("blocks.{i}.attn_out"), &mut b.attn_out);
            if let Some(c) = &mut b.cross {
                lin(format!("blocks.{i}.cross.query"), &mut c.query);
                lin(format!("blocks.{i}.cross.key"), &mut c.key);
                lin(format!("blocks.{i}.cross.value"), &mut c.value);
                lin(format!("blocks.{i}.cross.out"), &mut c.out);
            }
            lin(format!("blocks.{i}.mlp_in"), &mut b.mlp_in);
            lin(format!("blocks.{i}.mlp_out"), &mut b.mlp_out);
        }
        lin("final_modulation".into(), &mut self.final_modulation);
        lin("unembed".into(), &mut self.unembed);
    }

    /// Mutable tensors in the [`Self::for_each`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.for_each_mut(|_, t| out.push(t));
        out
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }

    /// Element-wise `self += other` over matching structures.
    pub fn add_assign(&mut self, other: &Self) {
        let mut src = Vec::new();
        other.for_each(|_, t| src.push(t));
        let mut it = src.into_iter();
        self.for_each_mut(|_, t| {
            let o = it.next().expect("matching parameter structure");
            t.data.iter_mut().zip(&o.data).for_each(|(a, &b)| *a += b);
        });
    }

    pub fn cast<U: Real>(&self) -> DenoiserParameters<U> {
        let lin = |l: &Linear<T>| Linear { weight: l.weight.cast(), bias: l.bias.cast() };
        DenoiserParameters {
            config: self.config,
            patch_embed: lin(&self.patch_embed),
            time_hidden: lin(&self.time_hidden),
            time_out: lin(&self.time_out),
            action: self.action.as_ref().map(|a| ActionParams { hidden: lin(&a.hidden), out: lin(&a.out) }),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    modulation: lin(&b.modulation),
                    qkv: lin(&b.qkv),
                    attn_out: lin(&b.attn_out),
                    cross: b.cross.as_ref().map(|c| CrossParams {
                        query: lin(&c.query),
                        key: lin(&c.key),
                        value: lin(&c.value),
                        out: lin(&c.out),
                    }),
                    mlp_in: lin(&b.mlp_in),
                    mlp_out: lin(&b.mlp_out),
                })
                .collect(),
            final_modulation: lin(&self.final_modulation),
            unembed: lin(&self.unembed),
        }
    }
}
