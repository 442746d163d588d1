//! Forward and backward passes of the denoiser.

use super::layers::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, silu,
    silu_grad, timestep_features, AttentionShape, Operand,
};
use super::layout::{build_attention_mask, positional_encoding};
use super::params::{BlockParams, DenoiserParameters, ModulationParams};
use super::InjectionStrategy;
use crate::action::ActionCommand;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// A batch of chunk pairs, already patchified.
///
/// `cond` is `[batch × n_cond × patch_dim]` and `target` `[batch × n_tgt × patch_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a, T> {
    pub cond: &'a [T],
    pub target: &'a [T],
    pub actions: &'a [ActionCommand],
    pub t_cond: &'a [usize],
    pub t_target: &'a [usize],
}

impl<T> DenoiserInput<'_, T> {
    pub fn batch(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    n_cond: usize,
    n_img: usize,
    /// Sequence length including the action token, if any.
    seq: usize,
    dim: usize,
    patch_dim: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// Row of the per-group embedding matrix (`2·b + group`) that modulates sequence row `r`.
    fn group_row(&self, r: usize) -> usize {
        let (b, i) = (r / self.seq, r % self.seq);
        2 * b + usize::from(i >= self.n_cond)
    }
}

struct EmbedCache<T> {
    features: Vec<T>,
    time_pre: Vec<T>,
    time_act: Vec<T>,
    one_hot: Vec<T>,
    action_pre: Vec<T>,
    action_act: Vec<T>,
    /// `[batch × d]`, empty without an action module.
    action_embed: Vec<T>,
    /// Combined group embeddings `[2·batch × d]`.
    combined: Vec<T>,
    /// `silu(combined)`, the input of every modulation head.
    head_input: Vec<T>,
}

struct CrossCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
}

struct BlockCache<T> {
    raw: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    u1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    attn_branch: Vec<T>,
    cross: Option<CrossCache<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    u2: Vec<T>,
    mlp_pre: Vec<T>,
    mlp_act: Vec<T>,
    mlp_branch: Vec<T>,
}

/// Activations kept by [`DenoiserParameters::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    geo: Geometry,
    tokens: Vec<T>,
    embed: EmbedCache<T>,
    blocks: Vec<BlockCache<T>>,
    final_raw: Vec<T>,
    final_xhat: Vec<T>,
    final_rstd: Vec<T>,
    final_u: Vec<T>,
}

// Offsets of the six modulation vectors inside a raw `6d` head output.
const BETA1: usize = 0;
const GAMMA1: usize = 1;
const ALPHA1: usize = 2;
const BETA2: usize = 3;
const GAMMA2: usize = 4;
const ALPHA2: usize = 5;

/// `γ ⊙ xhat + β` with `γ = 1 + raw[gamma]`, per row group.
fn modulate_rows<T: Real>(geo: &Geometry, xhat: &[T], raw: &[T], width: usize, beta: usize, gamma: usize) -> Vec<T> {
    let d = geo.dim;
    let mut out = Vec::with_capacity(xhat.len());
    for (r, row) in xhat.chunks_exact(d).enumerate() {
        let m = &raw[geo.group_row(r) * width..];
        let (b, g) = (&m[beta * d..(beta + 1) * d], &m[gamma * d..(gamma + 1) * d]);
        out.extend(row.iter().zip(g).zip(b).map(|((&v, &g), &b)| (T::one() + g) * v + b));
    }
    out
}

/// Backward of [`modulate_rows`]: accumulates into `d_raw` and returns `dxhat`.
#[allow(clippy::too_many_arguments)]
fn modulate_rows_backward<T: Real>(
    geo: &Geometry,
    xhat: &[T],
    raw: &[T],
    du: &[T],
    d_raw: &mut [T],
    width: usize,
    beta: usize,
    gamma: usize,
) -> Vec<T> {
    let d = geo.dim;
    let mut dxhat = Vec::with_capacity(xhat.len());
    for (r, (row, g_row)) in xhat.chunks_exact(d).zip(du.chunks_exact(d)).enumerate() {
        let base = geo.group_row(r) * width;
        for j in 0..d {
            d_raw[base + gamma * d + j] += g_row[j] * row[j];
            d_raw[base + beta * d + j] += g_row[j];
            dxhat.push(g_row[j] * (T::one() + raw[base + gamma * d + j]));
        }
    }
    dxhat
}

/// `x += α ⊙ branch` per row group.
fn gated_add<T: Real>(geo: &Geometry, x: &mut [T], branch: &[T], raw: &[T], alpha: usize) {
    let d = geo.dim;
    for (r, (row, br)) in x.chunks_exact_mut(d).zip(branch.chunks_exact(d)).enumerate() {
        let a = &raw[geo.group_row(r) * 6 * d + alpha * d..][..d];
        for j in 0..d {
            row[j] += a[j] * br[j];
        }
    }
}

/// Backward of [`gated_add`]: returns `d branch`.
fn gated_add_backward<T: Real>(geo: &Geometry, dx: &[T], branch: &[T], raw: &[T], d_raw: &mut [T], alpha: usize) -> Vec<T> {
    let d = geo.dim;
    let mut out = Vec::with_capacity(dx.len());
    for (r, (g, br)) in dx.chunks_exact(d).zip(branch.chunks_exact(d)).enumerate() {
        let base = geo.group_row(r) * 6 * d + alpha * d;
        for j in 0..d {
            d_raw[base + j] += g[j] * br[j];
            out.push(g[j] * raw[base + j]);
        }
    }
    out
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl<T: Real> DenoiserParameters<T> {
    fn geometry(&self, input: &DenoiserInput<'_, T>) -> Result<Geometry> {
        let cfg = &self.config;
        let layout = cfg.layout();
        let batch = input.batch();
        let p = cfg.patch_dim();
        let token = usize::from(cfg.action == Some(InjectionStrategy::SelfAttnToken));
        if input.cond.len() != batch * layout.n_cond * p || input.target.len() != batch * layout.n_tgt * p {
            return Err(Error::Shape(format!(
                "expected {} condition and {} target values for batch {batch}, got {} and {}",
                batch * layout.n_cond * p,
                batch * layout.n_tgt * p,
                input.cond.len(),
                input.target.len()
            )));
        }
        if input.t_cond.len() != batch || input.t_target.len() != batch {
            return Err(Error::Shape("one condition and one target timestep per example".into()));
        }
        if cfg.action.is_none() && input.actions.iter().any(|a| a.is_command()) {
            return Err(Error::InvalidConfig("model has no action module; only the zero action is accepted".into()));
        }
        Ok(Geometry {
            batch,
            n_cond: layout.n_cond,
            n_img: layout.tokens(),
            seq: layout.tokens() + token,
            dim: cfg.dim,
            patch_dim: p,
        })
    }

    fn embed(&self, actions: &[ActionCommand], t_cond: &[usize], t_target: &[usize]) -> EmbedCache<T> {
        let d = self.config.dim;
        let batch = actions.len();
        let mut features = Vec::with_capacity(2 * batch * d);
        for b in 0..batch {
            features.extend(timestep_features::<T>(t_cond[b], d));
            features.extend(timestep_features::<T>(t_target[b], d));
        }
        let time_pre = linear(&features, 2 * batch, &self.time_hidden);
        let time_act: Vec<T> = time_pre.iter().map(|&v| silu(v)).collect();
        let mut combined = linear(&time_act, 2 * batch, &self.time_out);
        let one_hot: Vec<T> = actions.iter().flat_map(|a| a.one_hot()).map(|v| T::lit(v as f64)).collect();
        let (mut action_pre, mut action_act, mut action_embed) = (Vec::new(), Vec::new(), Vec::new());
        if let Some(ap) = &self.action {
            action_pre = linear(&one_hot, batch, &ap.hidden);
            action_act = action_pre.iter().map(|&v| gelu(v)).collect();
            action_embed = linear(&action_act, batch, &ap.out);
            if self.config.action == Some(InjectionStrategy::Adaln) {
                for (b, emb) in action_embed.chunks_exact(d).enumerate() {
                    add_into(&mut combined[2 * b * d..(2 * b + 1) * d], emb);
                    add_into(&mut combined[(2 * b + 1) * d..(2 * b + 2) * d], emb);
                }
            }
        }
        let head_input = combined.iter().map(|&v| silu(v)).collect();
        EmbedCache { features, time_pre, time_act, one_hot, action_pre, action_act, action_embed, combined, head_input }
    }

    /// Combined embeddings of the condition group (`t_cond`) and the target group
    /// (`t_target`) for one example. Both include the same action embedding under
    /// adaptive-LayerNorm injection.
    pub fn embed_condition(&self, action: ActionCommand, t_target: usize, t_cond: usize) -> Result<(Vec<T>, Vec<T>)> {
        if self.config.action.is_none() && action.is_command() {
            return Err(Error::InvalidConfig("model has no action module".into()));
        }
        let e = self.embed(&[action], &[t_cond], &[t_target]);
        let d = self.config.dim;
        Ok((e.combined[..d].to_vec(), e.combined[d..].to_vec()))
    }

    /// Action embedding alone, or `None` without an action module.
    pub fn action_embedding(&self, action: ActionCommand) -> Option<Vec<T>> {
        self.action.as_ref()?;
        Some(self.embed(&[action], &[0], &[0]).action_embed)
    }

    /// Modulation parameters that block `block` derives from a combined embedding.
    pub fn modulation_params(&self, block: usize, embedding: &[T]) -> ModulationParams<T> {
        let s: Vec<T> = embedding.iter().map(|&v| silu(v)).collect();
        ModulationParams::from_raw(&linear(&s, 1, &self.blocks[block].modulation))
    }

    fn sequence_mask(&self, geo: &Geometry) -> Vec<bool> {
        let base = build_attention_mask(&self.config.layout());
        if geo.seq == geo.n_img {
            return base;
        }
        let n = geo.seq;
        let mut mask = vec![false; n * n];
        for i in 0..geo.n_img {
            mask[i * n..i * n + geo.n_img].copy_from_slice(&base[i * geo.n_img..(i + 1) * geo.n_img]);
            mask[i * n + geo.n_img] = true;
        }
        mask[n * n - 1] = true;
        mask
    }

    fn block_forward(
        &self,
        blk: &BlockParams<T>,
        geo: &Geometry,
        x: &mut [T],
        head_input: &[T],
        action_embed: &[T],
        mask: &[bool],
    ) -> BlockCache<T> {
        let d = geo.dim;
        let rows = geo.rows();
        let shape = AttentionShape { batch: geo.batch, heads: self.config.heads, head_dim: self.config.head_dim() };
        let raw = linear(head_input, 2 * geo.batch, &blk.modulation);

        let (xhat1, rstd1) = layer_norm(x, d);
        let u1 = modulate_rows(geo, &xhat1, &raw, 6 * d, BETA1, GAMMA1);
        let qkv = linear(&u1, rows, &blk.qkv);
        let op = |col| Operand { data: &qkv[..], col, rs: 3 * d, seq: geo.seq };
        let mut att = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); geo.batch * shape.heads * geo.seq * geo.seq];
        attention(&shape, op(0), op(d), op(2 * d), Some(mask), &mut att, &mut probs);
        let attn_branch = linear(&att, rows, &blk.attn_out);
        gated_add(geo, x, &attn_branch, &raw, ALPHA1);

        let cross = blk.cross.as_ref().map(|cp| {
            let (xhat, rstd) = layer_norm(x, d);
            let q = linear(&xhat, rows, &cp.query);
            let k = linear(action_embed, geo.batch, &cp.key);
            let v = linear(action_embed, geo.batch, &cp.value);
            let mut att = vec![T::zero(); rows * d];
            let mut probs = vec![T::zero(); geo.batch * shape.heads * geo.seq];
            attention(
                &shape,
                Operand { data: &q, col: 0, rs: d, seq: geo.seq },
                Operand { data: &k, col: 0, rs: d, seq: 1 },
                Operand { data: &v, col: 0, rs: d, seq: 1 },
                None,
                &mut att,
                &mut probs,
            );
            add_into(x, &linear(&att, rows, &cp.out));
            CrossCache { xhat, rstd, q, k, v, probs, att }
        });

        let (xhat2, rstd2) = layer_norm(x, d);
        let u2 = modulate_rows(geo, &xhat2, &raw, 6 * d, BETA2, GAMMA2);
        let mlp_pre = linear(&u2, rows, &blk.mlp_in);
        let mlp_act: Vec<T> = mlp_pre.iter().map(|&v| gelu(v)).collect();
        let mlp_branch = linear(&mlp_act, rows, &blk.mlp_out);
        gated_add(geo, x, &mlp_branch, &raw, ALPHA2);

        BlockCache {
            raw,
            xhat1,
            rstd1,
            u1,
            qkv,
            probs,
            att,
            attn_branch,
            cross,
            xhat2,
            rstd2,
            u2,
            mlp_pre,
            mlp_act,
            mlp_branch,
        }
    }

    /// Accumulates parameter gradients of one block given `dx` at its output;
    /// on return `dx` holds the gradient at its input.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        blk: &BlockParams<T>,
        grad: &mut BlockParams<T>,
        cache: &BlockCache<T>,
        geo: &Geometry,
        dx: &mut [T],
        head_input: &[T],
        d_head_input: &mut [T],
        action_embed: &[T],
        d_action_embed: &mut [T],
    ) {
        let d = geo.dim;
        let rows = geo.rows();
        let shape = AttentionShape { batch: geo.batch, heads: self.config.heads, head_dim: self.config.head_dim() };
        let mut d_raw = vec![T::zero(); cache.raw.len()];

        // feed-forward branch
        let dm = gated_add_backward(geo, dx, &cache.mlp_branch, &cache.raw, &mut d_raw, ALPHA2);
        let mut d_act = vec![T::zero(); cache.mlp_act.len()];
        linear_backward(&cache.mlp_act, rows, &blk.mlp_out, &dm, &mut grad.mlp_out, Some(&mut d_act));
        for (g, &p) in d_act.iter_mut().zip(&cache.mlp_pre) {
            *g *= gelu_grad(p);
        }
        let mut du2 = vec![T::zero(); rows * d];
        linear_backward(&cache.u2, rows, &blk.mlp_in, &d_act, &mut grad.mlp_in, Some(&mut du2));
        let dxhat2 = modulate_rows_backward(geo, &cache.xhat2, &cache.raw, &du2, &mut d_raw, 6 * d, BETA2, GAMMA2);
        layer_norm_backward(&cache.xhat2, &cache.rstd2, &dxhat2, d, dx);

        if let (Some(cc), Some(cp), Some(cg)) = (&cache.cross, &blk.cross, grad.cross.as_mut()) {
            let mut d_att = vec![T::zero(); rows * d];
            linear_backward(&cc.att, rows, &cp.out, dx, &mut cg.out, Some(&mut d_att));
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); geo.batch * d];
            let mut dv = vec![T::zero(); geo.batch * d];
            attention_backward(
                &shape,
                Operand { data: &cc.q, col: 0, rs: d, seq: geo.seq },
                Operand { data: &cc.k, col: 0, rs: d, seq: 1 },
                Operand { data: &cc.v, col: 0, rs: d, seq: 1 },
                &cc.probs,
                &d_att,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            linear_backward(action_embed, geo.batch, &cp.key, &dk, &mut cg.key, Some(&mut *d_action_embed));
            linear_backward(action_embed, geo.batch, &cp.value, &dv, &mut cg.value, Some(&mut *d_action_embed));
            let mut dxhat = vec![T::zero(); rows * d];
            linear_backward(&cc.xhat, rows, &cp.query, &dq, &mut cg.query, Some(&mut dxhat));
            layer_norm_backward(&cc.xhat, &cc.rstd, &dxhat, d, dx);
        }

        // attention branch
        let da = gated_add_backward(geo, dx, &cache.attn_branch, &cache.raw, &mut d_raw, ALPHA1);
        let mut d_att = vec![T::zero(); rows * d];
        linear_backward(&cache.att, rows, &blk.attn_out, &da, &mut grad.attn_out, Some(&mut d_att));
        let op = |col| Operand { data: &cache.qkv[..], col, rs: 3 * d, seq: geo.seq };
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        attention_backward(&shape, op(0), op(d), op(2 * d), &cache.probs, &d_att, &mut dq, &mut dk, &mut dv);
        let mut d_qkv = Vec::with_capacity(rows * 3 * d);
        for r in 0..rows {
            d_qkv.extend_from_slice(&dq[r * d..(r + 1) * d]);
            d_qkv.extend_from_slice(&dk[r * d..(r + 1) * d]);
            d_qkv.extend_from_slice(&dv[r * d..(r + 1) * d]);
        }
        let mut du1 = vec![T::zero(); rows * d];
        linear_backward(&cache.u1, rows, &blk.qkv, &d_qkv, &mut grad.qkv, Some(&mut du1));
        let dxhat1 = modulate_rows_backward(geo, &cache.xhat1, &cache.raw, &du1, &mut d_raw, 6 * d, BETA1, GAMMA1);
        layer_norm_backward(&cache.xhat1, &cache.rstd1, &dxhat1, d, dx);

        linear_backward(head_input, 2 * geo.batch, &blk.modulation, &d_raw, &mut grad.modulation, Some(d_head_input));
    }

    fn run(
        &self,
        input: &DenoiserInput<'_, T>,
        positions: Option<&[T]>,
        keep: bool,
    ) -> Result<(Vec<T>, Option<ForwardCache<T>>)> {
        let geo = self.geometry(input)?;
        let d = geo.dim;
        let p = geo.patch_dim;
        let layout = self.config.layout();
        let own_positions;
        let pos = match positions {
            Some(pos) => {
                if pos.len() != geo.n_img * d {
                    return Err(Error::Shape("positional table size".into()));
                }
                pos
            }
            None => {
                own_positions = positional_encoding::<T>(&layout, d);
                &own_positions[..]
            }
        };

        let mut tokens = Vec::with_capacity(geo.batch * geo.n_img * p);
        for b in 0..geo.batch {
            tokens.extend_from_slice(&input.cond[b * layout.n_cond * p..(b + 1) * layout.n_cond * p]);
            tokens.extend_from_slice(&input.target[b * layout.n_tgt * p..(b + 1) * layout.n_tgt * p]);
        }
        let embed = self.embed(input.actions, input.t_cond, input.t_target);
        let patches = linear(&tokens, geo.batch * geo.n_img, &self.patch_embed);
        let mut x = Vec::with_capacity(geo.rows() * d);
        for b in 0..geo.batch {
            for i in 0..geo.n_img {
                let row = &patches[(b * geo.n_img + i) * d..][..d];
                x.extend(row.iter().zip(&pos[i * d..(i + 1) * d]).map(|(&a, &e)| a + e));
            }
            if geo.seq > geo.n_img {
                x.extend_from_slice(&embed.action_embed[b * d..(b + 1) * d]);
            }
        }

        let mask = self.sequence_mask(&geo);
        let mut caches = Vec::new();
        for blk in &self.blocks {
            let c = self.block_forward(blk, &geo, &mut x, &embed.head_input, &embed.action_embed, &mask);
            if keep {
                caches.push(c);
            }
        }

        let img: Vec<T> = (0..geo.batch)
            .flat_map(|b| x[b * geo.seq * d..(b * geo.seq + geo.n_img) * d].iter().copied())
            .collect();
        let final_raw = linear(&embed.head_input, 2 * geo.batch, &self.final_modulation);
        let img_geo = Geometry { seq: geo.n_img, ..geo };
        let (final_xhat, final_rstd) = layer_norm(&img, d);
        let final_u = modulate_rows(&img_geo, &final_xhat, &final_raw, 2 * d, 0, 1);
        let out = linear(&final_u, geo.batch * geo.n_img, &self.unembed);
        let cache = keep.then(|| ForwardCache {
            geo,
            tokens,
            embed,
            blocks: caches,
            final_raw,
            final_xhat,
            final_rstd,
            final_u,
        });
        Ok((out, cache))
    }

    /// Predicted noise for the target tokens, `[batch × n_tgt × patch_dim]`.
    pub fn forward(&self, input: &DenoiserInput<'_, T>) -> Result<Vec<T>> {
        let (all, _) = self.run(input, None, false)?;
        let layout = self.config.layout();
        let p = self.config.patch_dim();
        let n = layout.tokens();
        Ok((0..input.batch())
            .flat_map(|b| all[(b * n + layout.n_cond) * p..(b + 1) * n * p].iter().copied())
            .collect())
    }

    /// Outputs for every image token, `[batch × (n_cond + n_tgt) × patch_dim]`.
    /// Condition rows are computed but carry no meaning.
    pub fn forward_all(&self, input: &DenoiserInput<'_, T>) -> Result<Vec<T>> {
        Ok(self.run(input, None, false)?.0)
    }

    /// Runs block `block` alone on hidden states `x` (`[batch × seq × dim]`, where
    /// `seq` counts the action token when present), conditioned on `input`.
    pub fn apply_block(&self, block: usize, input: &DenoiserInput<'_, T>, x: &mut [T]) -> Result<()> {
        let geo = self.geometry(input)?;
        let blk = self.blocks.get(block).ok_or_else(|| Error::InvalidConfig(format!("no block {block}")))?;
        if x.len() != geo.rows() * geo.dim {
            return Err(Error::Shape(format!("expected {} hidden values, got {}", geo.rows() * geo.dim, x.len())));
        }
        let embed = self.embed(input.actions, input.t_cond, input.t_target);
        self.block_forward(blk, &geo, x, &embed.head_input, &embed.action_embed, &self.sequence_mask(&geo));
        Ok(())
    }

    /// [`Self::forward_all`] with a caller-supplied `[tokens × dim]` positional table.
    pub fn forward_with_positions(&self, input: &DenoiserInput<'_, T>, positions: &[T]) -> Result<Vec<T>> {
        Ok(self.run(input, Some(positions), false)?.0)
    }

    /// [`Self::forward_all`] keeping the activations needed by [`Self::backward`].
    pub fn forward_train(&self, input: &DenoiserInput<'_, T>) -> Result<(Vec<T>, ForwardCache<T>)> {
        let (out, cache) = self.run(input, None, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Accumulates into `grads` the parameter gradients of a scalar loss whose
    /// gradient with respect to the [`Self::forward_train`] output is `d_out`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &[T], grads: &mut DenoiserParameters<T>) -> Result<()> {
        let geo = cache.geo;
        let d = geo.dim;
        let rows_img = geo.batch * geo.n_img;
        if d_out.len() != rows_img * geo.patch_dim {
            return Err(Error::Shape(format!("output gradient has {} values, expected {}", d_out.len(), rows_img * geo.patch_dim)));
        }
        let e = &cache.embed;
        let mut d_head = vec![T::zero(); e.head_input.len()];
        let mut d_aemb = vec![T::zero(); e.action_embed.len()];

        let mut du = vec![T::zero(); rows_img * d];
        linear_backward(&cache.final_u, rows_img, &self.unembed, d_out, &mut grads.unembed, Some(&mut du));
        let img_geo = Geometry { seq: geo.n_img, ..geo };
        let mut d_final_raw = vec![T::zero(); cache.final_raw.len()];
        let dxhat = modulate_rows_backward(&img_geo, &cache.final_xhat, &cache.final_raw, &du, &mut d_final_raw, 2 * d, 0, 1);
        let mut d_img = vec![T::zero(); rows_img * d];
        layer_norm_backward(&cache.final_xhat, &cache.final_rstd, &dxhat, d, &mut d_img);
        linear_backward(&e.head_input, 2 * geo.batch, &self.final_modulation, &d_final_raw, &mut grads.final_modulation, Some(&mut d_head));

        let mut dx = vec![T::zero(); geo.rows() * d];
        for b in 0..geo.batch {
            dx[b * geo.seq * d..(b * geo.seq + geo.n_img) * d]
                .copy_from_slice(&d_img[b * geo.n_img * d..(b + 1) * geo.n_img * d]);
        }
        for (i, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            self.block_backward(
                blk,
                &mut grads.blocks[i],
                bc,
                &geo,
                &mut dx,
                &e.head_input,
                &mut d_head,
                &e.action_embed,
                &mut d_aemb,
            );
        }

        let mut d_patches = Vec::with_capacity(rows_img * d);
        for b in 0..geo.batch {
            d_patches.extend_from_slice(&dx[b * geo.seq * d..(b * geo.seq + geo.n_img) * d]);
            if geo.seq > geo.n_img {
                add_into(&mut d_aemb[b * d..(b + 1) * d], &dx[(b * geo.seq + geo.n_img) * d..][..d]);
            }
        }
        linear_backward(&cache.tokens, rows_img, &self.patch_embed, &d_patches, &mut grads.patch_embed, None);

        let d_comb: Vec<T> = d_head.iter().zip(&e.combined).map(|(&g, &c)| g * silu_grad(c)).collect();
        let mut d_time_act = vec![T::zero(); e.time_act.len()];
        linear_backward(&e.time_act, 2 * geo.batch, &self.time_out, &d_comb, &mut grads.time_out, Some(&mut d_time_act));
        for (g, &p) in d_time_act.iter_mut().zip(&e.time_pre) {
            *g *= silu_grad(p);
        }
        linear_backward(&e.features, 2 * geo.batch, &self.time_hidden, &d_time_act, &mut grads.time_hidden, None);

        if let (Some(ap), Some(ag)) = (&self.action, grads.action.as_mut()) {
            if self.config.action == Some(InjectionStrategy::Adaln) {
                for b in 0..geo.batch {
                    for g in 0..2 {
                        add_into(&mut d_aemb[b * d..(b + 1) * d], &d_comb[(2 * b + g) * d..(2 * b + g + 1) * d]);
                    }
                }
            }
            let mut d_act = vec![T::zero(); e.action_act.len()];
            linear_backward(&e.action_act, geo.batch, &ap.out, &d_aemb, &mut ag.out, Some(&mut d_act));
            for (g, &p) in d_act.iter_mut().zip(&e.action_pre) {
                *g *= gelu_grad(p);
            }
            linear_backward(&e.one_hot, geo.batch, &ap.hidden, &d_act, &mut ag.hidden, None);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::seed;
    use rand::Rng;

    fn tiny(action: Option<InjectionStrategy>, layers: usize) -> DenoiserConfig {
        DenoiserConfig { height: 2, width: 4, chunk_len: 1, patch: 2, dim: 8, heads: 2, layers, mlp_ratio: 2, action }
    }

    struct Batch {
        cond: Vec<f64>,
        target: Vec<f64>,
        actions: Vec<ActionCommand>,
        t_cond: Vec<usize>,
        t_target: Vec<usize>,
    }

    impl Batch {
        fn random(cfg: &DenoiserConfig, actions: Vec<ActionCommand>, seed: u64) -> Self {
            let mut rng = seed::rng(seed, &[1]);
            let n = actions.len() * cfg.layout().n_cond * cfg.patch_dim();
            let mut v = |_| rng.random_range(-1.0..1.0);
            let cond = (0..n).map(&mut v).collect();
            let target = (0..n).map(&mut v).collect();
            let b = actions.len();
            Batch { cond, target, actions, t_cond: (0..b).map(|i| 17 * i).collect(), t_target: (0..b).map(|i| 300 + 91 * i).collect() }
        }

        fn input(&self) -> DenoiserInput<'_, f64> {
            DenoiserInput {
                cond: &self.cond,
                target: &self.target,
                actions: &self.actions,
                t_cond: &self.t_cond,
                t_target: &self.t_target,
            }
        }
    }

    fn scramble(p: &mut DenoiserParameters<f64>, seed: u64) {
        let mut rng = seed::rng(seed, &[2]);
        p.for_each_mut(|_, t| {
            for v in &mut t.data {
                *v += rng.random_range(-0.4..0.4);
            }
        });
    }

    #[test]
    fn blocks_are_identity_at_init() {
        for strategy in InjectionStrategy::ALL {
            let cfg = DenoiserConfig { chunk_len: 2, height: 4, ..tiny(Some(strategy), 2) };
            let params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(3, &[])).unwrap();
            let batch = Batch::random(&cfg, vec![ActionCommand::Left, ActionCommand::Zero], 5);
            let input = batch.input();
            let geo = params.geometry(&input).unwrap();
            let e = params.embed(input.actions, input.t_cond, input.t_target);
            let mask = params.sequence_mask(&geo);
            let x0: Vec<f64> = (0..geo.rows() * geo.dim).map(|i| (i as f64 * 0.71).sin()).collect();
            for blk in &params.blocks {
                let mut x = x0.clone();
                params.block_forward(blk, &geo, &mut x, &e.head_input, &e.action_embed, &mask);
                assert_eq!(x, x0, "{strategy}");
            }
        }
    }

    #[test]
    fn init_output_is_unembedded_input_path_for_any_action() {
        for strategy in InjectionStrategy::ALL {
            let cfg = tiny(Some(strategy), 2);
            let params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(4, &[])).unwrap();
            let mut outs = Vec::new();
            for a in [ActionCommand::Forward, ActionCommand::Left, ActionCommand::Right, ActionCommand::Zero] {
                let batch = Batch::random(&cfg, vec![a], 9);
                let out = params.forward_all(&batch.input()).unwrap();
                let mut tokens = batch.cond.clone();
                tokens.extend(&batch.target);
                let n = cfg.layout().tokens();
                let pos = positional_encoding::<f64>(&cfg.layout(), cfg.dim);
                let h: Vec<f64> = linear(&tokens, n, &params.patch_embed).iter().zip(&pos).map(|(a, b)| a + b).collect();
                let want = linear(&layer_norm(&h, cfg.dim).0, n, &params.unembed);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
                outs.push(out);
            }
            assert!(outs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn left_and_right_embeddings_differ() {
        let params = DenoiserParameters::<f64>::init(DenoiserConfig::reduced(), &mut seed::rng(5, &[])).unwrap();
        let (_, l) = params.embed_condition(ActionCommand::Left, 500, 10).unwrap();
        let (_, r) = params.embed_condition(ActionCommand::Right, 500, 10).unwrap();
        let dist: f64 = l.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
        let again = params.embed_condition(ActionCommand::Left, 500, 10).unwrap().1;
        assert_eq!(l, again);
    }

    #[test]
    fn zero_action_embedding_is_bias_path() {
        let params = DenoiserParameters::<f64>::init(DenoiserConfig::reduced(), &mut seed::rng(6, &[])).unwrap();
        let ap = params.action.as_ref().unwrap();
        let hidden: Vec<f64> = ap.hidden.bias.data.iter().map(|&v| gelu(v)).collect();
        let aemb = linear(&hidden, 1, &ap.out);
        let d = params.config.dim;
        let feats = timestep_features::<f64>(250, d);
        let pre: Vec<f64> = linear(&feats, 1, &params.time_hidden).into_iter().map(silu).collect();
        let temb = linear(&pre, 1, &params.time_out);
        let (_, got) = params.embed_condition(ActionCommand::Zero, 250, 0).unwrap();
        for j in 0..d {
            assert!((got[j] - temb[j] - aemb[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_one_model_rejects_commands() {
        let params = DenoiserParameters::<f64>::init(tiny(None, 1), &mut seed::rng(7, &[])).unwrap();
        let batch = Batch::random(&params.config, vec![ActionCommand::Left], 1);
        assert!(matches!(params.forward(&batch.input()), Err(Error::InvalidConfig(_))));
        let batch = Batch::random(&params.config, vec![ActionCommand::Zero], 1);
        assert_eq!(params.forward(&batch.input()).unwrap().len(), 2 * 12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for strategy in [None, Some(InjectionStrategy::Adaln), Some(InjectionStrategy::SelfAttnToken), Some(InjectionStrategy::CrossAttn)] {
            let cfg = tiny(strategy, 1);
            assert_eq!(cfg.layout().tokens(), 4);
            let mut params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(11, &[])).unwrap();
            scramble(&mut params, 12);
            let actions = if strategy.is_some() {
                vec![ActionCommand::Left, ActionCommand::Zero]
            } else {
                vec![ActionCommand::Zero, ActionCommand::Zero]
            };
            let batch = Batch::random(&cfg, actions, 13);
            let input = batch.input();
            let mut rng = seed::rng(14, &[]);
            let n_img = cfg.layout().tokens();
            let p = cfg.patch_dim();
            // loss = Σ w · output over target rows only
            let w: Vec<f64> = (0..2 * n_img * p)
                .map(|i| if (i / p) % n_img >= cfg.layout().n_cond { rng.random_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let loss = |prm: &DenoiserParameters<f64>| -> f64 {
                prm.forward_all(&input).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = params.forward_train(&input).unwrap();
            let mut grads = params.zeros_like();
            params.backward(&cache, &w, &mut grads).unwrap();

            let names: Vec<(String, usize)> = params.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
            let mut flat_grads = Vec::new();
            grads.for_each(|_, t| flat_grads.push(t.data.clone()));
            let h = 1e-5;
            for _ in 0..50 {
                let ti = rng.random_range(0..names.len());
                let ei = rng.random_range(0..names[ti].1);
                let bump = |delta: f64| {
                    let mut q = params.clone();
                    let mut k = 0;
                    q.for_each_mut(|_, t| {
                        if k == ti {
                            t.data[ei] += delta;
                        }
                        k += 1;
                    });
                    loss(&q)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = flat_grads[ti][ei];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                assert!(rel < 1e-3, "{:?} {} [{ei}]: analytic {analytic} numeric {numeric}", strategy, names[ti].0);
            }
        }
    }

    #[test]
    fn condition_outputs_carry_no_gradient() {
        let cfg = tiny(Some(InjectionStrategy::Adaln), 1);
        let mut params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(15, &[])).unwrap();
        scramble(&mut params, 16);
        let batch = Batch::random(&cfg, vec![ActionCommand::Right], 17);
        let (_, cache) = params.forward_train(&batch.input()).unwrap();
        let mut grads = params.zeros_like();
        params.backward(&cache, &vec![0.0; 4 * 12], &mut grads).unwrap();
        grads.for_each(|_, t| assert!(t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn swapping_condition_patches_with_their_positions_keeps_targets() {
        let cfg = DenoiserConfig { height: 4, width: 4, chunk_len: 2, patch: 2, dim: 16, heads: 2, layers: 2, mlp_ratio: 2, action: Some(InjectionStrategy::Adaln) };
        let mut params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(18, &[])).unwrap();
        scramble(&mut params, 19);
        let layout = cfg.layout();
        let p = cfg.patch_dim();
        let d = cfg.dim;
        let batch = Batch::random(&cfg, vec![ActionCommand::Forward], 20);
        let pos = positional_encoding::<f64>(&layout, d);
        let base = params.forward_with_positions(&batch.input(), &pos).unwrap();

        let (i, j) = (1, 6);
        let mut swapped = Batch { cond: batch.cond.clone(), ..Batch::random(&cfg, vec![ActionCommand::Forward], 20) };
        for k in 0..p {
            swapped.cond.swap(i * p + k, j * p + k);
        }
        let mut pos2 = pos.clone();
        for k in 0..d {
            pos2.swap(i * d + k, j * d + k);
        }
        let out = params.forward_with_positions(&swapped.input(), &pos2).unwrap();
        let n = layout.tokens();
        for t in 0..n {
            let src = if t == i { j } else if t == j { i } else { t };
            for k in 0..p {
                assert!((out[t * p + k] - base[src * p + k]).abs() < 1e-10);
            }
        }
    }
}
