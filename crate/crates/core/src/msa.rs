//! Multi-size self-attention over non-overlapping patches.
//!
//! Each block runs four attention heads on the same map, with patch sides
//! `h`, `h/2`, `h/4` and `h/8` (never below one pixel). A head flattens every
//! `C x p x p` patch into a token, embeds tokens with full linear maps,
//! attends across all patches of the image and folds the result back into a
//! `(C, h, w)` map. The four maps are concatenated and reduced back to `C`
//! channels by a residual convolution block.

use std::sync::Arc;

use prn_tensor::{Scalar, Var};
use rand::Rng;

use crate::config::{AttentionScale, MsaConfig};
use crate::error::{PrnError, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, ConvSpec, Ctx, Linear, ParamStore};

pub const PATCH_DIVISORS: [usize; 4] = [1, 2, 4, 8];

/// Patch sides for a map of side `h`: `max(1, h / d)` for every divisor `d`.
pub fn patch_sizes(h: usize) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for (slot, &d) in out.iter_mut().zip(&PATCH_DIVISORS) {
        if h >= d && h % d != 0 {
            return Err(PrnError::dim(format!("map side {h} is not divisible by {d}")));
        }
        *slot = (h / d).max(1);
    }
    Ok(out)
}

/// Source index of every element of the `(n, N, C*p*p)` patch layout of an
/// `(n, C, h, w)` map; patches in row-major order, each flattened as
/// `(channel, row, col)`.
pub fn patch_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(PrnError::dim(format!("patch side {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for iy in 0..p {
                        for ix in 0..p {
                            idx.push((((b * c + ch) * h + py * p + iy) * w + px * p + ix) as u32);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn invert(index: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src as usize] = dst as u32;
    }
    inv
}

/// `(n, C, h, w)` to `(n, N, C*p*p)`.
pub fn patchify<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, p: usize) -> Result<Var> {
    let (n, c, h, w) = ctx.tape.value(x).dims4();
    let idx = patch_index(n, c, h, w, p)?;
    Ok(ctx.tape.gather(x, Arc::new(idx), &[n, (h / p) * (w / p), c * p * p]))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(ctx: &mut Ctx<'_, T>, patches: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let n = ctx.tape.shape(patches)[0];
    let idx = invert(&patch_index(n, c, h, w, p)?);
    Ok(ctx.tape.gather(patches, Arc::new(idx), &[n, c, h, w]))
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub patch: usize,
    pub patch_dim: usize,
    pub embed_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Option<Linear>,
    pub scale: AttentionScale,
}

impl AttentionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        patch: usize,
        cfg: &MsaConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let patch_dim = channels * patch * patch;
        let embed_dim = cfg.embed_dim_cap.map_or(patch_dim, |cap| cap.min(patch_dim));
        let q = Linear::new(store, &format!("{name}.q"), patch_dim, embed_dim, rng);
        let k = Linear::new(store, &format!("{name}.k"), patch_dim, embed_dim, rng);
        let v = Linear::new(store, &format!("{name}.v"), patch_dim, embed_dim, rng);
        let out = (embed_dim < patch_dim).then(|| Linear::new(store, &format!("{name}.out"), embed_dim, patch_dim, rng));
        Self { patch, patch_dim, embed_dim, q, k, v, out, scale: cfg.attention_scale }
    }

    pub fn logit_scale(&self) -> f64 {
        match self.scale {
            AttentionScale::Paper => 1.0 / self.patch_dim as f64,
            AttentionScale::Sqrt => 1.0 / (self.patch_dim as f64).sqrt(),
        }
    }

    /// Attention over tokens `(n, N, patch_dim)`. Returns the output tokens
    /// and the `(n, N, N)` attention weights.
    pub fn attend<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var) -> (Var, Var) {
        let shape = ctx.tape.shape(tokens).to_vec();
        let (n, np, cs) = (shape[0], shape[1], shape[2]);
        assert_eq!(cs, self.patch_dim, "token width");
        let flat = ctx.tape.reshape(tokens, &[n * np, cs]);
        let embed = |lin: &Linear, ctx: &mut Ctx<'_, T>| {
            let e = lin.forward(ctx, flat);
            ctx.tape.reshape(e, &[n, np, self.embed_dim])
        };
        let q = embed(&self.q, ctx);
        let k = embed(&self.k, ctx);
        let v = embed(&self.v, ctx);
        let logits = ctx.tape.bmm(q, false, k, true);
        let logits = ctx.tape.scale(logits, T::lit(self.logit_scale()));
        let attn = ctx.tape.softmax(logits);
        let mixed = ctx.tape.bmm(attn, false, v, false);
        let out = match &self.out {
            None => mixed,
            Some(proj) => {
                let flat = ctx.tape.reshape(mixed, &[n * np, self.embed_dim]);
                let y = proj.forward(ctx, flat);
                ctx.tape.reshape(y, &[n, np, cs])
            }
        };
        (out, attn)
    }
}

#[derive(Clone, Debug)]
pub struct MsaBlock {
    pub channels: usize,
    pub side: usize,
    pub heads: Vec<AttentionHead>,
    conv1: ConvBnRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    skip: Conv2d,
}

impl MsaBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        side: usize,
        cfg: &MsaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let heads = patch_sizes(side)?
            .iter()
            .enumerate()
            .map(|(i, &p)| AttentionHead::new(store, &format!("{name}.head{i}"), channels, p, cfg, rng))
            .collect();
        let wide = 4 * channels;
        Ok(Self {
            channels,
            side,
            heads,
            conv1: ConvBnRelu::new(store, &format!("{name}.res1"), ConvSpec::new(wide, channels, 3), rng),
            conv2: Conv2d::new(store, &format!("{name}.res2.conv"), ConvSpec::new(channels, channels, 3), rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.res2.bn"), channels),
            skip: Conv2d::new(store, &format!("{name}.skip"), ConvSpec::new(wide, channels, 1), rng),
        })
    }

    /// `(n, C, h, h)` to `(n, C, h, h)`, plus each head's attention weights.
    pub fn forward_with_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let (_, c, h, w) = ctx.tape.value(x).dims4();
        if c != self.channels || h != self.side || w != self.side {
            return Err(PrnError::dim(format!(
                "MSA block expects (n, {}, {s}, {s}), got (n, {c}, {h}, {w})",
                self.channels,
                s = self.side
            )));
        }
        let mut maps = Vec::with_capacity(self.heads.len());
        let mut attns = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let tokens = patchify(ctx, x, head.patch)?;
            let (out, attn) = head.attend(ctx, tokens);
            maps.push(unpatchify(ctx, out, c, h, w, head.patch)?);
            attns.push(attn);
        }
        let cat = ctx.tape.concat(&maps, 1);
        let y = self.conv1.forward(ctx, cat);
        let y = self.conv2.forward(ctx, y);
        let y = self.bn2.forward(ctx, y);
        let s = self.skip.forward(ctx, cat);
        let sum = ctx.tape.add(y, s);
        Ok((ctx.tape.relu(sum), attns))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(ctx, x)?.0)
    }
}

/// `N` blocks applied in sequence, each with its own parameters.
#[derive(Clone, Debug)]
pub struct MsaStack {
    pub blocks: Vec<MsaBlock>,
}

impl MsaStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        side: usize,
        cfg: &MsaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..cfg.stack_depth)
            .map(|i| MsaBlock::new(store, &format!("{name}.block{i}"), channels, side, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::param_gradient_error;
    use prn_tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> MsaConfig {
        MsaConfig::default()
    }

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_sizes_follow_divisors() {
        assert_eq!(patch_sizes(16).unwrap(), [16, 8, 4, 2]);
        assert_eq!(patch_sizes(8).unwrap(), [8, 4, 2, 1]);
        assert_eq!(patch_sizes(2).unwrap(), [2, 1, 1, 1]);
        assert!(patch_sizes(12).is_err());
    }

    #[test]
    fn patch_counts_and_lengths() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 6, 16, 16]));
        let one = patchify(&mut ctx, x, 16).unwrap();
        assert_eq!(ctx.tape.shape(one), &[1, 1, 6 * 256]);
        let many = patchify(&mut ctx, x, 2).unwrap();
        assert_eq!(ctx.tape.shape(many), &[1, 64, 24]);
        assert!(patchify(&mut ctx, x, 3).is_err());
    }

    #[test]
    fn patch_rows_are_row_major_patches() {
        let store = ParamStore::<f64>::new();
        let mut ctx = Ctx::new(&store, false);
        let src = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let x = ctx.tape.constant(src.clone());
        let p = patchify(&mut ctx, x, 2).unwrap();
        let v = ctx.tape.value(p);
        // Patch 1 is the top-right 2x2 block; its first channel starts at column 2.
        let row = &v.data()[8..16];
        assert_eq!(row, &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    fn head_oracle(store: &ParamStore<f64>, head: &AttentionHead, tokens: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight);
            let b = store.get(l.bias).data();
            let (o, i) = (w.shape()[0], w.shape()[1]);
            (0..o).map(|r| b[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>()).collect()
        };
        let n = tokens.shape()[1];
        let cs = tokens.shape()[2];
        let rows: Vec<&[f64]> = tokens.data().chunks(cs).collect();
        let q: Vec<_> = rows.iter().map(|r| lin(&head.q, r)).collect();
        let k: Vec<_> = rows.iter().map(|r| lin(&head.k, r)).collect();
        let v: Vec<_> = rows.iter().map(|r| lin(&head.v, r)).collect();
        let mut attn = vec![vec![0.0; n]; n];
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                attn[a][b] = q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum::<f64>() * head.logit_scale();
            }
            let m = attn[a].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = attn[a].iter().map(|l| (l - m).exp()).sum();
            for b in 0..n {
                attn[a][b] = (attn[a][b] - m).exp() / z;
            }
            let mixed: Vec<f64> =
                (0..head.embed_dim).map(|d| (0..n).map(|b| attn[a][b] * v[b][d]).sum()).collect();
            out.push(match &head.out {
                Some(p) => lin(p, &mixed),
                None => mixed,
            });
        }
        (out, attn)
    }

    #[test]
    fn attend_matches_double_loop() {
        for (seed, cap) in (0..20).zip([None, Some(3)].into_iter().cycle()) {
            let mut r = rng(seed);
            let mut store = ParamStore::<f64>::new();
            let cfg = MsaConfig { embed_dim_cap: cap, attention_scale: AttentionScale::Paper, ..cfg() };
            let head = AttentionHead::new(&mut store, "h", 2, 2, &cfg, &mut r);
            let n = 1 + (seed as usize % 4);
            let tokens = Tensor::from_fn(&[1, n, 8], |_| r.random_range(-2.0..2.0));
            let mut ctx = Ctx::new(&store, false);
            let t = ctx.tape.constant(tokens.clone());
            let (out, attn) = head.attend(&mut ctx, t);
            let (eo, ea) = head_oracle(&store, &head, &tokens);
            let got = ctx.tape.value(out).data();
            assert!(got.iter().zip(eo.iter().flatten()).all(|(a, b)| (a - b).abs() < 1e-10));
            let got = ctx.tape.value(attn).data();
            assert!(got.iter().zip(ea.iter().flatten()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn single_patch_attends_to_itself() {
        let mut r = rng(1);
        let mut store = ParamStore::<f64>::new();
        let head = AttentionHead::new(&mut store, "h", 4, 1, &cfg(), &mut r);
        let mut ctx = Ctx::new(&store, false);
        let tok = Tensor::from_fn(&[1, 1, 4], |i| i as f64);
        let t = ctx.tape.constant(tok.clone());
        let (out, attn) = head.attend(&mut ctx, t);
        assert_eq!(ctx.tape.value(attn).data(), &[1.0]);
        let flat = ctx.tape.constant(tok.reshape(&[1, 4]));
        let v = head.v.forward(&mut ctx, flat);
        assert_eq!(ctx.tape.value(out).data(), ctx.tape.value(v).data());
    }

    #[test]
    fn identical_patches_give_identical_outputs() {
        let mut r = rng(2);
        let mut store = ParamStore::<f64>::new();
        let head = AttentionHead::new(&mut store, "h", 3, 2, &cfg(), &mut r);
        let row: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let tokens = Tensor::new(&[1, 5, 12], row.repeat(5));
        let mut ctx = Ctx::new(&store, false);
        let t = ctx.tape.constant(tokens);
        let (out, _) = head.attend(&mut ctx, t);
        let rows: Vec<&[f64]> = ctx.tape.value(out).data().chunks(12).collect();
        assert!(rows.iter().all(|r| r == &rows[0]));
    }

    #[test]
    fn block_keeps_shape_and_stack_has_distinct_blocks() {
        let mut r = rng(3);
        let mut store = ParamStore::<f32>::new();
        let cfg = cfg();
        let stack = MsaStack::new(&mut store, "msa", 8, 8, &cfg, &mut r).unwrap();
        assert_eq!(stack.blocks.len(), 3);
        let names: std::collections::HashSet<_> = stack
            .blocks
            .iter()
            .map(|b| b.heads[0].q.weight)
            .collect();
        assert_eq!(names.len(), 3);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.tape.constant(Tensor::zeros(&[2, 8, 8, 8]));
        let y = stack.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 8, 8, 8]);
        assert!(ctx.tape.value(y).is_finite());
        assert!(MsaBlock::new(&mut store, "bad", 8, 12, &cfg, &mut r).is_err());
    }

    #[test]
    fn embed_cap_adds_output_projection() {
        let mut r = rng(4);
        let mut store = ParamStore::<f32>::new();
        let head = AttentionHead::new(&mut store, "h", 64, 4, &cfg(), &mut r);
        assert_eq!((head.patch_dim, head.embed_dim), (1024, 256));
        assert!(head.out.is_some());
        let head = AttentionHead::new(&mut store, "g", 4, 4, &cfg(), &mut r);
        assert!(head.out.is_none());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let cfg = MsaConfig { embed_dim_cap: Some(32), ..cfg() };
        let block = MsaBlock::new(&mut store, "b", 4, 8, &cfg, &mut r).unwrap();
        let x = Tensor::from_fn(&[1, 4, 8, 8], |_| r.random_range(-1.0..1.0));
        let report = param_gradient_error(&store, 3, 11, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            block.forward(ctx, xv).unwrap()
        });
        assert!(report.checked > 50);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn patchify_round_trips(n in 1usize..3, c in 1usize..4, g in 1usize..4, p in 1usize..4) {
            let h = g * p;
            let store = ParamStore::<f64>::new();
            let mut ctx = Ctx::new(&store, false);
            let src = Tensor::from_fn(&[n, c, h, h], |i| i as f64 * 0.5);
            let x = ctx.tape.constant(src.clone());
            let t = patchify(&mut ctx, x, p).unwrap();
            let back = unpatchify(&mut ctx, t, c, h, h, p).unwrap();
            prop_assert_eq!(ctx.tape.value(back), &src);
        }

        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..500, n in 1usize..6, scale_sqrt in any::<bool>()) {
            let mut r = rng(seed);
            let mut store = ParamStore::<f32>::new();
            let cfg = MsaConfig {
                attention_scale: if scale_sqrt { AttentionScale::Sqrt } else { AttentionScale::Paper },
                ..cfg()
            };
            let head = AttentionHead::new(&mut store, "h", 2, 2, &cfg, &mut r);
            let mut ctx = Ctx::new(&store, false);
            let t = ctx.tape.constant(Tensor::from_fn(&[2, n, 8], |_| r.random_range(-5.0..5.0)));
            let (_, attn) = head.attend(&mut ctx, t);
            for row in ctx.tape.value(attn).data().chunks(n) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
