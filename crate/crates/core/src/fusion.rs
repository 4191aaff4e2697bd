//! Multi-scale fusion: every output scale sums the identity of its own input
//! with transformed copies of the other two scales.
//!
//! Going to a coarser scale (`r < j`, factor `s = 2^(j-r)`) is a depthwise
//! convolution with kernel `s + 1`, stride `s`, padding `s / 2`, followed by a
//! 1x1 convolution to the target width. Going to a finer scale is bilinear
//! upsampling by `2^(r-j)` followed by a 1x1 convolution.

use prn_tensor::{Scalar, Var};
use rand::Rng;

use crate::encoder::NUM_SCALES;
use crate::error::{PrnError, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, ParamStore};

#[derive(Clone, Debug)]
pub enum CrossPath {
    Down { depthwise: Conv2d, pointwise: Conv2d },
    Up { factor: usize, pointwise: Conv2d },
}

/// Geometry of the downsampling path from scale `r` to a coarser scale `j`:
/// `(kernel, stride, padding)`.
pub fn down_geometry(r: usize, j: usize) -> (usize, usize, usize) {
    assert!(r < j);
    let s = 1 << (j - r);
    (s + 1, s, s / 2)
}

#[derive(Clone, Debug)]
pub struct Fusion {
    channels: [usize; NUM_SCALES],
    /// Indexed `[r][j]`; the diagonal is the identity.
    paths: [[Option<CrossPath>; NUM_SCALES]; NUM_SCALES],
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: [usize; NUM_SCALES],
        rng: &mut impl Rng,
    ) -> Self {
        let mut paths: [[Option<CrossPath>; NUM_SCALES]; NUM_SCALES] = Default::default();
        for (r, row) in paths.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                let (cr, cj) = (channels[r], channels[j]);
                let prefix = format!("{name}.f{}{}", r + 1, j + 1);
                *slot = match r.cmp(&j) {
                    std::cmp::Ordering::Equal => None,
                    std::cmp::Ordering::Less => {
                        let (k, s, p) = down_geometry(r, j);
                        let depthwise = Conv2d::new(
                            store,
                            &format!("{prefix}.depthwise"),
                            ConvSpec::new(cr, cr, k).stride(s).padding(p).groups(cr),
                            rng,
                        );
                        let pointwise = Conv2d::new(store, &format!("{prefix}.pointwise"), ConvSpec::new(cr, cj, 1), rng);
                        Some(CrossPath::Down { depthwise, pointwise })
                    }
                    std::cmp::Ordering::Greater => {
                        let pointwise = Conv2d::new(store, &format!("{prefix}.pointwise"), ConvSpec::new(cr, cj, 1), rng);
                        Some(CrossPath::Up { factor: 1 << (r - j), pointwise })
                    }
                };
            }
        }
        Self { channels, paths }
    }

    pub fn channels(&self) -> [usize; NUM_SCALES] {
        self.channels
    }

    pub fn path(&self, r: usize, j: usize) -> Option<&CrossPath> {
        self.paths[r][j].as_ref()
    }

    /// `f_rj(x)`; identity when `r == j`.
    pub fn transform<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, r: usize, j: usize, x: Var) -> Var {
        match &self.paths[r][j] {
            None => x,
            Some(CrossPath::Down { depthwise, pointwise }) => {
                let y = depthwise.forward(ctx, x);
                pointwise.forward(ctx, y)
            }
            Some(CrossPath::Up { factor, pointwise }) => {
                let (_, _, h, w) = ctx.tape.value(x).dims4();
                let y = ctx.tape.resize_bilinear(x, h * factor, w * factor);
                pointwise.forward(ctx, y)
            }
        }
    }

    /// `out_j = sum_r f_rj(x_r)` for batched maps `(n, c_j, h_j, w_j)`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, inputs: [Var; NUM_SCALES]) -> Result<[Var; NUM_SCALES]> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| ctx.tape.shape(v).to_vec()).collect();
        for (j, s) in shapes.iter().enumerate() {
            let ok = s.len() == 4
                && s[1] == self.channels[j]
                && s[0] == shapes[0][0]
                && (j == 0 || (s[2] * 2 == shapes[j - 1][2] && s[3] * 2 == shapes[j - 1][3]));
            if !ok {
                return Err(PrnError::dim(format!("fusion input {j} has shape {s:?} (channels {:?})", self.channels)));
            }
        }
        let mut out = Vec::with_capacity(NUM_SCALES);
        for j in 0..NUM_SCALES {
            let mut acc = inputs[j];
            for (r, &x) in inputs.iter().enumerate() {
                if r != j {
                    let t = self.transform(ctx, r, j, x);
                    debug_assert_eq!(ctx.tape.shape(t), shapes[j].as_slice());
                    acc = ctx.tape.add(acc, t);
                }
            }
            out.push(acc);
        }
        Ok(out.try_into().unwrap())
    }

    /// Zeroes every cross-scale weight and bias, leaving a per-scale identity.
    pub fn zero_cross_scale<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for path in self.paths.iter().flatten().flatten() {
            match path {
                CrossPath::Down { depthwise, pointwise } => {
                    depthwise.zero(store);
                    pointwise.zero(store);
                }
                CrossPath::Up { pointwise, .. } => pointwise.zero(store),
            }
        }
    }
}

/// `C*_j = concat(fuse(features)_j, fuse(residuals)_j)` along channels.
pub fn fuse_and_concat<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    feature_fusion: &Fusion,
    residual_fusion: &Fusion,
    features: [Var; NUM_SCALES],
    residuals: [Var; NUM_SCALES],
) -> Result<[Var; NUM_SCALES]> {
    let f = feature_fusion.forward(ctx, features)?;
    let r = residual_fusion.forward(ctx, residuals)?;
    Ok([0, 1, 2].map(|j| ctx.tape.concat(&[f[j], r[j]], 1)))
}
