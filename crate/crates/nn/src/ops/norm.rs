use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{split_spatial, Tensor};

/// Mean and biased variance of a slice, accumulated in f64.
fn moments(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Backward of `xhat = (x - mean) / sqrt(var + eps)` for one group, where
/// `gx` holds d(loss)/d(xhat) on entry and d(loss)/d(x) on exit.
fn normalize_backward(gx: &mut [f32], xhat: &[f32], inv_std: f64) {
    let n = gx.len() as f64;
    let mean_g = gx.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_gx = gx.iter().zip(xhat).map(|(&g, &h)| g as f64 * h as f64).sum::<f64>() / n;
    for (g, &h) in gx.iter_mut().zip(xhat) {
        *g = (inv_std * (*g as f64 - mean_g - h as f64 * mean_gx)) as f32;
    }
}

impl Graph {
    /// Instance normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        let plane: usize = dims.iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; src.len()];
        let mut inv_stds = vec![0.0f64; n * c];
        for g in 0..n * c {
            let xs = &src[g * plane..(g + 1) * plane];
            let (mean, var) = moments(xs);
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_stds[g] = inv;
            for (o, &v) in out[g * plane..(g + 1) * plane].iter_mut().zip(xs) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
        }
        let shape = self.shape(x).to_vec();
        self.op(Tensor::new(shape.clone(), out), &[x], move |ctx| {
            let mut dx = ctx.grad.data().to_vec();
            let xhat = ctx.output.data();
            for g in 0..n * c {
                let r = g * plane..(g + 1) * plane;
                normalize_backward(&mut dx[r.clone()], &xhat[r], inv_stds[g]);
            }
            vec![Some(Tensor::new(shape, dx))]
        })
    }

    /// Adaptive instance normalization: each `(sample, channel)` group of
    /// `x` is normalized and then scaled by `std` and shifted by `mean`
    /// (both `[N, C]`).
    pub fn adain(&mut self, x: Var, mean: Var, std: Var, eps: f32) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        assert_eq!(self.shape(mean), &[n, c], "adain: mean shape");
        assert_eq!(self.shape(std), &[n, c], "adain: std shape");
        let plane: usize = dims.iter().product();
        let src = self.value(x).data();
        let (mv, sv) = (self.value(mean).data(), self.value(std).data());
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        let mut inv_stds = vec![0.0f64; n * c];
        for g in 0..n * c {
            let xs = &src[g * plane..(g + 1) * plane];
            let (m, var) = moments(xs);
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_stds[g] = inv;
            for i in 0..plane {
                let h = ((xs[i] as f64 - m) * inv) as f32;
                xhat[g * plane + i] = h;
                out[g * plane + i] = sv[g] * h + mv[g];
            }
        }
        let shape = self.shape(x).to_vec();
        self.op(Tensor::new(shape.clone(), out), &[x, mean, std], move |ctx| {
            let g = ctx.grad.data();
            let sv = ctx.inputs[2].data();
            let mut dmean = vec![0.0f32; n * c];
            let mut dstd = vec![0.0f32; n * c];
            let mut dx = vec![0.0f32; g.len()];
            for grp in 0..n * c {
                let r = grp * plane..(grp + 1) * plane;
                let gs = &g[r.clone()];
                dmean[grp] = gs.iter().sum();
                dstd[grp] = gs.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                for (d, &gv) in dx[r.clone()].iter_mut().zip(gs) {
                    *d = gv * sv[grp];
                }
                normalize_backward(&mut dx[r.clone()], &xhat[r], inv_stds[grp]);
            }
            vec![
                Some(Tensor::new(shape, dx)),
                Some(Tensor::new(vec![n, c], dmean)),
                Some(Tensor::new(vec![n, c], dstd)),
            ]
        })
    }

    /// Batch normalization with affine parameters. In training mode the
    /// batch statistics are used and running statistics are scheduled for
    /// update (see [`ParamStore::apply_buffer_updates`]).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f32,
        eps: f32,
    ) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        let plane: usize = dims.iter().product();
        let count = n * plane;
        let shape = self.shape(x).to_vec();
        let mut means = vec![0.0f64; c];
        let mut vars = vec![0.0f64; c];
        if self.training() {
            let src = self.value(x).data();
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    sum += src[(s * c + ch) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    sq += src[(s * c + ch) * plane..][..plane].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                }
                means[ch] = mean;
                vars[ch] = sq / count as f64;
            }
            let rm = store.value(running_mean).data();
            let rv = store.value(running_var).data();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let new_m: Vec<f32> = (0..c)
                .map(|ch| ((1.0 - momentum as f64) * rm[ch] as f64 + momentum as f64 * means[ch]) as f32)
                .collect();
            let new_v: Vec<f32> = (0..c)
                .map(|ch| ((1.0 - momentum as f64) * rv[ch] as f64 + momentum as f64 * vars[ch] * unbias) as f32)
                .collect();
            self.record_buffer_update(store, running_mean, Tensor::new(vec![c], new_m));
            self.record_buffer_update(store, running_var, Tensor::new(vec![c], new_v));
        } else {
            for ch in 0..c {
                means[ch] = store.value(running_mean).data()[ch] as f64;
                vars[ch] = store.value(running_var).data()[ch] as f64;
            }
        }
        let inv: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let src = self.value(x).data();
        let (gam, bet) = (self.value(gv).data(), self.value(bv).data());
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let h = ((src[i] as f64 - means[ch]) * inv[ch]) as f32;
                    xhat[i] = h;
                    out[i] = gam[ch] * h + bet[ch];
                }
            }
        }
        let training = self.training();
        self.op(Tensor::new(shape.clone(), out), &[x, gv, bv], move |ctx| {
            let g = ctx.grad.data();
            let gam = ctx.inputs[1].data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; g.len()];
            for ch in 0..c {
                let mut sum_g = 0.0f64;
                let mut sum_gh = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        sum_g += g[i] as f64;
                        sum_gh += g[i] as f64 * xhat[i] as f64;
                    }
                }
                dbeta[ch] = sum_g as f32;
                dgamma[ch] = sum_gh as f32;
                let scale = gam[ch] as f64 * inv[ch];
                let (mg, mgh) = (sum_g / count as f64, sum_gh / count as f64);
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        dx[i] = if training {
                            (scale * (g[i] as f64 - mg - xhat[i] as f64 * mgh)) as f32
                        } else {
                            (scale * g[i] as f64) as f32
                        };
                    }
                }
            }
            vec![
                Some(Tensor::new(shape, dx)),
                Some(Tensor::new(vec![c], dgamma)),
                Some(Tensor::new(vec![c], dbeta)),
            ]
        })
    }
}
