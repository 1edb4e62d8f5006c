use crate::graph::{Graph, Var};
use crate::tensor::{split_spatial, Tensor};

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
        let out = self.value(x).map(f);
        self.op(out, &[x], move |ctx| {
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(ctx.inputs[0].data())
                .zip(ctx.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data))]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, move |v| v + s, |_, _| 1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.op(out, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data);
        self.op(out, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))])
    }

    /// Weighted sum of scalars, e.g. to combine loss terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f32> = terms.iter().map(|t| t.1).collect();
        self.op(Tensor::scalar(total), &vars, move |ctx| {
            let g = ctx.grad.item();
            weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.op(out, &[x], |ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))])
    }

    /// Concatenates feature maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let chans: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        for &p in parts {
            assert_eq!(&self.shape(p)[2..], &first[2..], "concat: spatial mismatch");
            assert_eq!(self.shape(p)[0], n);
        }
        let total_c: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total_c * spatial);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[s * c * spatial..(s + 1) * c * spatial]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let out = Tensor::new(shape, data);
        self.op(out, parts, move |ctx| {
            let g = ctx.grad.data();
            let mut grads: Vec<Vec<f32>> = chans.iter().map(|&c| Vec::with_capacity(n * c * spatial)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g[off..off + c * spatial]);
                    off += c * spatial;
                }
            }
            grads
                .into_iter()
                .zip(&ctx.inputs)
                .map(|(d, x)| Some(Tensor::new(x.shape().to_vec(), d)))
                .collect()
        })
    }

    /// Repeats a planar map `[N, C, H, W]` along a new depth axis.
    pub fn repeat_depth(&mut self, x: Var, depth: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "repeat_depth expects [N, C, H, W]");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * depth * plane);
        for nc in 0..n * c {
            let p = &src[nc * plane..(nc + 1) * plane];
            for _ in 0..depth {
                data.extend_from_slice(p);
            }
        }
        let out = Tensor::new(vec![n, c, depth, h, w], data);
        self.op(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0f32; n * c * plane];
            for nc in 0..n * c {
                let acc = &mut dx[nc * plane..(nc + 1) * plane];
                for d in 0..depth {
                    let src = &g[(nc * depth + d) * plane..][..plane];
                    for (a, b) in acc.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], dx))]
        })
    }

    /// Global average over spatial axes: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        let plane: usize = dims.iter().product();
        let src = self.value(x).data();
        let data: Vec<f32> =
            (0..n * c).map(|i| src[i * plane..(i + 1) * plane].iter().sum::<f32>() / plane as f32).collect();
        let shape = self.shape(x).to_vec();
        self.op(Tensor::new(vec![n, c], data), &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0f32; n * c * plane];
            for i in 0..n * c {
                dx[i * plane..(i + 1) * plane].fill(g[i] / plane as f32);
            }
            vec![Some(Tensor::new(shape, dx))]
        })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let m = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() / len as f64;
        self.op(Tensor::scalar(m as f32), &[x], move |ctx| {
            let g = ctx.grad.item() / len as f32;
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    /// `y = x W^T + b` for `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
        let dout = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], din, "linear: weight shape");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; n * dout];
        for s in 0..n {
            for o in 0..dout {
                let row = &wv[o * din..(o + 1) * din];
                out[s * dout + o] = row.iter().zip(&xv[s * din..(s + 1) * din]).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for o in 0..dout {
                    out[s * dout + o] += bv[o];
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.op(Tensor::new(vec![n, dout], out), &parents, move |ctx| {
            let g = ctx.grad.data();
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![0.0f32; n * din];
                for s in 0..n {
                    for o in 0..dout {
                        let go = g[s * dout + o];
                        for (d, &w) in dx[s * din..(s + 1) * din].iter_mut().zip(&wv[o * din..(o + 1) * din]) {
                            *d += go * w;
                        }
                    }
                }
                Tensor::new(vec![n, din], dx)
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![0.0f32; dout * din];
                for s in 0..n {
                    for o in 0..dout {
                        let go = g[s * dout + o];
                        for (d, &x) in dw[o * din..(o + 1) * din].iter_mut().zip(&xv[s * din..(s + 1) * din]) {
                            *d += go * x;
                        }
                    }
                }
                Tensor::new(vec![dout, din], dw)
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![0.0f32; dout];
                    for s in 0..n {
                        for o in 0..dout {
                            db[o] += g[s * dout + o];
                        }
                    }
                    Tensor::new(vec![dout], db)
                }));
            }
            grads
        })
    }

    /// Scalar node with a caller-supplied value and gradient. `f` receives
    /// the input values and returns the loss and d(loss)/d(input) for each.
    pub fn custom_scalar<F>(&mut self, inputs: &[Var], f: F) -> Var
    where
        F: FnOnce(&[&Tensor]) -> (f64, Vec<Vec<f32>>),
    {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let (loss, grads) = f(&values);
        assert_eq!(grads.len(), inputs.len(), "custom_scalar: one gradient per input");
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        for (g, s) in grads.iter().zip(&shapes) {
            assert_eq!(g.len(), s.iter().product::<usize>(), "custom_scalar: gradient length");
        }
        self.op(Tensor::scalar(loss as f32), inputs, move |ctx| {
            let up = ctx.grad.item();
            grads
                .into_iter()
                .zip(shapes)
                .zip(&ctx.needs)
                .map(|((g, s), &need)| need.then(|| Tensor::new(s, g.into_iter().map(|v| v * up).collect())))
                .collect()
        })
    }
}
