use crate::graph::{Graph, Var};
use crate::tensor::{join_spatial, split_spatial, Tensor};

impl Graph {
    /// Max pooling with window == stride (`factor` per spatial axis, depth
    /// first); trailing remainders are dropped.
    pub fn max_pool(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        let volumetric = self.shape(x).len() == 5;
        let out_dims = [dims[0] / factor[0], dims[1] / factor[1], dims[2] / factor[2]];
        assert!(out_dims.iter().all(|&d| d > 0), "max_pool: input {dims:?} smaller than {factor:?}");
        let (ip, op): (usize, usize) = (dims.iter().product(), out_dims.iter().product());
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * op];
        let mut arg = vec![0u32; n * c * op];
        for g in 0..n * c {
            let plane = &src[g * ip..(g + 1) * ip];
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for a in 0..factor[0] {
                            for b in 0..factor[1] {
                                for e in 0..factor[2] {
                                    let i = ((od * factor[0] + a) * dims[1] + oh * factor[1] + b) * dims[2]
                                        + ow * factor[2]
                                        + e;
                                    if plane[i] > best {
                                        best = plane[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = g * op + (od * out_dims[1] + oh) * out_dims[2] + ow;
                        out[o] = best;
                        arg[o] = best_i as u32;
                    }
                }
            }
        }
        let shape = join_spatial(n, c, out_dims, volumetric);
        let in_shape = self.shape(x).to_vec();
        self.op(Tensor::new(shape, out), &[x], move |ctx| {
            let mut dx = vec![0.0f32; n * c * ip];
            for (o, &g) in ctx.grad.data().iter().enumerate() {
                let grp = o / op;
                dx[grp * ip + arg[o] as usize] += g;
            }
            vec![Some(Tensor::new(in_shape, dx))]
        })
    }
}
