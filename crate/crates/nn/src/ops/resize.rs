use crate::graph::{Graph, Var};
use crate::tensor::{join_spatial, split_spatial, Tensor};

/// Half-pixel linear interpolation taps `(i0, i1, t)` for each output index
/// (the `align_corners = false` convention, clamped at the borders).
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, t)
        })
        .collect()
}

/// Interpolates along one axis of a buffer viewed as `[outer, len, inner]`.
fn resize_axis(src: &[f32], outer: usize, len: usize, inner: usize, out_len: usize) -> Vec<f32> {
    let taps = linear_taps(len, out_len);
    let mut out = vec![0.0f32; outer * out_len * inner];
    for o in 0..outer {
        for (k, &(i0, i1, t)) in taps.iter().enumerate() {
            let a = &src[(o * len + i0) * inner..][..inner];
            let b = &src[(o * len + i1) * inner..][..inner];
            let dst = &mut out[(o * out_len + k) * inner..][..inner];
            for ((d, &x0), &x1) in dst.iter_mut().zip(a).zip(b) {
                *d = (1.0 - t) * x0 + t * x1;
            }
        }
    }
    out
}

fn resize_axis_adjoint(g: &[f32], outer: usize, len: usize, inner: usize, out_len: usize) -> Vec<f32> {
    let taps = linear_taps(len, out_len);
    let mut dx = vec![0.0f32; outer * len * inner];
    for o in 0..outer {
        for (k, &(i0, i1, t)) in taps.iter().enumerate() {
            let gk = &g[(o * out_len + k) * inner..][..inner];
            for (j, &gv) in gk.iter().enumerate() {
                dx[(o * len + i0) * inner + j] += (1.0 - t) * gv;
                dx[(o * len + i1) * inner + j] += t * gv;
            }
        }
    }
    dx
}

/// Separable (bi/tri)linear resize of the spatial axes of `[N, C, ...]`.
pub fn resize_spatial(t: &Tensor, out_dims: [usize; 3]) -> Tensor {
    let (n, c, dims) = split_spatial(t.shape());
    let volumetric = t.ndim() == 5;
    let mut cur = t.data().to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == out_dims[axis] {
            continue;
        }
        let outer = n * c * cur_dims[..axis].iter().product::<usize>();
        let inner: usize = cur_dims[axis + 1..].iter().product();
        cur = resize_axis(&cur, outer, cur_dims[axis], inner, out_dims[axis]);
        cur_dims[axis] = out_dims[axis];
    }
    Tensor::new(join_spatial(n, c, out_dims, volumetric), cur)
}

impl Graph {
    /// Linear resize of spatial axes to `out_dims` (depth first; planar
    /// inputs must request depth 1).
    pub fn resize(&mut self, x: Var, out_dims: [usize; 3]) -> Var {
        let (n, c, dims) = split_spatial(self.shape(x));
        if dims == out_dims {
            return x;
        }
        let out = resize_spatial(self.value(x), out_dims);
        self.op(out, &[x], move |ctx| {
            // Replay the forward axis order backwards.
            let mut stages = Vec::new();
            let mut cur_dims = dims;
            for axis in 0..3 {
                if cur_dims[axis] != out_dims[axis] {
                    stages.push((axis, cur_dims));
                    cur_dims[axis] = out_dims[axis];
                }
            }
            let mut g = ctx.grad.data().to_vec();
            for &(axis, before) in stages.iter().rev() {
                let outer = n * c * before[..axis].iter().product::<usize>();
                let inner: usize = before[axis + 1..].iter().product();
                g = resize_axis_adjoint(&g, outer, before[axis], inner, out_dims[axis]);
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), g))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_sizes_match() {
        for (k, &(i0, _, t)) in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, k);
            assert_eq!(t, 0.0);
        }
    }

    #[test]
    fn upsample_two_by_two() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
        let r = resize_spatial(&t, [1, 4, 4]);
        // Row 0 of the output interpolates columns at source x = -0.25(clamped), 0.25, 0.75, 1.25(clamped).
        assert_eq!(&r.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&r.data()[12..], &[2.0, 2.25, 2.75, 3.0]);
    }
}
