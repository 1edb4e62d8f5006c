//! Central-difference checks of every op's backward pass.

use p2v_nn::{ConvGeom, Graph, ParamKind, ParamStore, Tensor, Var};

fn pseudo(n: usize, seed: u32, scale: f32) -> Vec<f32> {
    let mut s = seed.wrapping_mul(2654435761).wrapping_add(12345);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            ((s % 10_000) as f32 / 10_000.0 - 0.5) * 2.0 * scale
        })
        .collect()
}

/// Loss = sum(r * f(inputs)) for fixed random r; checks d loss/d input k.
fn check(shapes: &[Vec<usize>], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f32) {
    let inputs: Vec<Vec<f32>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| pseudo(s.iter().product(), 7 + i as u32, 1.0))
        .collect();
    let eval = |vals: &[Vec<f32>], want_grad: bool| -> (f64, Vec<Vec<f32>>) {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| g.leaf(Tensor::new(s.clone(), v.clone())))
            .collect();
        let y = build(&mut g, &vars);
        let r = pseudo(g.value(y).len(), 99, 1.0);
        let loss = g.custom_scalar(&[y], |v| {
            let l: f64 = v[0].data().iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            (l, vec![r.clone()])
        });
        let l = g.value(loss).item() as f64;
        if !want_grad {
            return (l, vec![]);
        }
        let grads = g.backward(loss);
        let gs = vars.iter().map(|&v| grads.leaf(v).map(|t| t.data().to_vec()).unwrap()).collect();
        (l, gs)
    };
    let (_, analytic) = eval(&inputs, true);
    let h = 1e-2f32;
    for (k, inp) in inputs.iter().enumerate() {
        // Probe a spread of coordinates.
        let step = (inp.len() / 23).max(1);
        for i in (0..inp.len()).step_by(step) {
            let mut plus = inputs.clone();
            plus[k][i] += h;
            let mut minus = inputs.clone();
            minus[k][i] -= h;
            let fd = ((eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h as f64)) as f32;
            let an = analytic[k][i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1.0));
            assert!(err < tol, "input {k} index {i}: analytic {an} vs numeric {fd}");
        }
    }
}

#[test]
fn conv3d_grads() {
    check(
        &[vec![1, 2, 4, 5, 5], vec![3, 2, 3, 3, 3], vec![3]],
        |g, v| g.conv(v[0], v[1], Some(v[2]), ConvGeom::cube(3, 1, 1)),
        2e-2,
    );
}

#[test]
fn strided_conv2d_grads() {
    check(
        &[vec![2, 2, 8, 8], vec![3, 2, 4, 4]],
        |g, v| g.conv(v[0], v[1], None, ConvGeom::square(4, 2, 1)),
        2e-2,
    );
}

#[test]
fn pointwise_conv_grads() {
    check(
        &[vec![1, 3, 2, 3, 3], vec![2, 3, 1, 1, 1], vec![2]],
        |g, v| g.conv(v[0], v[1], Some(v[2]), ConvGeom::cube(1, 1, 0)),
        2e-2,
    );
}

#[test]
fn conv_transpose_grads() {
    check(
        &[vec![1, 3, 2, 3, 3], vec![3, 2, 2, 2, 2], vec![2]],
        |g, v| g.conv_transpose(v[0], v[1], Some(v[2]), ConvGeom::cube(2, 2, 0)),
        2e-2,
    );
    check(
        &[vec![1, 2, 2, 2, 2], vec![2, 2, 4, 4, 4]],
        |g, v| g.conv_transpose(v[0], v[1], None, ConvGeom::cube(4, 2, 1)),
        2e-2,
    );
}

#[test]
fn norm_grads() {
    check(&[vec![2, 3, 4, 4]], |g, v| g.instance_norm(v[0], 1e-5), 3e-2);
    check(&[vec![1, 2, 3, 4, 4], vec![1, 2], vec![1, 2]], |g, v| g.adain(v[0], v[1], v[2], 1e-5), 3e-2);
}

#[test]
fn batch_norm_grads() {
    let mut ps = ParamStore::new();
    let bn = p2v_nn::layers::BatchNorm::new(&mut ps, "bn", 2);
    ps.value_mut(bn.gamma).data_mut().copy_from_slice(&[1.3, 0.7]);
    check(&[vec![2, 2, 2, 3, 3]], move |g, v| bn.forward(g, &ps, v[0]), 3e-2);
}

#[test]
fn pointwise_grads() {
    check(&[vec![2, 3, 5]], |g, v| g.sigmoid(v[0]), 1e-2);
    check(&[vec![2, 3, 5]], |g, v| g.softplus(v[0]), 1e-2);
    check(&[vec![2, 3, 5]], |g, v| g.tanh(v[0]), 1e-2);
    check(&[vec![4, 5], vec![3, 5], vec![3]], |g, v| g.linear(v[0], v[1], Some(v[2])), 1e-2);
}

#[test]
fn structural_grads() {
    check(&[vec![1, 2, 3, 4], vec![1, 1, 3, 4]], |g, v| g.concat_channels(&[v[0], v[1]]), 1e-2);
    check(&[vec![1, 2, 3, 4]], |g, v| g.repeat_depth(v[0], 3), 1e-2);
    check(&[vec![1, 2, 3, 4]], |g, v| g.resize(v[0], [1, 7, 5]), 1e-2);
    check(&[vec![1, 2, 3, 4, 4]], |g, v| g.resize(v[0], [5, 2, 8]), 1e-2);
    check(&[vec![1, 2, 4, 4, 6]], |g, v| g.max_pool(v[0], [2, 2, 2]), 1e-2);
    check(&[vec![2, 3, 4, 4]], |g, v| g.global_avg_pool(v[0]), 1e-2);
    check(&[vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1]), 1e-2);
}

#[test]
fn param_grads_route_to_their_store() {
    let mut a = ParamStore::new();
    let mut b = ParamStore::new();
    let pa = a.add("w", ParamKind::Trainable, Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    let pb = b.add("w", ParamKind::Trainable, Tensor::new(vec![1, 2], vec![3.0, 4.0]));
    let mut g = Graph::new(true);
    g.freeze(&b);
    let va = g.param(&a, pa);
    let vb = g.param(&b, pb);
    let s = g.add(va, vb);
    let m = g.mean(s);
    let grads = g.backward(m);
    assert_eq!(grads.get(&a, pa).unwrap().data(), &[0.5, 0.5]);
    assert!(grads.get(&b, pb).is_none());
}

#[test]
fn kinked_activations_pass_slope() {
    let mut g = Graph::new(true);
    let x = g.leaf(Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 3.0]));
    let l = g.leaky_relu(x, 0.2);
    let r = g.relu(x);
    let s = g.add(l, r);
    let m = g.mean(s);
    let grads = g.backward(m);
    assert_eq!(g.value(l).data(), &[-0.4, -0.1, 0.5, 3.0]);
    assert_eq!(grads.leaf(x).unwrap().data(), &[0.05, 0.05, 0.5, 0.5]);
}
