use super::*;
use crate::rng::RandomStream;

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn eval(f: &Builder, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

fn check_first_order(f: &Builder, inputs: &[Tensor<f64>], tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.grad(out, &vars);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.value(grads[i]).clone();
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!((a - fd).abs() <= tol * fd.abs().max(1.0), "input {i} entry {j}: analytic {a} vs fd {fd}");
        }
    }
}

/// Checks `d/dx <grad_theta f(x, theta), r>` against finite differences.
fn check_second_order(f: &Builder, x: &Tensor<f64>, theta: &Tensor<f64>, r: &Tensor<f64>, tol: f64) {
    let inner = |g: &mut Graph<f64>, x: Var, th: Var| {
        let out = f(g, &[x, th]);
        let gt = g.grad(out, &[th])[0];
        let rv = g.leaf(r.clone());
        let prod = g.mul(gt, rv);
        g.sum_all(prod)
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let tv = g.leaf(theta.clone());
    let q = inner(&mut g, xv, tv);
    let gx = g.grad(q, &[xv])[0];
    let analytic = g.value(gx).clone();
    let q_at = |xx: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(xx.clone());
        let tv = g.leaf(theta.clone());
        let q = inner(&mut g, xv, tv);
        g.value(q).item()
    };
    let h = 1e-5;
    for j in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[j] += h;
        let mut m = x.clone();
        m.data_mut()[j] -= h;
        let fd = (q_at(&p) - q_at(&m)) / (2.0 * h);
        let a = analytic.data()[j];
        assert!((a - fd).abs() <= tol * fd.abs().max(1.0), "entry {j}: analytic {a} vs fd {fd}");
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    RandomStream::new(seed).normal_tensor(shape)
}

#[test]
fn elementwise_ops_first_order() {
    let f: Box<Builder> = Box::new(|g, v| {
        let a = g.mul(v[0], v[1]);
        let b = g.exp(v[0]);
        let c = g.sub(a, b);
        let d = g.scale(c, 0.3);
        let e = g.offset(v[1], 3.0);
        let e = g.powf(e, -0.5);
        let s = g.mul(d, e);
        let n = g.neg(s);
        g.sum_all(n)
    });
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2).map(|v| v.abs());
    check_first_order(&*f, &[a, b], 1e-6);
}

#[test]
fn matmul_all_transpose_combinations() {
    for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
        let f: Box<Builder> = Box::new(move |g, v| {
            let c = g.matmul(v[0], v[1], ta, tb);
            let c2 = g.square(c);
            g.sum_all(c2)
        });
        let a = if ta { rand(&[4, 3], 3) } else { rand(&[3, 4], 3) };
        let b = if tb { rand(&[5, 4], 4) } else { rand(&[4, 5], 4) };
        check_first_order(&*f, &[a.clone(), b.clone()], 1e-6);
        let r = rand(b.shape(), 5);
        check_second_order(&*f, &a, &b, &r, 1e-5);
    }
}

#[test]
fn conv_first_and_second_order() {
    let geom = ConvGeom { stride: 2, pad: 1 };
    let f: Box<Builder> = Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], geom);
        let y = g.square(y);
        g.sum_all(y)
    });
    let x = rand(&[1, 2, 7, 7], 6);
    let w = rand(&[3, 2, 3, 3], 7);
    check_first_order(&*f, &[x.clone(), w.clone()], 1e-6);
    let r = rand(w.shape(), 8);
    check_second_order(&*f, &x, &w, &r, 1e-5);
}

#[test]
fn conv_grad_ops_are_differentiable_twice_through_relu() {
    // Relu between two convs exercises ConvInputGrad/ConvWeightGrad backward.
    let geom = ConvGeom { stride: 1, pad: 0 };
    let w2 = rand(&[2, 3, 2, 2], 9);
    let f: Box<Builder> = Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], geom);
        let y = g.relu(y);
        let w2v = g.leaf(w2.clone());
        let z = g.conv2d(y, w2v, geom);
        let z = g.square(z);
        g.sum_all(z)
    });
    let x = rand(&[1, 2, 6, 6], 10);
    let w = rand(&[3, 2, 3, 3], 11);
    check_first_order(&*f, &[x.clone(), w.clone()], 1e-6);
    let r = rand(w.shape(), 12);
    check_second_order(&*f, &x, &w, &r, 1e-5);
}

#[test]
fn softmax_cross_entropy_and_bias() {
    let onehot = Tensor::from_f64(&[2, 4], &[0., 1., 0., 0., 0., 0., 0., 1.]).unwrap();
    let f: Box<Builder> = Box::new(move |g, v| {
        let z = g.add_bias(v[0], v[1]);
        let ls = g.log_softmax(z);
        let oh = g.leaf(onehot.clone());
        let p = g.mul(ls, oh);
        let s = g.sum_all(p);
        g.scale(s, -0.5)
    });
    let x = rand(&[2, 4], 13);
    let b = rand(&[4], 14);
    check_first_order(&*f, &[x.clone(), b.clone()], 1e-6);
    let r = rand(&[4], 15);
    check_second_order(&*f, &x, &b, &r, 1e-5);
}

#[test]
fn slicing_reshape_and_reductions() {
    let f: Box<Builder> = Box::new(|g, v| {
        let a = g.slice_cols(v[0], 1, 2);
        let b = g.exp(a);
        let r = g.reshape(b, &[1, 2, 1, 3]);
        let c = g.reduce_bias(r);
        let d = g.square(c);
        let e = g.row_sum_broadcast(v[0]);
        let e2 = g.mul(e, v[0]);
        let s1 = g.sum_all(d);
        let s2 = g.sum_all(e2);
        g.add(s1, s2)
    });
    let x = rand(&[3, 4], 16);
    check_first_order(&*f, &[x], 1e-6);
}

#[test]
fn total_variation_gradient_matches_away_from_kinks() {
    let f: Box<Builder> = Box::new(|g, v| g.total_variation(v[0]));
    let x = rand(&[1, 2, 4, 5], 17);
    check_first_order(&*f, &[x], 1e-6);
}

#[test]
fn unrelated_leaf_gets_zero_gradient() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::full(&[2], 1.0));
    let b = g.leaf(Tensor::full(&[3], 1.0));
    let s = g.sum_all(a);
    let grads = g.grad(s, &[b]);
    assert_eq!(g.value(grads[0]).data(), &[0.0, 0.0, 0.0]);
}
