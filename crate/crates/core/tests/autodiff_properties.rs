//! Input-derivative exactness and parameter-gradient checks on real networks.

use std::collections::BTreeMap;
use std::rc::Rc;

use macronet::autodiff::{build_derivative_map, input_jets, jet, BatchedValue, DerivativeKeys, Graph, Jet, JetBasis};
use macronet::networks::{Activation, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Quartic in two variables with hand-written partials.
#[test]
fn quartic_derivatives_exact() {
    // f = x^4 - 3 x^2 y + 2 x y^3 + y^4 - 5 y + 7
    let f = |g: &mut Graph, v: &[Jet]| {
        let (x, y) = (&v[0], &v[1]);
        let x2 = jet::mul(g, x, x);
        let x4 = jet::mul(g, &x2, &x2);
        let y2 = jet::mul(g, y, y);
        let y3 = jet::mul(g, &y2, y);
        let y4 = jet::mul(g, &y2, &y2);
        let t1 = jet::mul(g, &x2, y);
        let t1 = jet::scale(g, &t1, -3.0);
        let t2 = jet::mul(g, x, &y3);
        let t2 = jet::scale(g, &t2, 2.0);
        let t3 = jet::scale(g, y, -5.0);
        let s = jet::add(g, &x4, &t1);
        let s = jet::add(g, &s, &t2);
        let s = jet::add(g, &s, &y4);
        let s = jet::add(g, &s, &t3);
        jet::offset(g, &s, 7.0)
    };
    let map = build_derivative_map(f, "f", &names(&["x", "y"]), 4).unwrap();
    let pts = [(0.3, -1.2), (1.7, 0.4), (-2.5, 2.0)];
    let mut g = Graph::new();
    let xs = g.row(pts.iter().map(|p| p.0).collect());
    let ys = g.row(pts.iter().map(|p| p.1).collect());
    let v = map.evaluate(&mut g, &[xs, ys]);
    type Oracle = fn(f64, f64) -> f64;
    let oracle: [(&str, Oracle); 10] = [
        ("f_x", |x, y| 4.0 * x.powi(3) - 6.0 * x * y + 2.0 * y.powi(3)),
        ("f_y", |x, y| -3.0 * x * x + 6.0 * x * y * y + 4.0 * y.powi(3) - 5.0),
        ("f_xx", |x, y| 12.0 * x * x - 6.0 * y),
        ("f_xy", |x, y| -6.0 * x + 6.0 * y * y),
        ("f_yx", |x, y| -6.0 * x + 6.0 * y * y),
        ("f_yy", |x, y| 12.0 * x * y + 12.0 * y * y),
        ("f_xxx", |x, _| 24.0 * x),
        ("f_yyx", |_, y| 12.0 * y),
        ("f_yyy", |x, y| 12.0 * x + 24.0 * y),
        ("f_xxxx", |_, _| 24.0),
    ];
    for (name, d) in oracle {
        let got = g.data(v[name]);
        for (k, &(x, y)) in pts.iter().enumerate() {
            assert!((got[k] - d(x, y)).abs() <= 1e-10, "{name} at ({x},{y}): {} vs {}", got[k], d(x, y));
        }
    }
}

type Evaluated = (Graph, Vec<BatchedValue>, BTreeMap<String, BatchedValue>, Vec<Vec<f64>>);

fn network_map(net: &Network, order: usize) -> Evaluated {
    let d = net.spec.input_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cols: Vec<Vec<f64>> = (0..d).map(|_| (0..10).map(|_| rng.gen_range(-0.9..0.9)).collect()).collect();
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let basis: Rc<JetBasis> = JetBasis::new(d, order);
    let col_nodes: Vec<_> = cols.iter().map(|c| g.row(c.clone())).collect();
    let inputs = input_jets(&mut g, &basis, &col_nodes);
    let out = net.forward(&mut g, &params, &inputs).unwrap();
    let keys = DerivativeKeys::build("f", &net.spec.input_names, order).unwrap();
    let vals = keys.extract(&mut g, &out, order, 10);
    (g, params, vals, cols)
}

#[test]
fn mixed_partials_symmetric_for_tanh_mlp() {
    let net = Network::init(&NetworkSpec::mlp(&["x1", "x2"], &[20, 20], Activation::Tanh), 3).unwrap();
    let (g, _, v, _) = network_map(&net, 2);
    let a = g.data(v["f_x1x2"]);
    let b = g.data(v["f_x2x1"]);
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-8);
        assert_eq!(p.to_bits(), q.to_bits());
    }
}

/// Input derivatives of a network against central differences of plain evaluation.
fn check_input_derivatives(net: &Network) {
    let (g, _, v, cols) = network_map(net, 2);
    let h = 1e-4;
    let shifted = |delta: f64| {
        let mut c = cols.clone();
        for x in &mut c[0] {
            *x += delta;
        }
        net.evaluate(&c).unwrap()
    };
    let (p, m, z) = (shifted(h), shifted(-h), shifted(0.0));
    let name = format!("f_{}", net.spec.input_names[0]);
    let second = format!("f_{0}{0}", net.spec.input_names[0]);
    let d1 = g.data(v[name.as_str()]);
    let d2 = g.data(v[second.as_str()]);
    for k in 0..z.len() {
        let fd1 = (p[k] - m[k]) / (2.0 * h);
        let fd2 = (p[k] - 2.0 * z[k] + m[k]) / (h * h);
        assert!((fd1 - d1[k]).abs() <= 1e-6 * (1.0 + fd1.abs()), "{fd1} vs {}", d1[k]);
        assert!((fd2 - d2[k]).abs() <= 1e-4 * (1.0 + fd2.abs()), "{fd2} vs {}", d2[k]);
    }
}

#[test]
fn network_input_derivatives_match_finite_differences() {
    check_input_derivatives(&Network::init(&NetworkSpec::mlp(&["x"], &[12, 12], Activation::Silu), 1).unwrap());
    check_input_derivatives(&Network::init(&NetworkSpec::mlp(&["x", "t"], &[12, 12], Activation::Sigmoid), 1).unwrap());
    check_input_derivatives(&Network::init(&NetworkSpec::kan(&["x"], &[5, 5]), 1).unwrap());
}

/// Loss = mean(f_xx^2) on 10 points; analytic parameter gradient vs central
/// differences with h = 1e-5.
fn fd_gradient_check(net: &Network) {
    let loss_of = |n: &Network| {
        let (mut g, _, v, _) = network_map(n, 2);
        let sq = g.square(v["f_xx"]);
        let l = g.mean(sq);
        g.item(l)
    };
    let (mut g, params, v, _) = network_map(net, 2);
    let sq = g.square(v["f_xx"]);
    let l = g.mean(sq);
    let grads = g.backward(l);
    assert!(!grads.detached);
    let analytic: Vec<f64> = params
        .iter()
        .zip(&net.state.tensors)
        .flat_map(|(&p, t)| grads.get_or_zeros(p, t.dim()).iter().copied().collect::<Vec<_>>())
        .collect();
    let flat = net.state.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..flat.len() {
        let mut shifted = net.clone();
        let mut f = flat.clone();
        f[k] += h;
        shifted.state.assign_flat(&f);
        let up = loss_of(&shifted);
        f[k] -= 2.0 * h;
        shifted.state.assign_flat(&f);
        let down = loss_of(&shifted);
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn parameter_gradient_through_second_derivative_mlp() {
    fd_gradient_check(&Network::init(&NetworkSpec::mlp(&["x"], &[8, 8], Activation::Tanh), 9).unwrap());
}

#[test]
fn parameter_gradient_through_second_derivative_kan() {
    fd_gradient_check(&Network::init(&NetworkSpec::kan(&["x"], &[3]), 9).unwrap());
}

#[test]
fn single_weight_derivative_loss() {
    // f(x) = w x, loss = mean((f_x - 3)^2), dL/dw = 2(w - 3)
    let w = 1.7;
    let mut g = Graph::new();
    let wp = g.parameter(ndarray::array![[w]]);
    let basis = JetBasis::new(1, 1);
    let x = g.row(vec![0.1, 0.5, 2.0]);
    let inputs = input_jets(&mut g, &basis, &[x]);
    let f = inputs[0].map_linear(|c| g.mul(wp, c));
    let fx = f.derivative(&mut g, &[1]).unwrap();
    let r = g.offset(fx, -3.0);
    let sq = g.square(r);
    let l = g.mean(sq);
    let grads = g.backward(l);
    assert!((grads.get(wp).unwrap()[[0, 0]] - 2.0 * (w - 3.0)).abs() < 1e-12);
}
