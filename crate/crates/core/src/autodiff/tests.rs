use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TOL: f64 = 1e-4;

fn rand_array(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Projects a non-scalar output to a scalar with fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_array(g.shape(y), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Runs the finite-difference check at 20 random points.
fn check_primitive<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    for trial in 0..20 {
        let inputs: Vec<Array> = shapes.iter().map(|s| rand_array(s, lo, hi, &mut rng)).collect();
        let err = grad_check(
            |g: &mut Graph, v: &[Var]| {
                let y = f(g, v)?;
                weighted_sum(g, y, 17)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name} trial {trial}: rel error {err}");
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_primitive("add", &[&[2, 3], &[2, 3]], -2.0, 2.0, |g, v| g.add(v[0], v[1]));
    check_primitive("sub", &[&[2, 3], &[2, 3]], -2.0, 2.0, |g, v| g.sub(v[0], v[1]));
    check_primitive("mul", &[&[3, 2], &[3, 2]], -2.0, 2.0, |g, v| g.mul(v[0], v[1]));
    check_primitive("matmul", &[&[2, 4], &[4, 3]], -1.0, 1.0, |g, v| g.matmul(v[0], v[1]));
    check_primitive("concat0", &[&[2, 3], &[1, 3]], -1.0, 1.0, |g, v| {
        g.concat(&[v[0], v[1]], 0)
    });
    check_primitive("concat1", &[&[2, 3], &[2, 2]], -1.0, 1.0, |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check_primitive("softmax0", &[&[4, 3]], -2.0, 2.0, |g, v| g.softmax(v[0], 0));
    check_primitive("softmax1", &[&[3, 5]], -2.0, 2.0, |g, v| g.softmax(v[0], 1));
    check_primitive("sigmoid", &[&[2, 3]], -4.0, 4.0, |g, v| Ok(g.sigmoid(v[0])));
    check_primitive("tanh", &[&[2, 3]], -2.0, 2.0, |g, v| Ok(g.tanh(v[0])));
    check_primitive("relu", &[&[3, 3]], -2.0, 2.0, |g, v| Ok(g.relu(v[0])));
    check_primitive("l2_normalize1", &[&[3, 4]], -2.0, 2.0, |g, v| {
        g.l2_normalize(v[0], 1, L2_EPS)
    });
    check_primitive("l2_normalize0", &[&[3, 4]], -2.0, 2.0, |g, v| {
        g.l2_normalize(v[0], 0, L2_EPS)
    });
    check_primitive("mean", &[&[2, 5]], -2.0, 2.0, |g, v| g.mean(v[0]));
    check_primitive("sum", &[&[5]], -2.0, 2.0, |g, v| Ok(g.sum(v[0])));
    check_primitive("log", &[&[2, 3]], 0.1, 3.0, |g, v| Ok(g.log(v[0])));
    check_primitive("clamp", &[&[4, 4]], -2.0, 2.0, |g, v| Ok(g.clamp(v[0], -1.0, 1.0)));
    check_primitive("scale", &[&[3]], -2.0, 2.0, |g, v| Ok(g.scale(v[0], -3.5)));
    check_primitive("offset", &[&[3]], -2.0, 2.0, |g, v| Ok(g.offset(v[0], 0.25)));
    check_primitive("broadcast", &[&[1, 3]], -2.0, 2.0, |g, v| g.broadcast_to(v[0], &[4, 3]));
    check_primitive("broadcast_col", &[&[3, 1]], -2.0, 2.0, |g, v| {
        g.broadcast_to(v[0], &[3, 2])
    });
    check_primitive("reshape", &[&[2, 3]], -2.0, 2.0, |g, v| g.reshape(v[0], &[3, 2]));
    check_primitive("gather", &[&[4, 3]], -2.0, 2.0, |g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 3])
    });
    check_primitive("slice", &[&[4, 3]], -2.0, 2.0, |g, v| g.slice_rows(v[0], 1, 2));
}

#[test]
fn forward_values() {
    let mut g = Graph::new();
    let z = g.constant(Array::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.constant(Array::vector(vec![0.3; 4]));
    let s = g.softmax(x, 0).unwrap();
    assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let x = g.constant(Array::vector(vec![3.0f64.ln(), 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).data()[0] - 0.75).abs() < 1e-12);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.param(Array::scalar(0.0));
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    assert!((g.grad(x).unwrap().item() - 0.25).abs() < 1e-15);

    let f = |x: f64| 1.0 / (1.0 + (-x).exp());
    let h = 1e-5;
    let numeric = (f(h) - f(-h)) / (2.0 * h);
    assert!((numeric - 0.25).abs() < 1e-9);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0, 2.0, 3.0]));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.param(Array::scalar(5.0));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 2.0);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err(), "non-scalar loss");

    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(g.backward(l).is_err(), "second backward");
}

#[test]
fn backward_visits_each_reachable_node_once() {
    let mut g = Graph::new();
    let x = g.param(Array::vector(vec![0.5, -0.5]));
    let c = g.constant(Array::vector(vec![2.0, 2.0]));
    let a = g.mul(x, c).unwrap();
    let b = g.tanh(a);
    let d = g.add(a, b).unwrap();
    let e = g.add(d, a).unwrap();
    let _unused = g.sigmoid(x);
    let l = g.sum(e);
    g.backward(l).unwrap();
    // x, a, b, d, e, l; the constant and the dangling sigmoid are skipped
    assert_eq!(g.backward_visits(), 6);
    assert!(g.grad(c).is_none());
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::new();
    let a = g.param(Array::zeros(vec![2, 3]));
    let b = g.param(Array::zeros(vec![2, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(
        err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"),
        "{err}"
    );
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    assert!(g.softmax(a, 2).is_err());
    assert!(g.concat(&[a, b], 0).is_err());
    assert!(g.broadcast_to(a, &[4, 3]).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut g = Graph::new();
        let x = g.constant(rand_array(&[4, 7], -30.0, 30.0, &mut rng));
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for r in 0..4 {
            let row = v.row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn l2_normalize_yields_unit_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(rand_array(&[5, 6], -3.0, 3.0, &mut rng));
    let y = g.l2_normalize(x, 1, L2_EPS).unwrap();
    for r in 0..5 {
        let n: f64 = g.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    // zero input stays finite
    let z = g.constant(Array::zeros(vec![1, 3]));
    let y = g.l2_normalize(z, 1, L2_EPS).unwrap();
    assert!(g.value(y).all_finite());
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&[1, 4], -1.0, 1.0, &mut rng);
    let w = rand_array(&[4, 3], -1.0, 1.0, &mut rng);

    let linear = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            Ok(g.sum(y))
        },
        &[x.clone(), w.clone()],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(linear < 1e-9, "linear {linear}");

    let chain = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.sigmoid(y);
            weighted_sum(g, y, 1)
        },
        &[x.clone(), w],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(chain < TOL, "chain {chain}");

    let norm = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let y = g.l2_normalize(v[0], 1, L2_EPS)?;
            weighted_sum(g, y, 2)
        },
        &[x],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(norm < TOL, "norm {norm}");
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-10) - 1e-2).abs() < 1e-15);
}

#[test]
fn gru_zero_weights_halve_state() {
    let mut g = Graph::new();
    let p = GruParams::zeros(3, 2).bind(&mut g);
    let x = g.constant(Array::matrix(1, 3, vec![0.7, -1.0, 2.0]).unwrap());
    let h = g.constant(Array::matrix(1, 2, vec![0.8, -0.4]).unwrap());
    let h1 = gru_cell(&mut g, x, h, &p).unwrap();
    assert_eq!(g.value(h1).data(), &[0.4, -0.2]);
}

#[test]
fn gru_zero_candidate_from_zero_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = GruParams::init(3, 4, &mut rng);
    params.w_h = Array::zeros(vec![3, 4]);
    params.u_h = Array::zeros(vec![4, 4]);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(rand_array(&[1, 3], -1.0, 1.0, &mut rng));
    let h = g.constant(Array::zeros(vec![1, 4]));
    let h1 = gru_cell(&mut g, x, h, &p).unwrap();
    assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_cell_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d_in, d_h) = (3, 4);
    let mut params = GruParams::init(d_in, d_h, &mut rng);
    // non-zero biases so their gradients are exercised away from symmetry
    for b in [&mut params.b_z, &mut params.b_r, &mut params.b_h] {
        *b = rand_array(&[1, d_h], -0.5, 0.5, &mut rng);
    }
    let mut inputs: Vec<Array> = params.tensors().into_iter().cloned().collect();
    inputs.push(rand_array(&[1, d_in], -1.0, 1.0, &mut rng));
    inputs.push(rand_array(&[1, d_h], -1.0, 1.0, &mut rng));

    let err = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let p = GruVars {
                w_z: v[0],
                u_z: v[1],
                b_z: v[2],
                w_r: v[3],
                u_r: v[4],
                b_r: v[5],
                w_h: v[6],
                u_h: v[7],
                b_h: v[8],
            };
            let h = gru_cell(g, v[9], v[10], &p)?;
            weighted_sum(g, h, 9)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "gru rel error {err}");
}

#[test]
fn gru_sequence_matches_stepwise_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = GruParams::init(3, 4, &mut rng);
    let xs = rand_array(&[5, 3], -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let xv = g.constant(xs.clone());
    let seq = gru_sequence(&mut g, xv, &p, false).unwrap();
    let rev = gru_sequence(&mut g, xv, &p, true).unwrap();

    let mut h = g.constant(Array::zeros(vec![1, 4]));
    for t in 0..5 {
        let x = g.slice_rows(xv, t, 1).unwrap();
        h = gru_cell(&mut g, x, h, &p).unwrap();
        let want = g.value(h).data().to_vec();
        let got = g.value(seq).row(t);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // the reverse pass consumes row 4 first, so its row 4 is a single step
    let x4 = g.slice_rows(xv, 4, 1).unwrap();
    let h0 = g.constant(Array::zeros(vec![1, 4]));
    let h1 = gru_cell(&mut g, x4, h0, &p).unwrap();
    for (a, b) in g.value(rev).row(4).iter().zip(g.value(h1).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
