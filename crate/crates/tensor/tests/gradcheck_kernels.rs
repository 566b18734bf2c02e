//! Every differentiable kernel against central differences, 50 seeds each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehab_tensor::{finite_difference_check, Conv3dSpec, Graph, Real, Result, Tensor, Var};

const SEEDS: u64 = 50;
const H: Real = 1e-5;
const TOL: Real = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values bounded away from zero so that ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: Real = r.gen_range(0.05..1.5);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `y` onto fixed random weights so every output entry matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0xabcdef));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(name: &str, f: F, params: Vec<Tensor>)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = finite_difference_check(f, &params, H, TOL).unwrap();
    assert!(r.passed, "{name}: {r:?}");
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

#[test]
fn matmul() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (m, k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let a = Tensor::randn([m, k], 1.0, &mut r);
        let b = Tensor::randn([k, n], 1.0, &mut r);
        check(
            "matmul",
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
            vec![a, b],
        );
    }
}

#[test]
fn linear() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (b, l, i, o) = (
            dims(&mut r, 1, 3),
            dims(&mut r, 1, 3),
            dims(&mut r, 1, 4),
            dims(&mut r, 1, 4),
        );
        let x = Tensor::randn([b, l, i], 1.0, &mut r);
        let w = Tensor::randn([i, o], 1.0, &mut r);
        let bias = Tensor::randn([o], 1.0, &mut r);
        check(
            "linear",
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, s)
            },
            vec![x, w, bias],
        );
    }
}

#[test]
fn bmm_both_layouts() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (bt, m, k, n) = (
            dims(&mut r, 1, 3),
            dims(&mut r, 1, 4),
            dims(&mut r, 1, 4),
            dims(&mut r, 1, 4),
        );
        let a = Tensor::randn([bt, m, k], 1.0, &mut r);
        let b = Tensor::randn([bt, k, n], 1.0, &mut r);
        let bt_ = Tensor::randn([bt, n, k], 1.0, &mut r);
        check(
            "bmm",
            |g, v| {
                let y = g.bmm(v[0], v[1], false)?;
                project(g, y, s)
            },
            vec![a.clone(), b],
        );
        check(
            "bmm_t",
            |g, v| {
                let y = g.bmm(v[0], v[1], true)?;
                project(g, y, s)
            },
            vec![a, bt_],
        );
    }
}

#[test]
fn elementwise() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 5)];
        let a = away_from_zero(&shape, &mut r);
        let b = Tensor::randn(shape, 1.0, &mut r);
        let row = Tensor::randn([shape[1]], 1.0, &mut r);
        check(
            "add",
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            },
            vec![a.clone(), b.clone()],
        );
        check(
            "mul",
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            },
            vec![a.clone(), b.clone()],
        );
        check(
            "add_broadcast",
            |g, v| {
                let y = g.add_broadcast(v[0], v[1])?;
                project(g, y, s)
            },
            vec![a.clone(), row],
        );
        check(
            "scale",
            |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, s)
            },
            vec![a.clone()],
        );
        check(
            "relu",
            |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, s)
            },
            vec![a.clone()],
        );
        check(
            "gelu",
            |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, s)
            },
            vec![b.clone()],
        );
        check(
            "sum",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            },
            vec![b.clone()],
        );
        check(
            "mean",
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            },
            vec![b],
        );
    }
}

#[test]
fn softmax_and_layer_norm() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let shape = [dims(&mut r, 1, 3), dims(&mut r, 2, 6)];
        let x = Tensor::randn(shape, 1.5, &mut r);
        let gain = Tensor::randn([shape[1]], 1.0, &mut r);
        let bias = Tensor::randn([shape[1]], 1.0, &mut r);
        check(
            "softmax",
            |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, s)
            },
            vec![x.clone()],
        );
        check(
            "layer_norm",
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s)
            },
            vec![x, gain, bias],
        );
    }
}

#[test]
fn shape_ops() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (a, b, c) = (dims(&mut r, 1, 3), dims(&mut r, 2, 4), dims(&mut r, 1, 3));
        let x = Tensor::randn([a, b, c], 1.0, &mut r);
        let y = Tensor::randn([a, 2, c], 1.0, &mut r);
        check(
            "reshape",
            |g, v| {
                let o = g.reshape(v[0], &[a * b, c])?;
                project(g, o, s)
            },
            vec![x.clone()],
        );
        check(
            "permute",
            |g, v| {
                let o = g.permute(v[0], &[2, 0, 1])?;
                project(g, o, s)
            },
            vec![x.clone()],
        );
        check(
            "concat",
            |g, v| {
                let o = g.concat(&[v[0], v[1]], 1)?;
                project(g, o, s)
            },
            vec![x.clone(), y],
        );
        check(
            "narrow",
            |g, v| {
                let o = g.narrow(v[0], 1, 1, b - 1)?;
                project(g, o, s)
            },
            vec![x.clone()],
        );
        check(
            "expand",
            |g, v| {
                let o = g.expand(v[0], 3)?;
                project(g, o, s)
            },
            vec![x.clone()],
        );
        check(
            "mean_axis",
            |g, v| {
                let o = g.mean_axis(v[0], 1)?;
                project(g, o, s)
            },
            vec![x],
        );
    }
}

#[test]
fn cross_entropy() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (b, c) = (dims(&mut r, 1, 4), dims(&mut r, 2, 9));
        let logits = Tensor::randn([b, c], 2.0, &mut r);
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        check(
            "cross_entropy",
            |g, v| g.cross_entropy(v[0], &labels),
            vec![logits],
        );
    }
}

#[test]
fn dropout_with_fixed_mask() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let x = Tensor::randn([3, 4], 1.0, &mut r);
        check(
            "dropout",
            |g, v| {
                let mut mask_rng = rng(s + 1000);
                let y = g.dropout(v[0], 0.3, &mut mask_rng)?;
                project(g, y, s)
            },
            vec![x],
        );
    }
}

#[test]
fn conv3d() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (n, c, o) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let input = [dims(&mut r, 2, 4), dims(&mut r, 2, 5), dims(&mut r, 2, 5)];
        let stride = [dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 1, 2)];
        let x = Tensor::randn([n, c, input[0], input[1], input[2]], 1.0, &mut r);
        let w = Tensor::randn([o, c, 3, 3, 3], 0.5, &mut r);
        let b = Tensor::randn([o], 0.5, &mut r);
        let spec = Conv3dSpec {
            stride,
            padding: [1, 1, 1],
        };
        check(
            "conv3d",
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], spec)?;
                project(g, y, s)
            },
            vec![x, w, b],
        );
    }
}

#[test]
fn attention() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let (h, l, d) = (dims(&mut r, 1, 3), dims(&mut r, 1, 5), dims(&mut r, 1, 4));
        let q = Tensor::randn([h, l, d], 1.0, &mut r);
        let k = Tensor::randn([h, l, d], 1.0, &mut r);
        let v = Tensor::randn([h, l, d], 1.0, &mut r);
        check(
            "attention",
            |g, p| {
                let y = g.attention(p[0], p[1], p[2])?;
                project(g, y, s)
            },
            vec![q, k, v],
        );
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for s in 0..SEEDS {
        let mut r = rng(s);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([4, 7], 5.0, &mut r));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn kernels_are_deterministic() {
    let run = || {
        let mut r = rng(7);
        let mut g = Graph::new();
        let x = g.param(Tensor::randn([2, 3, 4, 5, 5], 1.0, &mut r));
        let w = g.param(Tensor::randn([2, 3, 3, 3, 3], 1.0, &mut r));
        let b = g.param(Tensor::randn([2], 1.0, &mut r));
        let spec = Conv3dSpec {
            stride: [1, 2, 2],
            padding: [1, 1, 1],
        };
        let y = g.conv3d(x, w, b, spec).unwrap();
        let y = g.reshape(y, &[2, 2 * 4 * 3 * 3]).unwrap();
        let y = g.softmax(y).unwrap();
        let loss = g.cross_entropy(y, &[0, 5]).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.get(w).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.item().to_bits(), l2.item().to_bits());
    assert!(g1
        .data()
        .iter()
        .zip(g2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}
