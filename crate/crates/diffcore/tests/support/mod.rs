//! Central-difference checks shared by the engine tests and the
//! acceptance suite.

#![allow(dead_code)]

use diffcore::gradcheck::{central_difference, max_relative_error};
use diffcore::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

/// Runs `build` once for the analytic gradient and repeatedly for the
/// numeric one; returns the max relative error over all inputs.
pub fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars).unwrap();
    let mut store = ParamStore::new();
    g.backward(loss, &mut store).unwrap();

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
        let numeric = central_difference(
            |x| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            g.input(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            g.input(t.clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                let loss = build(&mut g, &vars)?;
                g.value(loss).item()
            },
            t.data(),
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

/// Weighted sum so every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Max relative error of every differentiable primitive, by name.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let unary: Vec<(&str, Build, f64, f64)> = vec![
        ("neg", Box::new(|g: &mut Graph, v: &[Var]| g.neg(v[0])), -2.0, 2.0),
        ("exp", Box::new(|g: &mut Graph, v: &[Var]| g.exp(v[0])), -2.0, 2.0),
        ("log", Box::new(|g: &mut Graph, v: &[Var]| g.log(v[0])), 0.5, 3.0),
        ("sin", Box::new(|g: &mut Graph, v: &[Var]| g.sin(v[0])), -3.0, 3.0),
        ("cos", Box::new(|g: &mut Graph, v: &[Var]| g.cos(v[0])), -3.0, 3.0),
        ("sqrt", Box::new(|g: &mut Graph, v: &[Var]| g.sqrt(v[0])), 0.5, 3.0),
        ("tanh", Box::new(|g: &mut Graph, v: &[Var]| g.tanh(v[0])), -2.0, 2.0),
        ("sigmoid", Box::new(|g: &mut Graph, v: &[Var]| g.sigmoid(v[0])), -4.0, 4.0),
        ("softplus", Box::new(|g: &mut Graph, v: &[Var]| g.softplus(v[0])), -4.0, 4.0),
        ("relu", Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0])), 0.1, 2.0),
        ("relu_neg", Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0])), -2.0, -0.1),
        ("abs", Box::new(|g: &mut Graph, v: &[Var]| g.abs(v[0])), -2.0, -0.1),
        ("square", Box::new(|g: &mut Graph, v: &[Var]| g.square(v[0])), -2.0, 2.0),
        ("rot_a", Box::new(|g: &mut Graph, v: &[Var]| g.rot_coeff_a(v[0])), 0.0, 9.0),
        ("rot_b", Box::new(|g: &mut Graph, v: &[Var]| g.rot_coeff_b(v[0])), 0.0, 9.0),
        ("rot_a_small", Box::new(|g: &mut Graph, v: &[Var]| g.rot_coeff_a(v[0])), 1e-6, 2e-4),
        ("rot_b_small", Box::new(|g: &mut Graph, v: &[Var]| g.rot_coeff_b(v[0])), 1e-6, 2e-4),
        ("scale", Box::new(|g: &mut Graph, v: &[Var]| g.scale(v[0], -1.7)), -2.0, 2.0),
        ("add_scalar", Box::new(|g: &mut Graph, v: &[Var]| g.add_scalar(v[0], 0.3)), -2.0, 2.0),
        ("cumprod", Box::new(|g: &mut Graph, v: &[Var]| g.cumprod_exclusive(v[0])), -1.5, 1.5),
        ("transpose", Box::new(|g: &mut Graph, v: &[Var]| g.transpose(v[0])), -1.0, 1.0),
        ("slice", Box::new(|g: &mut Graph, v: &[Var]| g.slice_last(v[0], 1, 3)), -1.0, 1.0),
        ("sum_axis0", Box::new(|g: &mut Graph, v: &[Var]| g.sum_axis(v[0], 0)), -1.0, 1.0),
        ("sum_axis1", Box::new(|g: &mut Graph, v: &[Var]| g.sum_axis(v[0], 1)), -1.0, 1.0),
        ("reshape", Box::new(|g: &mut Graph, v: &[Var]| g.reshape(v[0], &[2, 10])), -1.0, 1.0),
        ("gather", Box::new(|g: &mut Graph, v: &[Var]| g.gather_rows(v[0], &[3, 0, 3, 1])), -1.0, 1.0),
        ("l2", Box::new(|g: &mut Graph, v: &[Var]| g.l2_norm(v[0])), -1.0, 1.0),
        ("l1", Box::new(|g: &mut Graph, v: &[Var]| g.l1_norm(v[0])), 0.1, 1.0),
        ("mean", Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0])), -1.0, 1.0),
    ];
    for (name, build, lo, hi) in &unary {
        let x = rand_tensor(&mut rng, &[4, 5], *lo, *hi);
        let err = check(&[x], |g, v| {
            let y = build(g, v)?;
            weighted_sum(g, y, 11)
        });
        out.push((*name, err));
    }

    let binary: Vec<(&str, Build, Vec<usize>, Vec<usize>)> = vec![
        ("add", Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])), vec![3, 4], vec![3, 4]),
        ("sub_row", Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1])), vec![3, 4], vec![4]),
        ("mul_col", Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])), vec![3, 4], vec![3, 1]),
        ("mul_mid", Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])), vec![2, 3, 4], vec![2, 1, 4]),
        ("mul_scalar", Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])), vec![3, 4], vec![]),
        ("div", Box::new(|g: &mut Graph, v: &[Var]| g.div(v[0], v[1])), vec![3, 4], vec![3, 4]),
        ("matmul", Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])), vec![3, 4], vec![4, 2]),
        ("concat", Box::new(|g: &mut Graph, v: &[Var]| g.concat(&[v[0], v[1]])), vec![3, 4], vec![3, 2]),
    ];
    for (name, build, sa, sb) in &binary {
        let a = rand_tensor(&mut rng, sa, -1.0, 1.0);
        let b = rand_tensor(&mut rng, sb, 0.5, 1.5);
        let err = check(&[a, b], |g, v| {
            let y = build(g, v)?;
            weighted_sum(g, y, 12)
        });
        out.push((*name, err));
    }

    let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let err = check(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, 14)
    });
    out.push(("linear", err));

    let u = rand_tensor(&mut rng, &[5, 4], -1.5, 1.5);
    let gamma = rand_tensor(&mut rng, &[4], 0.2, 2.0);
    let omega = rand_tensor(&mut rng, &[4], -3.0, 3.0);
    let err = check(&[u, gamma, omega], |g, v| {
        let y = g.gabor(v[0], v[1], v[2])?;
        weighted_sum(g, y, 15)
    });
    out.push(("gabor", err));

    // Bilinear sampling w.r.t. coordinates, away from texel boundaries.
    let image = rand_tensor(&mut rng, &[5, 6, 3], 0.0, 1.0);
    let coords = Tensor::new(vec![3, 2], vec![1.3, 2.6, 4.2, 0.4, 0.7, 3.55]).unwrap();
    let err = check(&[coords], |g, v| {
        let y = g.bilinear_sample(&image, v[0])?;
        weighted_sum(g, y, 13)
    });
    out.push(("bilinear", err));
    out
}

/// Builds a random composite of up to `depth` ops over two inputs.
pub fn random_composite(g: &mut Graph, v: &[Var], seed: u64, depth: usize) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &[4, 4], -0.8, 0.8))?;
    let mut x = v[0]; // [3, 4]
    let y = v[1]; // [3, 4]
    for _ in 0..depth {
        x = match rng.random_range(0..12) {
            0 => {
                let s = g.scale(x, 0.5)?;
                g.exp(s)?
            }
            1 => g.sin(x)?,
            2 => g.tanh(x)?,
            3 => g.sigmoid(x)?,
            4 => g.softplus(x)?,
            5 => g.mul(x, y)?,
            6 => g.add(x, y)?,
            7 => g.matmul(x, w)?,
            8 => {
                let d = g.square(y)?;
                let d = g.add_scalar(d, 1.0)?;
                g.div(x, d)?
            }
            9 => {
                let c = g.cos(x)?;
                let cat = g.concat(&[x, c])?;
                g.slice_last(cat, 2, 6)?
            }
            10 => {
                let s = g.sigmoid(x)?;
                g.cumprod_exclusive(s)?
            }
            _ => {
                let s = g.sum_axis(x, 1)?;
                let s = g.reshape(s, &[3, 1])?;
                let s = g.tanh(s)?;
                g.mul(x, s)?
            }
        };
    }
    let sq = g.square(x)?;
    let m = g.mean(sq)?;
    let other = weighted_sum(g, x, seed ^ 0xabc)?;
    g.add(m, other)
}

/// Max relative error of the seeded random composite `seed`.
pub fn random_composite_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let depth = rng.random_range(1..=10);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check(&[a, b], |g, v| random_composite(g, v, seed, depth))
}
