use candle_core::{DType, Device, Tensor, Var};
use diffseg_core::features::FusionBlock;
use diffseg_core::nn::VarStore;
use diffseg_core::seg::SegHead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn perturbed(var: &Var, idx: usize, delta: f64) -> Tensor {
    let shape = var.shape().clone();
    let mut v = var
        .as_tensor()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    v[idx] += delta;
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Compares analytic gradients of `loss` with central differences on sampled coordinates of every variable.
fn check(vars: &[(String, Var)], x: &Var, loss: &dyn Fn() -> Tensor, seed: u64) {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<(String, &Var)> = vars.iter().map(|(n, v)| (n.clone(), v)).collect();
    targets.push(("input".into(), x));
    for (name, var) in targets {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let original = var.as_tensor().copy().unwrap();
        for _ in 0..6 {
            let idx = rng.random_range(0..g.len());
            var.set(&perturbed(var, idx, H)).unwrap();
            let plus = scalar(&loss());
            var.set(&original).unwrap();
            var.set(&perturbed(var, idx, -H)).unwrap();
            let minus = scalar(&loss());
            var.set(&original).unwrap();
            let numeric = (plus - minus) / (2.0 * H);
            let err = rel_err(g[idx], numeric);
            assert!(
                err < TOL,
                "{name}[{idx}]: analytic {} numeric {numeric} rel {err}",
                g[idx]
            );
        }
    }
}

fn random_var(shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

#[test]
fn fusion_block_matches_finite_differences() {
    let mut vs = VarStore::new(7, DType::F64);
    let block = FusionBlock::new(&mut vs.root().pp("fusion"), 6, 8).unwrap();
    let x = random_var(&[2, 6, 5, 4], 1);
    let weight = random_var(&[2, 8, 5, 4], 2);
    let loss = || {
        block
            .forward(x.as_tensor())
            .unwrap()
            .mul(weight.as_tensor())
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let vars: Vec<(String, Var)> = vs
        .vars()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    assert!(vars.len() >= 6);
    check(&vars, &x, &loss, 3);
}

#[test]
fn seg_head_matches_finite_differences() {
    let mut vs = VarStore::new(8, DType::F64);
    let head = SegHead::new(&mut vs.root().pp("head"), 8, 8, 3).unwrap();
    let x = random_var(&[2, 8, 3, 3], 4);
    let weight = random_var(&[2, 3, 6, 5], 5);
    let loss = || {
        head.forward(x.as_tensor(), 6, 5)
            .unwrap()
            .mul(weight.as_tensor())
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let vars: Vec<(String, Var)> = vs
        .vars()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    check(&vars, &x, &loss, 6);
}
