#![allow(dead_code)]

use one_core::{Graph, ParamStore, Result, Rng, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
}

pub fn rand_positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.5 + 1.5 * rng.uniform()).collect()).unwrap()
}

/// Contracts `out` against a fixed random tensor so every output element
/// carries a distinct weight.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let shape = g.shape(out).to_vec();
    let w = randn(&mut rng, &shape, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Central-difference check of every parameter in `store` for the scalar
/// built by `f`. Returns the worst per-tensor relative error
/// `|analytic - numeric| / (|analytic| + 1e-8)` in L2 norm.
pub fn gradcheck<B>(store: &mut ParamStore<f64>, f: B) -> f64
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    gradcheck_pair(store, &f, &f)
}

/// Like [`gradcheck`], but differentiates `analytic` by backprop and
/// `numeric` by central differences. Used where a stop-gradient makes the
/// backprop objective differ from the function being differenced.
pub fn gradcheck_pair<A, N>(store: &mut ParamStore<f64>, analytic: A, numeric: N) -> f64
where
    A: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    N: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let root = numeric(&mut g, s).unwrap();
        g.value(root).item()
    };
    store.zero_grad();
    let mut g = Graph::new();
    let root = analytic(&mut g, store).unwrap();
    g.backward(root, store).unwrap();
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let exact = store.grad(id).clone();
        let mut fd = vec![0.0; exact.len()];
        for j in 0..exact.len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(store);
            store.value_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            fd[j] = (up - down) / (2.0 * STEP);
        }
        let diff: f64 = exact.data().iter().zip(&fd).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let norm: f64 = exact.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / (norm + 1e-8));
    }
    worst
}

/// Direct nested-loop cross-correlation in f64; reference for the im2col path.
pub fn conv_reference(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [co, kk]: [usize; 2],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for ci in 0..c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((o * c + ci) * kk + ky) * kk + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}
pub mod grad_suite;
