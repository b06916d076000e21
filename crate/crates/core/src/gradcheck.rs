//! Central finite-difference checks against [`Graph::backward`].

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)` over
    /// all parameters; zero when both gradients vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares autodiff gradients of the scalar built by `f` with central
/// differences of step `h` over every entry of every parameter in `store`.
pub fn check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_with_reference(store, h, &f, &f)
}

/// Like [`check`], but the numeric side differentiates `reference`, a
/// surrogate whose derivative the autodiff path of `f` is meant to follow
/// (straight-through and stop-gradient contracts).
pub fn check_with_reference<F, R>(store: &ParamStore, h: f64, f: F, reference: R) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    for id in store.ids() {
        g.param(store, id);
    }
    let root = f(&mut g, store)?;
    let grads = g.backward(root)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let r = reference(&mut g, s)?;
        Ok(g.value(r).data()[0])
    };

    let mut work = store.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut checked = 0;
    for id in store.ids() {
        let analytic = grads.get(id).expect("every bound parameter has a gradient").clone();
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck { relative_error, max_abs_error: max_abs, checked })
}

/// Every differentiable primitive of [`Graph`], for randomized checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    BatchMatMul,
    BatchMatMulTransposed,
    Add,
    AddBroadcast,
    Multiply,
    MultiplyBroadcast,
    Negate,
    Exp,
    Log,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Reciprocal,
    Square,
    Softmax,
    LogSoftmax,
    LogSumExp,
    Sum,
    Mean,
    SumAll,
    EmbeddingLookup,
    Gather,
    Concat,
    LayerNorm,
    Reshape,
    Permute,
    Slice,
    StopGradient,
    StraightThrough,
}

impl Primitive {
    pub const ALL: [Primitive; 31] = [
        Primitive::MatMul,
        Primitive::BatchMatMul,
        Primitive::BatchMatMulTransposed,
        Primitive::Add,
        Primitive::AddBroadcast,
        Primitive::Multiply,
        Primitive::MultiplyBroadcast,
        Primitive::Negate,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::Sigmoid,
        Primitive::Softplus,
        Primitive::Reciprocal,
        Primitive::Square,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::LogSumExp,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumAll,
        Primitive::EmbeddingLookup,
        Primitive::Gather,
        Primitive::Concat,
        Primitive::LayerNorm,
        Primitive::Reshape,
        Primitive::Permute,
        Primitive::Slice,
        Primitive::StopGradient,
        Primitive::StraightThrough,
    ];
}

/// Builds a random instance of `kind` from `seed` and runs [`check`] on
/// `sum(w * primitive(inputs))` with a fixed random weighting `w`.
pub fn check_primitive(kind: Primitive, seed: u64, h: f64) -> Result<GradCheck> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=4usize);
    let (d0, d1, d2) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let rand_tensor = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, away_from_zero: bool| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let mut v = rng.random_range(lo..hi);
                if away_from_zero && v.abs() < 0.1 {
                    v += 0.2f64.copysign(v);
                }
                v
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    };

    let mut store = ParamStore::new();
    let shape3 = [d0, d1, d2];
    let axis = rng.random_range(0..3usize);
    let indices: Vec<usize> = (0..d0 * d1).map(|_| rng.random_range(0..d2)).collect();
    let perm = {
        let mut p = vec![0, 1, 2];
        for i in (1..3).rev() {
            let j = rng.random_range(0..=i);
            p.swap(i, j);
        }
        p
    };
    let slice_start = rng.random_range(0..d2);
    let slice_len = rng.random_range(1..=d2 - slice_start);

    match kind {
        Primitive::Log => {
            store.add("a", rand_tensor(&mut rng, &shape3, 0.5, 2.0, false));
        }
        Primitive::Reciprocal | Primitive::Relu => {
            store.add("a", rand_tensor(&mut rng, &shape3, -2.0, 2.0, true));
        }
        Primitive::MatMul => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
            store.add("b", rand_tensor(&mut rng, &[d2, d1], -1.0, 1.0, false));
        }
        Primitive::BatchMatMul => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
            store.add("b", rand_tensor(&mut rng, &[d0, d2, d1], -1.0, 1.0, false));
        }
        Primitive::BatchMatMulTransposed => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
            store.add("b", rand_tensor(&mut rng, &[d0, d1, d2], -1.0, 1.0, false));
        }
        Primitive::Add | Primitive::Multiply | Primitive::Concat => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
            store.add("b", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
        }
        Primitive::AddBroadcast | Primitive::MultiplyBroadcast => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.0, 1.0, false));
            store.add("b", rand_tensor(&mut rng, &[d1, d2], -1.0, 1.0, false));
        }
        Primitive::EmbeddingLookup => {
            store.add("a", rand_tensor(&mut rng, &[d2, d1], -1.0, 1.0, false));
        }
        Primitive::LayerNorm => {
            store.add("a", rand_tensor(&mut rng, &[d0, d1, d2 + 1], -1.0, 1.0, false));
            store.add("scale", rand_tensor(&mut rng, &[d2 + 1], 0.5, 1.5, false));
            store.add("bias", rand_tensor(&mut rng, &[d2 + 1], -0.5, 0.5, false));
        }
        _ => {
            store.add("a", rand_tensor(&mut rng, &shape3, -1.5, 1.5, false));
        }
    }

    let original = store.clone();
    let build = move |g: &mut Graph, s: &ParamStore, surrogate: bool| -> Result<Var> {
        let id = |n: &str| s.id(n).expect("param");
        let a = g.param(s, id("a"));
        let b = s.id("b").map(|b| g.param(s, b));
        let out = match kind {
            Primitive::MatMul => g.matmul(a, b.unwrap())?,
            Primitive::BatchMatMul => g.bmm(a, b.unwrap(), false)?,
            Primitive::BatchMatMulTransposed => g.bmm(a, b.unwrap(), true)?,
            Primitive::Add | Primitive::AddBroadcast => g.add(a, b.unwrap())?,
            Primitive::Multiply | Primitive::MultiplyBroadcast => g.mul(a, b.unwrap())?,
            Primitive::Negate => g.neg(a)?,
            Primitive::Exp => g.exp(a)?,
            Primitive::Log => g.log(a)?,
            Primitive::Relu => g.relu(a)?,
            Primitive::Gelu => g.gelu(a)?,
            Primitive::Sigmoid => g.sigmoid(a)?,
            Primitive::Softplus => g.softplus(a)?,
            Primitive::Reciprocal => g.recip(a)?,
            Primitive::Square => g.square(a)?,
            Primitive::Softmax => g.softmax(a, axis)?,
            Primitive::LogSoftmax => g.log_softmax(a, axis)?,
            Primitive::LogSumExp => g.logsumexp(a, axis)?,
            Primitive::Sum => g.sum(a, axis)?,
            Primitive::Mean => g.mean(a, axis)?,
            Primitive::SumAll => g.sum_all(a),
            Primitive::EmbeddingLookup => g.embedding(a, &indices, &[d0, d1])?,
            Primitive::Gather => g.gather(a, &indices)?,
            Primitive::Concat => g.concat(&[a, b.unwrap(), a], axis)?,
            Primitive::LayerNorm => {
                let sc = g.param(s, id("scale"));
                let bi = g.param(s, id("bias"));
                g.layer_norm(a, sc, bi)?
            }
            Primitive::Reshape => g.reshape(a, &[d2, d0 * d1])?,
            Primitive::Permute => g.permute(a, &perm)?,
            Primitive::Slice => g.slice(a, 2, slice_start, slice_len)?,
            Primitive::StopGradient if surrogate => {
                let frozen = g.constant(original.get(id("a")).clone());
                g.square(frozen)?
            }
            Primitive::StopGradient => {
                let sg = g.stop_gradient(a);
                g.square(sg)?
            }
            Primitive::StraightThrough if surrogate => g.softmax(a, 2)?,
            Primitive::StraightThrough => {
                let hard = g.value(a).map(|v| v.round());
                let soft = g.softmax(a, 2)?;
                let hard = hard.reshape(g.shape(soft))?;
                g.straight_through(soft, hard)?
            }
        };
        // Fixed pseudo-random weighting so the root is not a plain sum.
        let n = g.value(out).numel();
        let weights: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919 + 13) % 17) as f64 / 11.0).collect();
        let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights)?);
        let weighted = g.mul(out, w)?;
        Ok(g.sum_all(weighted))
    };
    check_with_reference(&store, h, |g, s| build(g, s, false), |g, s| build(g, s, true))
}
