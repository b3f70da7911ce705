//! Finite-difference checks of every layer and cell the networks use.
//!
//! Primitive operations are checked with respect to their inputs;
//! composite blocks (recurrent cells, the 3-D stem, fusion) with respect to
//! every named parameter, including their inputs stored as parameters.

use motseg_autograd::gradcheck::{check_gradients, relative_error};
use motseg_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::network::{recurrent, stem3d, fuse, CellKind, Ctx, EncoderConfig, ParamStore, Preset};

/// Central-difference step.
pub const EPS: f64 = 1e-4;
/// Relative-error tolerance.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub detail: String,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Distinct values far apart so pooling winners and ReLU signs stay fixed
/// inside the difference stencil.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).expect("shape matches")
}

fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.shape(v), 1.0);
    Ok(g.dot(v, r)?)
}

fn primitive(name: &str, inputs: &[Tensor], training: bool, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<LayerCheck> {
    let r = check_gradients(inputs, EPS, training, |g, v| f(g, v).map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => motseg_autograd::Error::Shape(other.to_string()),
    }))?;
    Ok(LayerCheck {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        detail: format!("worst {:?}: analytic {:.6e}, numeric {:.6e}", r.worst, r.analytic, r.numeric),
    })
}

/// Checks the gradient of `sum(f(ctx) * r)` for a fixed random `r` against
/// central differences over every parameter in `store` (at most
/// `per_tensor` entries each).
pub fn check_parameters(
    name: &str,
    store: &ParamStore,
    training: bool,
    per_tensor: usize,
    f: &dyn Fn(&mut Ctx) -> Result<Var>,
) -> Result<LayerCheck> {
    let eval = |s: &ParamStore, proj: &Tensor| -> Result<f64> {
        let mut ctx = Ctx::read(s, training);
        let out = f(&mut ctx)?;
        let l = ctx.g.dot(out, proj.clone())?;
        Ok(ctx.g.value(l).data()[0])
    };
    let mut ctx = Ctx::read(store, training);
    let out = f(&mut ctx)?;
    let proj = rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), ctx.g.shape(out), 1.0);
    let l = ctx.g.dot(out, proj.clone())?;
    let grads = ctx.g.backward(l)?.params();
    drop(ctx);

    let mut work = store.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(7);
    let mut report = LayerCheck { name: name.into(), max_rel_error: 0.0, checked: 0, detail: String::new() };
    for (pname, t) in &store.params {
        let analytic = grads.get(pname).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let idx: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            (0..per_tensor).map(|_| pick.gen_range(0..t.len())).collect()
        };
        for k in idx {
            let orig = t.data()[k];
            work.params.get_mut(pname).expect("cloned store").data_mut()[k] = orig + EPS;
            let plus = eval(&work, &proj)?;
            work.params.get_mut(pname).expect("cloned store").data_mut()[k] = orig - EPS;
            let minus = eval(&work, &proj)?;
            work.params.get_mut(pname).expect("cloned store").data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let err = relative_error(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.detail = format!("{pname}[{k}]: analytic {:.6e}, numeric {numeric:.6e}", analytic.data()[k]);
            }
        }
    }
    Ok(report)
}

/// Store holding `inputs` as parameters plus whatever `f` creates.
fn materialize(inputs: Vec<(&str, Tensor)>, seed: u64, f: &dyn Fn(&mut Ctx) -> Result<Var>) -> Result<ParamStore> {
    let mut store = ParamStore::default();
    for (n, t) in inputs {
        store.params.insert(n.to_string(), t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Ctx::create(&mut store, &mut rng);
    f(&mut ctx)?;
    drop(ctx);
    Ok(store)
}

fn input(ctx: &mut Ctx, name: &str, store_shape: &[usize]) -> Result<Var> {
    ctx.param(name, store_shape, crate::network::Init::Zeros)
}

fn cell_check(kind: CellKind, seed: u64) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c_in, c, h, w) = (2, 3, 4, 5, 7);
    let xs = rand_tensor(&mut rng, &[n, c_in, h, w], 1.0);
    let h0 = rand_tensor(&mut rng, &[n, c, h, w], 1.0);
    let c0 = rand_tensor(&mut rng, &[n, c, h, w], 1.0);
    let f = move |ctx: &mut Ctx| -> Result<Var> {
        let x = input(ctx, "in.x", &[n, c_in, h, w])?;
        let hp = input(ctx, "in.h", &[n, c, h, w])?;
        match kind {
            CellKind::Lstm => {
                let cp = input(ctx, "in.c", &[n, c, h, w])?;
                let (h1, c1) = recurrent::lstm_step(ctx, "cell", x, Some((hp, cp)), c, 3)?;
                // a second step exercises the recurrent path end to end
                let (h2, c2) = recurrent::lstm_step(ctx, "cell", x, Some((h1, c1)), c, 3)?;
                Ok(ctx.g.concat(&[h2, c2])?)
            }
            CellKind::Gru => {
                let h1 = recurrent::gru_step(ctx, "cell", x, Some(hp), c, 3)?;
                Ok(recurrent::gru_step(ctx, "cell", x, Some(h1), c, 3)?)
            }
        }
    };
    let mut inputs = vec![("in.x", xs), ("in.h", h0)];
    if kind == CellKind::Lstm {
        inputs.push(("in.c", c0));
    }
    let store = materialize(inputs, seed, &f)?;
    let name = match kind {
        CellKind::Lstm => "ConvLSTM cell",
        CellKind::Gru => "ConvGRU cell",
    };
    check_parameters(name, &store, false, 40, &f)
}

fn stem3d_check(seed: u64) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderConfig::preset(Preset::Tiny);
    let shape = [2, 6, 8, 8];
    let frames: Vec<Tensor> = (0..3).map(|_| separated(&mut rng, &shape)).collect();
    let names = ["in.x0", "in.x1", "in.x2"];
    let f = move |ctx: &mut Ctx| -> Result<Var> {
        let xs = names.iter().map(|n| input(ctx, n, &shape)).collect::<Result<Vec<_>>>()?;
        stem3d(ctx, &enc, &xs)
    };
    let store = materialize(names.iter().copied().zip(frames).collect(), seed, &f)?;
    check_parameters("3-D convolution stem", &store, true, 30, &f)
}

fn fusion_check(seed: u64) -> Result<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 4, 3, 5];
    let a = separated(&mut rng, &shape);
    let b = separated(&mut rng, &shape);
    let f = move |ctx: &mut Ctx| -> Result<Var> {
        let a = input(ctx, "in.a", &shape)?;
        let b = input(ctx, "in.b", &shape)?;
        fuse(ctx, 8, a, b)
    };
    let store = materialize(vec![("in.a", a), ("in.b", b)], seed, &f)?;
    check_parameters("mid-fusion", &store, true, 40, &f)
}

/// Runs every check. Deterministic in `seed`.
pub fn layer_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = rand_tensor(&mut rng, &[2, 6, 5, 7], 1.0);
    let w = rand_tensor(&mut rng, &[6, 2, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[6], 1.0);
    out.push(primitive("grouped convolution", &[x, w, b], false, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 3)?;
        project(g, y, 1)
    })?);

    let x = rand_tensor(&mut rng, &[2, 6, 3, 4], 1.0);
    out.push(primitive("channel shuffle", &[x], false, |g, v| {
        let y = g.channel_shuffle(v[0], 3)?;
        project(g, y, 2)
    })?);

    let x = rand_tensor(&mut rng, &[2, 3, 3, 4], 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 4, 4], 1.0);
    let b = rand_tensor(&mut rng, &[2], 1.0);
    out.push(primitive("transposed convolution", &[x, w, b], false, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(g, y, 3)
    })?);

    let x = rand_tensor(&mut rng, &[2, 3, 5, 7], 1.0);
    let gamma = rand_tensor(&mut rng, &[3], 1.0);
    let beta = rand_tensor(&mut rng, &[3], 1.0);
    for training in [true, false] {
        let name = if training { "batch norm (training)" } else { "batch norm (inference)" };
        out.push(primitive(name, &[x.clone(), gamma.clone(), beta.clone()], training, |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.9], "bn")?;
            project(g, y, 4)
        })?);
    }

    out.push(cell_check(CellKind::Lstm, seed + 1)?);
    out.push(cell_check(CellKind::Gru, seed + 2)?);
    out.push(stem3d_check(seed + 3)?);
    out.push(fusion_check(seed + 4)?);

    let logits = rand_tensor(&mut rng, &[2, 2, 4, 4], 2.0);
    let targets: Vec<u8> = (0..32).map(|i| if i % 7 == 0 { 255 } else { rng.gen_range(0..2) }).collect();
    out.push(primitive("weighted cross-entropy", &[logits], false, |g, v| {
        Ok(g.weighted_cross_entropy(v[0], &targets, &[0.1, 2.0])?)
    })?);
    Ok(out)
}
