//! Derivative-check helpers shared by the kernel tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use skipdit::diffusion::Label;
use skipdit::ndkernel::{gradient, vjp, Array, ParamSet, Tape, Var};
use skipdit::skipdit::{timestep_embedding, ModelConfig, SkipDiT};
use skipdit::Result;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub type Prim = Box<dyn for<'a> Fn(&mut Tape<'a>, Var) -> Result<Var>>;

pub fn eval(f: &Prim, x: &Array) -> Array {
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v).unwrap();
    tape.value(out).clone()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Max relative error between the reverse-mode gradient of `<w, f(x)>` and
/// its central-difference estimate, over every input coordinate.
pub fn grad_check(f: &Prim, x: &Array, rng: &mut ChaCha8Rng) -> f64 {
    let y = eval(f, x);
    let w = Array::randn(y.shape().to_vec(), rng);
    let analytic = vjp(|t, v| f(t, v), x, &w).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let numeric = (eval(f, &xp).dot(&w).unwrap() - eval(f, &xm).dot(&w).unwrap()) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    Array::randn(shape.to_vec(), rng)
}

/// Every primitive, differentiated with respect to each operand in turn.
pub fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Prim, Array)> {
    let c34 = randn(&[3, 4], rng);
    let c45 = randn(&[4, 5], rng);
    let c23 = randn(&[2, 3], rng);
    let row4 = randn(&[4], rng);
    let row14 = randn(&[1, 4], rng);
    let m34 = c34.clone();
    let m45 = c45.clone();
    let a34 = c34.clone();
    let b34 = c34.clone();
    let d34 = c34.clone();
    let e34 = c34.clone();
    let r4 = row4.clone();
    let r14 = row14.clone();
    let m23 = c23.clone();
    let idx: Arc<[usize]> = Arc::from(vec![11usize, 0, 5, 5, 7, 2]);
    vec![
        ("matmul left", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(m45.clone());
            t.matmul(x, b)
        }) as Prim, randn(&[3, 4], rng)),
        ("matmul right", Box::new(move |t: &mut Tape<'_>, x| {
            let a = t.input(m34.clone());
            t.matmul(a, x)
        }), randn(&[4, 5], rng)),
        ("matmul square", Box::new(|t: &mut Tape<'_>, x| t.matmul(x, x)), randn(&[4, 4], rng)),
        ("add left", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(a34.clone());
            t.add(x, b)
        }), randn(&[3, 4], rng)),
        ("add row broadcast", Box::new(|t: &mut Tape<'_>, x| {
            let a = t.input(Array::full([3, 4], 0.5));
            t.add(a, x)
        }), randn(&[4], rng)),
        ("sub left", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(b34.clone());
            t.sub(x, b)
        }), randn(&[3, 4], rng)),
        ("sub right broadcast", Box::new(move |t: &mut Tape<'_>, x| {
            let a = t.input(d34.clone());
            t.sub(a, x)
        }), randn(&[1, 4], rng)),
        ("mul left broadcast", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(r4.clone());
            t.mul(x, b)
        }), randn(&[3, 4], rng)),
        ("mul right broadcast", Box::new(move |t: &mut Tape<'_>, x| {
            let a = t.input(e34.clone());
            t.mul(a, x)
        }), randn(&[4], rng)),
        ("mul self", Box::new(|t: &mut Tape<'_>, x| t.mul(x, x)), randn(&[3, 4], rng)),
        ("mul [1,n] broadcast", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(r14.clone());
            t.mul(x, b)
        }), randn(&[3, 4], rng)),
        ("concat", Box::new(move |t: &mut Tape<'_>, x| {
            let b = t.input(m23.clone());
            let y = t.concat(&[b, x, b])?;
            t.mul(y, y)
        }), randn(&[2, 2], rng)),
        ("layer_norm", Box::new(|t: &mut Tape<'_>, x| t.layer_norm(x)), randn(&[3, 5], rng)),
        ("softmax", Box::new(|t: &mut Tape<'_>, x| t.softmax(x)), randn(&[3, 5], rng)),
        ("gelu", Box::new(|t: &mut Tape<'_>, x| Ok(t.gelu(x))), randn(&[2, 6], rng).scaled(2.0)),
        ("silu", Box::new(|t: &mut Tape<'_>, x| Ok(t.silu(x))), randn(&[2, 6], rng).scaled(2.0)),
        ("scale", Box::new(|t: &mut Tape<'_>, x| Ok(t.scale(x, -1.7))), randn(&[5], rng)),
        ("reshape", Box::new(|t: &mut Tape<'_>, x| {
            let r = t.reshape(x, &[4, 3])?;
            t.mul(r, r)
        }), randn(&[3, 4], rng)),
        ("mean", Box::new(|t: &mut Tape<'_>, x| {
            let y = t.mul(x, x)?;
            t.mean(y)
        }), randn(&[3, 4], rng)),
        ("sum", Box::new(|t: &mut Tape<'_>, x| {
            let y = t.gelu(x);
            Ok(t.sum(y))
        }), randn(&[3, 4], rng)),
        ("slice axis 0", Box::new(|t: &mut Tape<'_>, x| t.slice(x, 0, 1, 3)), randn(&[4, 3], rng)),
        ("slice axis 1", Box::new(|t: &mut Tape<'_>, x| t.slice(x, 1, 2, 5)), randn(&[3, 6], rng)),
        ("transpose", Box::new(|t: &mut Tape<'_>, x| {
            let y = t.transpose(x)?;
            t.matmul(x, y)
        }), randn(&[3, 4], rng)),
        ("gather", Box::new(move |t: &mut Tape<'_>, x| {
            let g = t.gather(x, idx.clone(), &[2, 3])?;
            t.mul(g, g)
        }), randn(&[3, 4], rng)),
    ]
}

pub fn toy_model(seed: u64) -> SkipDiT {
    let cfg = ModelConfig {
        image_size: 4,
        patch_size: 2,
        hidden_dim: 8,
        depth: 2,
        heads: 2,
        num_classes: 3,
        fusion_norm_affine: true,
        ..ModelConfig::default()
    };
    let mut m = SkipDiT::new(cfg, seed).unwrap();
    // adaLN-Zero leaves gradients of most entries at zero; perturb them so the
    // check exercises every path.
    m.randomize_zero_init(seed + 1, 0.2);
    m
}

/// Max relative error of the input gradient of `<w, block(x)>`.
pub fn block_gradient_error(model: &SkipDiT, block: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (tokens, d) = (model.config().tokens(), model.config().hidden_dim);
    let x = randn(&[tokens, d], rng);
    let w = randn(&[tokens, d], rng);
    let cond = timestep_embedding(137.0, d);
    let block_out = |x: &Array| -> f64 {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let c = t.input(cond.clone());
        let out = model.build_block(&mut t, model.params(), block, xv, c).unwrap();
        t.value(out).dot(&w).unwrap()
    };
    let analytic = vjp(
        |t, xv| {
            let c = t.input(cond.clone());
            model.build_block(t, model.params(), block, xv, c)
        },
        &x,
        &w,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let numeric = (block_out(&xp) - block_out(&xm)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Gradient of `<w, model(x)>` with respect to every parameter entry of
/// the listed tensors.
pub fn param_gradient_error(model: &SkipDiT, names: &[&str], rng: &mut ChaCha8Rng) -> f64 {
    let shape = model.config().image_shape();
    let x = Array::randn(shape.to_vec(), rng);
    let w = Array::randn(shape.to_vec(), rng);
    let label = Label::Class(1);
    let t = 321;
    let loss = |p: &ParamSet| model.forward_with(p, &x, t, label).unwrap().dot(&w).unwrap();
    let (_, grads) = gradient(model.params(), |tape, p| {
        let xv = tape.input(x.clone());
        let out = model.build(tape, p, xv, t, label)?;
        let wv = tape.input(w.clone());
        let prod = tape.mul(out, wv)?;
        Ok(tape.sum(prod))
    })
    .unwrap();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = model.params().get(name).unwrap().len();
        for i in 0..n {
            let mut pp = model.params().clone();
            pp.get_mut(name).unwrap().data_mut()[i] += H;
            let mut pm = model.params().clone();
            pm.get_mut(name).unwrap().data_mut()[i] -= H;
            let numeric = (loss(&pp) - loss(&pm)) / (2.0 * H);
            let a = grads.get(name).unwrap().data()[i];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
