//! Derivative checks: reverse-mode gradients against central differences and
//! the adjoint identity between forward and reverse sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipdit::ndkernel::{gradient, jvp, vjp, Array, ParamSet, Tape, Var};
use skipdit::Result;

mod common;
use common::*;

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, f, x) in primitives(&mut rng) {
        let err = grad_check(&f, &x, &mut rng);
        assert!(err < REL_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn adjoint_identity_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prims = primitives(&mut rng);
    for case in 0..100 {
        let (name, f, x0) = &prims[case % prims.len()];
        let x = randn(x0.shape(), &mut rng);
        let v = randn(x.shape(), &mut rng);
        let jv = jvp(|t, a| f(t, a), &x, &v).unwrap();
        let u = randn(jv.shape(), &mut rng);
        let jtu = vjp(|t, a| f(t, a), &x, &u).unwrap();
        let (lhs, rhs) = (u.dot(&jv).unwrap(), jtu.dot(&v).unwrap());
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
            "case {case} ({name}): {lhs} vs {rhs}"
        );
    }
}

#[test]
fn jvp_matches_directional_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, f, x) in primitives(&mut rng) {
        let v = randn(x.shape(), &mut rng);
        let jv = jvp(|t, a| f(t, a), &x, &v).unwrap();
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.add_scaled(&v, H).unwrap();
        xm.add_scaled(&v, -H).unwrap();
        let (fp, fm) = (eval(&f, &xp), eval(&f, &xm));
        let fd = fp.sub(&fm).unwrap().scaled(1.0 / (2.0 * H));
        for (a, b) in jv.data().iter().zip(fd.data()) {
            assert!(rel_err(*a, *b) < 1e-5, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn dit_block_input_gradient() {
    let model = toy_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let worst = block_gradient_error(&model, 2, &mut rng);
    assert!(worst < REL_TOL, "block input gradient error {worst:e}");
}

#[test]
fn full_model_parameter_gradients() {
    let model = toy_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names: Vec<&str> = vec![
        "blocks.1.attn.qkv.weight",
        "blocks.1.adaln.bias",
        "blocks.2.mlp.fc1.bias",
        "skips.1.linear.bias",
        "skips.1.norm.weight",
        "t_embed.fc2.bias",
        "final.adaln.bias",
        "final.linear.bias",
        "class_embed",
        "pos",
    ];
    for n in &names {
        assert!(model.params().get(n).is_some(), "missing {n}");
    }
    let err = param_gradient_error(&model, &names, &mut rng);
    assert!(err < REL_TOL, "parameter gradient error {err:e}");
}

#[test]
fn unbound_parameters_get_zero_gradients() {
    let mut p = ParamSet::new();
    p.insert("used", Array::from_vec(vec![2.0, -1.0]));
    p.insert("unused", Array::from_vec(vec![5.0]));
    let (loss, g) = gradient(&p, |tape, p| {
        let u = tape.param("used", p.get("used").unwrap());
        let sq = tape.mul(u, u)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert_eq!(loss, 5.0);
    assert_eq!(g.get("used").unwrap().data(), &[4.0, -2.0]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0]);
}

fn mlp<'a>(t: &mut Tape<'a>, x: Var, w1: &Array, w2: &Array, b1: &Array) -> Result<Var> {
    let w1 = t.input(w1.clone());
    let w2 = t.input(w2.clone());
    let b1 = t.input(b1.clone());
    let h = t.matmul(x, w1)?;
    let h = t.add(h, b1)?;
    let h = t.gelu(h);
    t.matmul(h, w2)
}

#[test]
fn two_layer_mlp_gradient_and_jvp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w1, w2, b1) = (randn(&[5, 7], &mut rng), randn(&[7, 3], &mut rng), randn(&[7], &mut rng));
    let mut p = ParamSet::new();
    p.insert("w1", w1.clone());
    p.insert("w2", w2.clone());
    p.insert("b1", b1.clone());
    let x = randn(&[4, 5], &mut rng);
    let loss = |p: &ParamSet| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = mlp(&mut t, xv, p.get("w1").unwrap(), p.get("w2").unwrap(), p.get("b1").unwrap()).unwrap();
        let sq = t.mul(y, y).unwrap();
        let s = t.sum(sq);
        t.value(s).item().unwrap()
    };
    let (value, grads) = gradient(&p, |t, p| {
        let xv = t.input(x.clone());
        let w1 = t.param("w1", p.get("w1").unwrap());
        let w2 = t.param("w2", p.get("w2").unwrap());
        let b1 = t.param("b1", p.get("b1").unwrap());
        let h = t.matmul(xv, w1)?;
        let h = t.add(h, b1)?;
        let h = t.gelu(h);
        let y = t.matmul(h, w2)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert_eq!(value, loss(&p));
    let mut worst: f64 = 0.0;
    for name in ["w1", "w2", "b1"] {
        for i in 0..p.get(name).unwrap().len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.get_mut(name).unwrap().data_mut()[i] += H;
            pm.get_mut(name).unwrap().data_mut()[i] -= H;
            let numeric = (loss(&pp) - loss(&pm)) / (2.0 * H);
            worst = worst.max(rel_err(grads.get(name).unwrap().data()[i], numeric));
        }
    }
    assert!(worst < REL_TOL, "mlp gradient error {worst:e}");

    let v = randn(&[4, 5], &mut rng);
    let f = |t: &mut Tape<'_>, xv: Var| mlp(t, xv, &w1, &w2, &b1);
    let jv = jvp(f, &x, &v).unwrap();
    let eval_at = |c: f64| {
        let mut xs = x.clone();
        xs.add_scaled(&v, c).unwrap();
        let mut t = Tape::new();
        let xv = t.input(xs);
        let y = f(&mut t, xv).unwrap();
        t.value(y).clone()
    };
    let fd = eval_at(H).sub(&eval_at(-H)).unwrap().scaled(1.0 / (2.0 * H));
    for (a, b) in jv.data().iter().zip(fd.data()) {
        assert!(rel_err(*a, *b) < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn closed_form_derivatives() {
    let mut p = ParamSet::new();
    p.insert("x", Array::scalar(3.0));
    let (_, g) = gradient(&p, |t, p| {
        let x = t.param("x", p.get("x").unwrap());
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[6.0]);

    // d/dx sum(A x) = Aᵀ 1 (column sums of A).
    let a = Array::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let x = Array::new([3, 1], vec![0.5, -1.0, 2.0]).unwrap();
    let g = vjp(
        |t, xv| {
            let av = t.input(a.clone());
            let y = t.matmul(av, xv)?;
            Ok(t.sum(y))
        },
        &x,
        &Array::scalar(1.0),
    )
    .unwrap();
    assert_eq!(g.data(), &[5.0, 7.0, 9.0]);

    let v = Array::new([3, 1], vec![1.0, 0.0, -1.0]).unwrap();
    let lin = |t: &mut Tape<'_>, xv: Var| {
        let av = t.input(a.clone());
        t.matmul(av, xv)
    };
    assert_eq!(jvp(lin, &x, &v).unwrap().data(), &[-2.0, -2.0]);
    let u = Array::new([2, 1], vec![1.0, -1.0]).unwrap();
    assert_eq!(vjp(lin, &x, &u).unwrap().data(), &[-3.0, -3.0, -3.0]);
    assert!(jvp(lin, &x, &Array::zeros([3, 1])).unwrap().data().iter().all(|&z| z == 0.0));
    assert!(vjp(lin, &x, &Array::zeros([2, 1])).unwrap().data().iter().all(|&z| z == 0.0));
    assert!(jvp(lin, &x, &Array::zeros([1, 3])).is_err());
}
