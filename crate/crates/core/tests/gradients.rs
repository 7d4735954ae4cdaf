use pcam::data::Image;
use pcam::prompt::{prompted_forward_vars, ForwardOptions, PromptSet, PromptVariant};
use pcam::tensor::{finite_difference_gradient, max_relative_error};
use pcam::tensor::{AttentionSpec, Tape, Tensor, Var};
use pcam::vit::{patch_matrix, vit_forward, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares the tape gradient of `build(x)` for one input against central differences.
fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = build(&mut tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().to_vec();
    let numeric = finite_difference_gradient(
        |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            let l = build(&mut t, v);
            t.value(l).data()[0]
        },
        &x,
        H,
    );
    max_relative_error(&analytic, numeric.data(), FLOOR)
}

/// Random weighted sum so every output entry contributes a distinct gradient.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_gradient_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&[4, 3], &mut rng);
    let a = random(&[2, 4], &mut rng);
    let bb = b.clone();
    assert!(
        check(a.clone(), move |t, v| {
            let c = t.constant(bb.clone());
            let y = t.matmul(v, c).unwrap();
            weighted(t, y, 9)
        }) < TOL
    );
    assert!(
        check(b, move |t, v| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, v).unwrap();
            weighted(t, y, 9)
        }) < TOL
    );
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    assert!(
        check(x.clone(), |t, v| {
            let y = t.gelu(v);
            weighted(t, y, 3)
        }) < TOL
    );
    assert!(
        check(x.clone(), |t, v| {
            let y = t.softmax(v);
            weighted(t, y, 4)
        }) < TOL
    );
    assert!(
        check(x.clone(), |t, v| {
            let y = t.mul(v, v).unwrap();
            let y = t.scale(y, -0.7);
            weighted(t, y, 5)
        }) < TOL
    );
    let bias = random(&[5], &mut rng);
    assert!(
        check(bias, move |t, v| {
            let c = t.constant(x.clone());
            let y = t.add_bias(c, v).unwrap();
            let y = t.gelu(y);
            weighted(t, y, 6)
        }) < TOL
    );
}

#[test]
fn layer_norm_gradients_for_input_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 6], &mut rng);
    let g = random(&[6], &mut rng);
    let b = random(&[6], &mut rng);
    let (g1, b1) = (g.clone(), b.clone());
    assert!(
        check(x.clone(), move |t, v| {
            let (g, b) = (t.constant(g1.clone()), t.constant(b1.clone()));
            let y = t.layer_norm(v, g, b, 1e-5).unwrap();
            weighted(t, y, 7)
        }) < TOL
    );
    let (x1, b1) = (x.clone(), b.clone());
    assert!(
        check(g.clone(), move |t, v| {
            let (x, b) = (t.constant(x1.clone()), t.constant(b1.clone()));
            let y = t.layer_norm(x, v, b, 1e-5).unwrap();
            weighted(t, y, 7)
        }) < TOL
    );
    assert!(
        check(b, move |t, v| {
            let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
            let y = t.layer_norm(x, g, v, 1e-5).unwrap();
            weighted(t, y, 7)
        }) < TOL
    );
}

#[test]
fn row_plumbing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 2], &mut rng);
    let other = random(&[2, 2], &mut rng);
    assert!(
        check(x, move |t, v| {
            let o = t.constant(other.clone());
            let y = t.concat_rows(&[o, v]).unwrap();
            let y = t.gather_rows(y, vec![4, 0, 2, 2, 3]).unwrap();
            let y = t.reshape(y, &[10]).unwrap();
            weighted(t, y, 8)
        }) < TOL
    );
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 4], &mut rng);
    assert!(check(x, |t, v| t.cross_entropy(v, &[0, 3, 1]).unwrap()) < TOL);
}

fn attention_case(spec: AttentionSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = spec.batch * spec.seq;
    let q = random(&[rows, 4], &mut rng);
    let k = random(&[rows, 4], &mut rng);
    let v = random(&[rows, 4], &mut rng);
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let all = [q.clone(), k.clone(), v.clone()];
        let s = spec.clone();
        let x = all[which].clone();
        worst = worst.max(check(x, move |t, var| {
            let mut ins: Vec<Var> = all.iter().map(|a| t.constant(a.clone())).collect();
            ins[which] = var;
            let y = t.attention(ins[0], ins[1], ins[2], s.clone()).unwrap();
            weighted(t, y, 11)
        }));
    }
    worst
}

#[test]
fn attention_gradients_plain_isolated_and_overridden() {
    let plain = AttentionSpec::new(2, 5, 2);
    assert!(attention_case(plain.clone(), 20) < TOL);
    let mut iso = plain.clone();
    iso.prompts = 2;
    iso.isolate_prompts = true;
    assert!(attention_case(iso.clone(), 21) < TOL);
    let mut blurred = iso;
    blurred.overrides = pcam::prompt::blur_overrides(1, 0, 2, 2, &[1]);
    assert!(attention_case(blurred, 22) < TOL);
}

fn tiny_config() -> ViTConfig {
    ViTConfig {
        layers: 2,
        embed_dim: 8,
        heads: 2,
        mlp_dim: 8,
        patch_size: 2,
        image_size: 4,
        channels: 3,
        classes: 3,
        ln_eps: 1e-5,
    }
}

fn tiny_images(n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut img = Image::filled(4, 4, [0, 0, 0]);
            for p in img.data.iter_mut() {
                *p = rng.random();
            }
            img
        })
        .collect()
}

/// Perturbs every backbone weight in turn; loss from the plain ViT head.
#[test]
fn full_backbone_gradient() {
    let cfg = tiny_config();
    let model = ViTModel::init(&cfg, 3).unwrap();
    // Larger weights than the default init keep every path numerically visible.
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for t in model.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.5..0.5));
    }
    let images = tiny_images(2, 31);
    let refs: Vec<&Image> = images.iter().collect();
    let pm = patch_matrix(&refs, &cfg).unwrap();
    let labels = [2, 0];
    let loss_of = |m: &ViTModel, grads: bool| {
        let mut tape = Tape::new();
        let mv = m.attach(&mut tape, grads);
        let p = tape.constant(pm.clone());
        let tr = vit_forward(&mut tape, &mv, p, 2).unwrap();
        let l = tape.cross_entropy(tr.logits, &labels).unwrap();
        (tape, mv, l)
    };
    let (tape, mv, l) = loss_of(&model, true);
    let grads = tape.backward(l).unwrap();
    let vars = mv.all();
    let count = model.tensors_mut().len();
    for i in 0..count {
        let analytic = grads.get(vars[i]).unwrap().to_vec();
        let x = model.tensors_mut()[i].clone();
        let numeric = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                *m.tensors_mut()[i] = p.clone();
                let (t, _, l) = loss_of(&m, false);
                t.value(l).data()[0]
            },
            &x,
            H,
        );
        let err = max_relative_error(&analytic, numeric.data(), FLOOR);
        assert!(err < TOL, "tensor {i}: {err}");
    }
}

#[test]
fn prompted_forward_gradient_for_every_variant() {
    let cfg = tiny_config();
    let model = {
        let mut m = ViTModel::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for t in m.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-0.5..0.5));
        }
        m.freeze();
        m
    };
    let images = tiny_images(2, 41);
    let refs: Vec<&Image> = images.iter().collect();
    let pm = patch_matrix(&refs, &cfg).unwrap();
    for variant in [PromptVariant::Shallow, PromptVariant::Deep] {
        for (isolation, hide_cls) in [(false, false), (true, false), (true, true)] {
            let options = ForwardOptions {
                prompt_isolation: isolation,
                hide_cls,
            };
            let mut prompts = PromptSet::init(&cfg, 3, variant, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for t in prompts.tensors_mut() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-0.5..0.5));
            }
            let loss_of = |p: &PromptSet, grads: bool| {
                let mut tape = Tape::new();
                let mv = model.attach(&mut tape, false);
                let pv = p.attach(&mut tape, grads);
                let x = tape.constant(pm.clone());
                let tr = prompted_forward_vars(&mut tape, &mv, &pv, variant, options, x, 2, vec![])
                    .unwrap();
                let l = tape.cross_entropy(tr.scores, &[1, 2]).unwrap();
                (tape, pv, l)
            };
            let (tape, pv, l) = loss_of(&prompts, true);
            let grads = tape.backward(l).unwrap();
            let vars = pv.all();
            for i in 0..vars.len() {
                let analytic = grads.get(vars[i]).unwrap().to_vec();
                let x = prompts.tensors_mut()[i].clone();
                let numeric = finite_difference_gradient(
                    |p| {
                        let mut ps = prompts.clone();
                        *ps.tensors_mut()[i] = p.clone();
                        let (t, _, l) = loss_of(&ps, false);
                        t.value(l).data()[0]
                    },
                    &x,
                    H,
                );
                let err = max_relative_error(&analytic, numeric.data(), FLOOR);
                assert!(
                    err < TOL,
                    "{variant} isolation={isolation} hide_cls={hide_cls} tensor {i}: {err}"
                );
            }
        }
    }
}
