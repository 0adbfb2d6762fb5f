use rand::Rng as _;

use super::*;
use crate::geometry::{embed_snapshot, CameraPose, EmbeddedPair, SnapshotGeometry};
use crate::image::Image;
use crate::nn::{Mode, Network, OneHotLabel, Pass, Tensor4};
use crate::seed;

fn random(shape: (usize, usize, usize, usize), s: u64) -> Tensor4<f64> {
    let mut r = seed::rng(s);
    Tensor4::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
}

fn label(i: usize, k: usize) -> OneHotLabel {
    OneHotLabel::new(i, k).unwrap()
}

fn small_gen(mode: Conditioning, s: u64) -> Generator<f64> {
    Generator::new(GeneratorSpec::new(4, 3, 3, mode), s).unwrap()
}

#[test]
fn full_scale_innermost_is_two_by_one() {
    let spec = GeneratorSpec::new(64, 8, 24, Conditioning::ClassConditioned);
    let shapes = spec.encoder_shapes(256, 512).unwrap();
    assert_eq!(shapes.len(), 8);
    assert_eq!(shapes[7], (512, 1, 2));
    assert!(spec.encoder_shapes(250, 512).is_err());
}

#[test]
fn independent_generator_has_fewer_parameters() {
    let c = Generator::<f32>::new(GeneratorSpec::new(16, 5, 3, Conditioning::ClassConditioned), 0).unwrap();
    let i = Generator::<f32>::new(GeneratorSpec::new(16, 5, 3, Conditioning::ClassIndependent), 0).unwrap();
    assert!(i.param_count() < c.param_count());
    assert_eq!(c.param_names().len(), c.params().len());
}

#[test]
fn generator_validates_spec_and_input() {
    assert!(Generator::<f32>::new(GeneratorSpec::new(4, 2, 3, Conditioning::ClassIndependent), 0).is_err());
    let g = small_gen(Conditioning::ClassConditioned, 0);
    let mut pass = Pass::new(Mode::Train, 0).with_labels(vec![label(0, 3)]);
    assert!(g.forward(&Tensor4::zeros(1, 3, 12, 16), &mut pass).is_err());
    let mut pass = Pass::new(Mode::Train, 0);
    assert!(g.forward(&Tensor4::zeros(1, 3, 8, 16), &mut pass).is_err());
    let mut pass = Pass::new(Mode::Train, 0).with_labels(vec![label(0, 4)]);
    assert!(g.forward(&Tensor4::zeros(1, 3, 8, 16), &mut pass).is_err());
}

#[test]
fn generator_output_shape_and_range() {
    let g = small_gen(Conditioning::ClassConditioned, 1);
    let x = random((2, 3, 16, 32), 2);
    let mut pass = Pass::new(Mode::Train, 3).with_labels(vec![label(0, 3), label(2, 3)]);
    let (y, _) = g.forward(&x, &mut pass).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

/// Whole-network finite-difference check through the skip connections.
fn network_grad_check(g: &Generator<f64>, x: &Tensor4<f64>, labels: &[OneHotLabel]) -> f64 {
    let pass = || Pass::new(Mode::Train, 7).with_labels(labels.to_vec());
    let proj = random(x.shape(), 99);
    let loss = |g: &Generator<f64>, x: &Tensor4<f64>| -> f64 {
        let (y, _) = g.forward(x, &mut pass()).unwrap();
        y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let (_, saved) = g.forward(x, &mut pass()).unwrap();
    let (dx, grads) = g.backward(&saved, &proj).unwrap();
    let eps = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for i in (0..x.len()).step_by(7) {
        let o = xp.data()[i];
        xp.data_mut()[i] = o + eps;
        let lp = loss(g, &xp);
        xp.data_mut()[i] = o - eps;
        let lm = loss(g, &xp);
        xp.data_mut()[i] = o;
        worst = worst.max(rel(dx.data()[i], (lp - lm) / (2.0 * eps)));
    }
    let mut probe = g.clone();
    for p in 0..g.params().len() {
        for i in (0..g.params()[p].len()).step_by(5) {
            let o = g.params()[p].data[i];
            probe.params_mut()[p].data[i] = o + eps;
            let lp = loss(&probe, x);
            probe.params_mut()[p].data[i] = o - eps;
            let lm = loss(&probe, x);
            probe.params_mut()[p].data[i] = o;
            worst = worst.max(rel(grads[p][i], (lp - lm) / (2.0 * eps)));
        }
    }
    worst
}

#[test]
fn generator_backward_matches_finite_differences() {
    // one-pixel ReLU kinks make a dense check flaky on large nets; a tiny
    // U-Net with smooth random input keeps every pre-activation well away
    let g = small_gen(Conditioning::ClassConditioned, 5);
    let x = random((2, 3, 8, 8), 6);
    let err = network_grad_check(&g, &x, &[label(1, 3), label(0, 3)]);
    assert!(err < 1e-4, "rel error {err}");
}

#[test]
fn discriminator_shapes_and_range() {
    let spec = DiscriminatorSpec::new(4, 3, Conditioning::ClassConditioned);
    let d = Discriminator::<f64>::new(spec.clone(), 0).unwrap();
    // first conv reads condition ‖ candidate
    assert_eq!(d.params()[0].shape, vec![4, 6, 4, 4]);
    let x = random((1, 3, 34, 76), 1);
    let mut pass = Pass::new(Mode::Train, 0).with_labels(vec![label(1, 3)]);
    let (s, _) = d.forward(&x, &x, &mut pass).unwrap();
    assert_eq!((s.h(), s.w()), spec.patch_shape(34, 76).unwrap());
    assert!(s.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    let y = random((1, 3, 34, 38), 1);
    assert!(d.forward(&x, &y, &mut pass).is_err());
}

#[test]
fn patch_map_width_follows_shape_arithmetic() {
    // k4 s2 p1 halves, k4 s1 p1 subtracts one
    let oracle = |w: usize| (((w / 2) / 2) / 2) - 2;
    let spec = DiscriminatorSpec::new(2, 3, Conditioning::ClassIndependent);
    for w in [64, 128, 256, 512] {
        assert_eq!(spec.patch_shape(w / 2, w).unwrap().1, oracle(w));
    }
    let d = Discriminator::<f32>::new(spec, 0).unwrap();
    let narrow = d.forward(&Tensor4::zeros(1, 3, 32, 64), &Tensor4::zeros(1, 3, 32, 64), &mut Pass::new(Mode::Eval, 0));
    let wide = d.forward(&Tensor4::zeros(1, 3, 32, 128), &Tensor4::zeros(1, 3, 32, 128), &mut Pass::new(Mode::Eval, 0));
    assert_eq!(narrow.unwrap().0.w(), oracle(64));
    assert_eq!(wide.unwrap().0.w(), oracle(128));
}

#[test]
fn pad_full_scale_copies() {
    let img = Tensor4::<f32>::from_fn((1, 3, 256, 512), |_, c, y, x| ((c * 7919 + y * 512 + x) % 1000) as f32);
    let spec = PadSpec::for_width(512);
    assert_eq!(spec.side_width, 50);
    let p = continuity_pad(&img, spec, 3).unwrap();
    assert_eq!(p.shape(), (1, 3, 258, 612));
    for c in 0..3 {
        for y in 0..256 {
            for k in 0..50 {
                assert_eq!(p.at(0, c, y + 1, k).to_bits(), img.at(0, c, y, 462 + k).to_bits());
                assert_eq!(p.at(0, c, y + 1, 562 + k).to_bits(), img.at(0, c, y, k).to_bits());
            }
            for x in 0..512 {
                assert_eq!(p.at(0, c, y + 1, 50 + x).to_bits(), img.at(0, c, y, x).to_bits());
            }
        }
    }
}

#[test]
fn pad_rows_are_constant_and_sourced_from_edge_rows() {
    let img = random((3, 2, 8, 16), 4);
    let p = continuity_pad(&img, PadSpec::for_width(16), 11).unwrap();
    let cols = sample_pad_columns(3, 16, 11);
    for n in 0..3 {
        for c in 0..2 {
            for x in 0..p.w() {
                assert_eq!(p.at(n, c, 0, x), img.at(n, c, 0, cols[n].top));
                assert_eq!(p.at(n, c, 9, x), img.at(n, c, 7, cols[n].bottom));
            }
        }
    }
    let constant = Tensor4::filled(1, 3, 8, 16, 0.3f64);
    assert!(continuity_pad(&constant, PadSpec::for_width(16), 0).unwrap().data().iter().all(|v| *v == 0.3));
}

#[test]
fn pad_rejects_wide_sides() {
    let img = Tensor4::<f32>::zeros(1, 1, 4, 8);
    assert!(continuity_pad(&img, PadSpec { side_width: 4, enabled: true }, 0).is_err());
    assert_eq!(continuity_pad(&img, PadSpec::disabled(), 0).unwrap(), img);
}

#[test]
fn pad_backward_is_adjoint() {
    let x = random((2, 3, 6, 12), 1);
    let cols = sample_pad_columns(2, 12, 5);
    let px = continuity_pad_with(&x, 3, &cols).unwrap();
    let g = random(px.shape(), 2);
    let lhs: f64 = px.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
    let back = continuity_pad_backward(&g, 3, &cols).unwrap();
    let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

fn scores(v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec((1, 1, 1, v.len()), v.to_vec()).unwrap()
}

#[test]
fn discriminator_loss_values() {
    let half = scores(&[0.5; 6]);
    assert!((loss_d(&half, &half).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    let perfect = loss_d(&scores(&[1.0 - 1e-9; 4]), &scores(&[1e-9; 4])).unwrap();
    assert!(perfect < 1e-8);
    let a = loss_d(&scores(&[0.2, 0.7, 0.9]), &scores(&[0.1, 0.4, 0.3])).unwrap();
    let b = loss_d(&scores(&[0.9, 0.2, 0.7]), &scores(&[0.3, 0.1, 0.4])).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(loss_d(&scores(&[0.9]), &scores(&[0.1])).unwrap() < loss_d(&half, &half).unwrap());
    assert!(loss_d(&scores(&[1.5]), &half).is_err());
    assert!(loss_d(&scores(&[f64::NAN]), &half).is_err());
}

#[test]
fn generator_loss_values() {
    let t = Tensor4::filled(1, 3, 2, 4, 1.0f64);
    let g = Tensor4::zeros(1, 3, 2, 4);
    let s = scores(&[0.5; 3]);
    let l = loss_g(&s, &t, &t, LossWeights::default()).unwrap();
    assert_eq!(l.l1, 0.0);
    let l = loss_g(&s, &t, &g, LossWeights { lambda: 0.0 }).unwrap();
    assert_eq!(l.total, l.gan);
    let l = loss_g(&s, &t, &g, LossWeights { lambda: 100.0 }).unwrap();
    assert!((l.total - (2f64.ln() + 100.0)).abs() < 1e-12);
    assert!(loss_g(&s, &t, &Tensor4::zeros(1, 3, 2, 3), LossWeights::default()).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let sr = scores(&[0.3, 0.8, 0.6]);
    let sf = scores(&[0.2, 0.45, 0.7]);
    let (gr, gf) = loss_d_backward(&sr, &sf);
    let eps = 1e-6;
    for i in 0..3 {
        let mut p = sr.clone();
        p.data_mut()[i] += eps;
        let mut m = sr.clone();
        m.data_mut()[i] -= eps;
        let fd = (loss_d(&p, &sf).unwrap() - loss_d(&m, &sf).unwrap()) / (2.0 * eps);
        assert!((fd - gr.data()[i]).abs() < 1e-6);
        let mut p = sf.clone();
        p.data_mut()[i] += eps;
        let mut m = sf.clone();
        m.data_mut()[i] -= eps;
        let fd = (loss_d(&sr, &p).unwrap() - loss_d(&sr, &m).unwrap()) / (2.0 * eps);
        assert!((fd - gf.data()[i]).abs() < 1e-6);
    }
    let t = random((1, 2, 2, 2), 1);
    let g = random((1, 2, 2, 2), 2);
    let w = LossWeights { lambda: 3.0 };
    let (gs, gg) = loss_g_backward(&sf, &t, &g, w);
    for i in 0..g.len() {
        let mut p = g.clone();
        p.data_mut()[i] += eps;
        let mut m = g.clone();
        m.data_mut()[i] -= eps;
        let fd = (loss_g(&sf, &t, &p, w).unwrap().total - loss_g(&sf, &t, &m, w).unwrap().total) / (2.0 * eps);
        assert!((fd - gg.data()[i]).abs() < 1e-6);
    }
    for i in 0..3 {
        let mut p = sf.clone();
        p.data_mut()[i] += eps;
        let mut m = sf.clone();
        m.data_mut()[i] -= eps;
        let fd = (loss_g(&p, &t, &g, w).unwrap().total - loss_g(&m, &t, &g, w).unwrap().total) / (2.0 * eps);
        assert!((fd - gs.data()[i]).abs() < 1e-6);
    }
}

fn embedded(width: usize) -> EmbeddedPair {
    let geom = SnapshotGeometry::scaled_for_width(width);
    let snap = Image::from_fn(geom.w1, geom.h1, 3, |x, y, px| {
        px[0] = x as f32 / geom.w1 as f32;
        px[1] = y as f32 / geom.h1 as f32;
        px[2] = 0.3;
    });
    embed_snapshot(&snap, CameraPose::front(), geom, width, width / 2).unwrap()
}

#[test]
fn generate_is_seeded_and_sized() {
    let g = Generator::<f32>::new(GeneratorSpec::new(8, 4, 3, Conditioning::ClassConditioned), 1).unwrap();
    let e = embedded(64);
    let a = generate(&g, &e, label(1, 3), 5, GenerateOptions::default()).unwrap();
    let b = generate(&g, &e, label(1, 3), 5, GenerateOptions::default()).unwrap();
    let c = generate(&g, &e, label(1, 3), 6, GenerateOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!((a.width(), a.height()), (64, 32));
    assert!(generate(&g, &e, label(1, 4), 5, GenerateOptions::default()).is_err());
    let pasted = generate(&g, &e, label(1, 3), 5, GenerateOptions { paste_snapshot: true }).unwrap();
    for y in 0..32 {
        for x in 0..64 {
            if e.mask.get(x, y) {
                assert_eq!(pasted.pixel(x, y), e.canvas.pixel(x, y));
            }
        }
    }
}

#[test]
fn zeroed_output_layer_gives_mid_gray() {
    let mut g = Generator::<f32>::new(GeneratorSpec::new(8, 4, 3, Conditioning::ClassConditioned), 1).unwrap();
    let (_, up) = g.stages_mut();
    for p in up[0].layers[1].params_mut().into_iter().take(2) {
        p.data.fill(0.0);
    }
    let out = generate(&g, &embedded(64), label(0, 3), 0, GenerateOptions::default()).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.5));
}

#[test]
fn changing_the_label_changes_the_output() {
    let e = embedded(64);
    for s in 0..5 {
        let g = Generator::<f32>::new(GeneratorSpec::new(8, 4, 3, Conditioning::ClassConditioned), s).unwrap();
        let a = generate(&g, &e, label(0, 3), 1, GenerateOptions::default()).unwrap();
        let b = generate(&g, &e, label(2, 3), 1, GenerateOptions::default()).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.0, "init {s}");
    }
}
