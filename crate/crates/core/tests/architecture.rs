mod common;

use std::path::Path;

use common::*;
use fccgan::arch::{describe, fc_schedule, INIT_STD};
use fccgan::{
    build_discriminator, build_generator, init_parameters, Activation, ArchitectureConfig, BnMode,
    DatasetKind, Error, FeatureShape, LayerSpec, ModelSpec, Objective, Tape, Tensor, Variant,
};
use proptest::prelude::*;
use rand::Rng;

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn cfg(dataset: DatasetKind, variant: Variant) -> ArchitectureConfig {
    ArchitectureConfig::new(dataset, variant)
}

fn deep(variant: Variant) -> ArchitectureConfig {
    let mut c = cfg(DatasetKind::Cifar10, variant);
    c.conv_depth_g = 7;
    c.conv_depth_d = 7;
    c
}

#[test]
fn describe_matches_golden_tables() {
    for dataset in DatasetKind::ALL {
        // SVHN shares the CIFAR-10 tables.
        let file_ds = if dataset == DatasetKind::Svhn {
            DatasetKind::Cifar10
        } else {
            dataset
        };
        for variant in Variant::ALL {
            let text = describe(&cfg(dataset, variant)).unwrap();
            assert_eq!(
                text,
                golden(&format!("{file_ds}_{variant}.txt")),
                "{dataset} {variant}"
            );
        }
    }
    assert_eq!(
        describe(&deep(Variant::Cnn)).unwrap(),
        golden("cifar10_cnn_conv7.txt")
    );
    assert_eq!(
        describe(&deep(Variant::FccganS)).unwrap(),
        golden("cifar10_fccgan-s_conv7.txt")
    );
}

fn flatten_size(spec: &ModelSpec) -> Option<usize> {
    spec.layers()
        .iter()
        .position(|l| *l == LayerSpec::Flatten)
        .map(|i| spec.shapes()[i].len())
}

fn map(h: usize, c: usize) -> FeatureShape {
    FeatureShape::Map { c, h, w: h }
}

#[test]
fn tabulated_shapes() {
    // (dataset, reshape target of the FCC generator, flatten size, image)
    let rows = [
        (DatasetKind::Mnist, map(3, 128), 1152, map(28, 1)),
        (DatasetKind::Cifar10, map(4, 256), 4096, map(32, 3)),
        (DatasetKind::Svhn, map(4, 256), 4096, map(32, 3)),
        (DatasetKind::Celeba, map(4, 512), 8192, map(64, 3)),
    ];
    for (dataset, reshape, flat, image) in rows {
        for variant in Variant::ALL {
            let g = build_generator(&cfg(dataset, variant)).unwrap();
            let d = build_discriminator(&cfg(dataset, variant)).unwrap();
            assert_eq!(g.input(), FeatureShape::Flat(100));
            assert_eq!(g.output(), image, "{dataset} {variant}");
            assert_eq!(d.input(), image);
            assert_eq!(d.output().len(), 1);
            if variant.is_fcc() {
                let r = g
                    .layers()
                    .iter()
                    .position(|l| matches!(l, LayerSpec::Reshape { .. }));
                assert_eq!(g.shapes()[r.unwrap()], reshape);
                assert_eq!(flatten_size(&d), Some(flat), "{dataset} {variant}");
            } else {
                assert_eq!(flatten_size(&d), None);
                let last_conv = d
                    .layers()
                    .iter()
                    .rposition(|l| matches!(l, LayerSpec::Conv { .. }));
                assert_eq!(
                    d.shapes()[last_conv.unwrap() - 3],
                    reshape,
                    "{dataset} cnn trunk"
                );
            }
        }
    }
    let g = build_generator(&deep(Variant::FccganS)).unwrap();
    assert_eq!(g.output(), map(32, 3));
    assert_eq!(
        flatten_size(&build_discriminator(&deep(Variant::FccganS)).unwrap()),
        Some(4096)
    );
}

/// Per-stage spatial sizes after each downsampling block.
fn stage_sizes(spec: &ModelSpec) -> Vec<FeatureShape> {
    spec.layers()
        .iter()
        .zip(spec.shapes())
        .filter(|(l, _)| matches!(l, LayerSpec::Act(Activation::LeakyRelu(_))))
        .map(|(_, s)| *s)
        .filter(|s| matches!(s, FeatureShape::Map { .. }))
        .collect()
}

#[test]
fn pooling_keeps_downsampling_ratio() {
    for dataset in DatasetKind::ALL {
        let s = build_discriminator(&cfg(dataset, Variant::FccganS)).unwrap();
        let p = build_discriminator(&cfg(dataset, Variant::FccganP)).unwrap();
        assert_eq!(stage_sizes(&s), stage_sizes(&p));
        assert!(
            p.count_layers(|l| matches!(l, LayerSpec::Pool { size: 2 })) == stage_sizes(&p).len()
        );
    }
}

fn lines(spec: &ModelSpec) -> Vec<String> {
    spec.lines().into_iter().map(|(t, _)| t).collect()
}

#[test]
fn variants_differ_only_where_tabulated() {
    for dataset in DatasetKind::ALL {
        let s = cfg(dataset, Variant::FccganS);
        let p = cfg(dataset, Variant::FccganP);
        assert_eq!(build_generator(&s).unwrap(), build_generator(&p).unwrap());
        let (ds, dp) = (
            lines(&build_discriminator(&s).unwrap()),
            lines(&build_discriminator(&p).unwrap()),
        );
        assert_eq!(ds.len(), dp.len());
        for (a, b) in ds.iter().zip(&dp) {
            if a != b {
                assert!(
                    a.starts_with("CONV(") && a.contains(",2,p=") && !a.contains("POOL"),
                    "{a}"
                );
                assert!(b.contains(",1,p=") && b.contains(" POOL(2) "), "{b}");
            }
        }

        // CNN and FCC share the convolutional trunk; they part ways only at
        // the noise-side (generator) and decision-side (discriminator) layers.
        let c = cfg(dataset, Variant::Cnn);
        let (gc, gs) = (
            lines(&build_generator(&c).unwrap()),
            lines(&build_generator(&s).unwrap()),
        );
        let upsampling = |l: &Vec<String>| {
            l.iter()
                .filter(|x| x.contains(",2,p="))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(upsampling(&gc), upsampling(&gs));
        assert!(gc[0].starts_with("RESHAPE(1,1,"));
        assert!(gs[0].starts_with("FC("));
        let dc = lines(&build_discriminator(&c).unwrap());
        let trunk = dc.len() - 1;
        assert_eq!(dc[..trunk], ds[..trunk]);
        assert!(dc[trunk].starts_with("CONV(1,"));
        assert_eq!(ds[trunk], "FLATTEN");
    }
}

#[test]
fn bn_toggles_remove_exactly_the_batch_norms() {
    for dataset in DatasetKind::ALL {
        for variant in Variant::ALL {
            let base = cfg(dataset, variant);
            for (bn_g, bn_d) in [(false, true), (true, false), (false, false)] {
                let mut c = base;
                c.bn_generator = bn_g;
                c.bn_discriminator = bn_d;
                for (on, build) in [
                    (
                        bn_g,
                        build_generator as fn(&ArchitectureConfig) -> fccgan::Result<ModelSpec>,
                    ),
                    (bn_d, build_discriminator),
                ] {
                    let full = build(&base).unwrap();
                    let toggled = build(&c).unwrap();
                    if on {
                        assert_eq!(full, toggled);
                    } else {
                        let stripped: Vec<_> = full
                            .layers()
                            .iter()
                            .filter(|l| **l != LayerSpec::BatchNorm)
                            .copied()
                            .collect();
                        assert_eq!(toggled.layers(), &stripped[..]);
                        assert_eq!(toggled.count_layers(|l| *l == LayerSpec::BatchNorm), 0);
                    }
                }
            }
        }
    }
}

#[test]
fn output_activations_follow_objective() {
    for variant in Variant::ALL {
        let standard = cfg(DatasetKind::Cifar10, variant);
        let wgan = standard.with_objective(Objective::Wgan);
        for c in [standard, wgan] {
            let g = build_generator(&c).unwrap();
            assert_eq!(g.layers().last(), Some(&LayerSpec::Act(Activation::Tanh)));
            let d = build_discriminator(&c).unwrap();
            let sigmoid = d.layers().last() == Some(&LayerSpec::Act(Activation::Sigmoid));
            assert_eq!(sigmoid, c.objective == Objective::Standard);
            assert_eq!(
                d.count_layers(|l| *l == LayerSpec::Act(Activation::Sigmoid)),
                sigmoid as usize
            );
        }
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut c = cfg(DatasetKind::Mnist, Variant::FccganS);
    c.fc_layers_d = 9;
    let msg = build_discriminator(&c).unwrap_err().to_string();
    assert!(msg.contains("1..5"), "{msg}");
    let mut c = cfg(DatasetKind::Celeba, Variant::Cnn);
    c.conv_depth_d = 7;
    assert!(matches!(build_discriminator(&c), Err(Error::Config(_))));
    c.conv_depth_d = 5;
    assert!(build_discriminator(&c).is_err());
}

#[test]
fn fc_depth_sweep_builds_for_every_depth() {
    for dataset in DatasetKind::ALL {
        for depth in 1..=5 {
            let mut c = cfg(dataset, Variant::FccganP);
            c.fc_layers_g = depth;
            c.fc_layers_d = depth;
            let g = build_generator(&c).unwrap();
            let d = build_discriminator(&c).unwrap();
            assert_eq!(g.count_layers(|l| matches!(l, LayerSpec::Fc { .. })), depth);
            assert_eq!(
                d.count_layers(|l| matches!(l, LayerSpec::Fc { .. })),
                depth + 1
            );
            // Single-network sweeps keep the other network convolutional.
            c.variant_d = Some(Variant::Cnn);
            let d = build_discriminator(&c).unwrap();
            assert_eq!(d.count_layers(|l| matches!(l, LayerSpec::Fc { .. })), 0);
        }
    }
    let mut c = cfg(DatasetKind::Cifar10, Variant::FccganS);
    c.fc_layers_g = 1;
    let g = build_generator(&c).unwrap();
    assert_eq!(g.layers()[0], LayerSpec::fc(4096));
}

proptest! {
    #[test]
    fn fc_schedules_hit_both_ends(depth in 2usize..=5, flat in 1024usize..10000) {
        let g = fc_schedule([64, 512, flat], depth, flat);
        prop_assert_eq!(g.len(), depth);
        prop_assert_eq!(g[0], 64);
        prop_assert_eq!(*g.last().unwrap(), flat);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        let d = fc_schedule([512, 64, 16], depth, 512);
        prop_assert!(d.windows(2).all(|w| w[0] > w[1]));
    }
}

#[test]
fn init_is_deterministic_and_matches_the_law() {
    let spec = build_generator(&cfg(DatasetKind::Cifar10, Variant::FccganS)).unwrap();
    let a = init_parameters::<f32>(&spec, "g", 7);
    let b = init_parameters::<f32>(&spec, "g", 7);
    let c = init_parameters::<f32>(&spec, "g", 8);
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());

    let mut weights = Vec::new();
    for (name, t) in a.param_names().iter().zip(a.params()) {
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0));
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        } else {
            assert!(name.ends_with(".weight"), "{name}");
            weights.extend(t.data().iter().map(|&v| v as f64));
        }
    }
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt(), "mean {mean}");
    // Sample variance of n Gaussian draws has relative std sqrt(2/(n-1)).
    let rel = (var / (INIT_STD * INIT_STD) - 1.0).abs();
    assert!(rel < 3.0 * (2.0 / (n - 1.0)).sqrt(), "variance {var}");
}

#[test]
fn forward_produces_declared_shapes() {
    for dataset in [DatasetKind::Mnist, DatasetKind::Cifar10] {
        for variant in Variant::ALL {
            let c = cfg(dataset, variant);
            let g_spec = build_generator(&c).unwrap();
            let d_spec = build_discriminator(&c).unwrap();
            let mut g = init_parameters::<f32>(&g_spec, "g", 1);
            let mut d = init_parameters::<f32>(&d_spec, "d", 2);
            let z = Tensor::full([2, 100], 0.5f32);
            let img = g.infer(z).unwrap();
            assert_eq!(img.shape(), g_spec.output().batched(2).as_slice());
            assert!(img.data().iter().all(|v| v.abs() <= 1.0));
            let p = d.infer(img).unwrap();
            assert_eq!(p.len(), 2);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn mnist_discriminator_end_to_end_gradient() {
    let spec = build_discriminator(&cfg(DatasetKind::Mnist, Variant::FccganS)).unwrap();
    let mut net = init_parameters::<f64>(&spec, "d", 11);
    let mut r = rng(12);
    let x = random_tensor(&mut r, &[4, 1, 28, 28]);
    let weights = random_tensor(&mut r, &[4, 1]);

    let loss_at = |net: &mut fccgan::Network<f64>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let params = net.push_params(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = *net
            .forward(&mut tape, &params, xv, BnMode::TrainFrozen)
            .unwrap()
            .last()
            .unwrap();
        tape.value(out).dot(&weights)
    };

    let mut tape = Tape::<f64>::new();
    let params = net.push_params(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = *net
        .forward(&mut tape, &params, xv, BnMode::TrainFrozen)
        .unwrap()
        .last()
        .unwrap();
    let wv = tape.constant(weights.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let grads = net.gradients(&tape, &params);

    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..5 {
        // Weight tensors only: each probe reaches the loss through the whole stack.
        let (pi, ei) = loop {
            let pi = r.random_range(0..net.params().len());
            if net.param_names()[pi].ends_with(".weight") {
                break (pi, r.random_range(0..net.params()[pi].len()));
            }
        };
        let orig = net.params()[pi].data()[ei];
        net.params_mut()[pi].data_mut()[ei] = orig + h;
        let up = loss_at(&mut net);
        net.params_mut()[pi].data_mut()[ei] = orig - h;
        let down = loss_at(&mut net);
        net.params_mut()[pi].data_mut()[ei] = orig;
        analytic.push(grads[pi].data()[ei]);
        numeric.push((up - down) / (2.0 * h));
    }
    let err = relative_error(&analytic, &numeric);
    assert!(
        err < 1e-3,
        "relative error {err}: {analytic:?} vs {numeric:?}"
    );
}

#[test]
fn named_tensors_round_trip() {
    let spec = build_discriminator(&cfg(DatasetKind::Mnist, Variant::FccganP)).unwrap();
    let a = init_parameters::<f32>(&spec, "d", 3);
    let mut b = init_parameters::<f32>(&spec, "d", 4);
    let named = a.named_tensors();
    assert!(named.iter().any(|(n, _)| n.ends_with(".running_var")));
    b.load_named(|n| named.iter().find(|(k, _)| k == n).map(|(_, t)| t.clone()))
        .unwrap();
    assert_eq!(a, b);
    assert!(b.load_named(|_| None).is_err());
}

#[test]
fn generator_gradient_flows_through_the_discriminator() {
    use fccgan::objectives::g_loss;
    use fccgan::{GeneratorLoss, Objective};
    for variant in [Variant::Cnn, Variant::FccganP] {
        let c = cfg(DatasetKind::Mnist, variant);
        let mut g = init_parameters::<f64>(&build_generator(&c).unwrap(), "g", 21);
        let mut d = init_parameters::<f64>(&build_discriminator(&c).unwrap(), "d", 22);
        let mut r = rng(23);
        let z = random_tensor(&mut r, &[4, 100]);

        let mut loss_of =
            |g: &mut fccgan::Network<f64>, track: bool| -> (f64, Vec<fccgan::Tensor<f64>>) {
                let mut tape = Tape::<f64>::new();
                let gp = g.push_params(&mut tape, track);
                let dp = d.push_params(&mut tape, false);
                let zv = tape.constant(z.clone());
                let fake = *g
                    .forward(&mut tape, &gp, zv, BnMode::TrainFrozen)
                    .unwrap()
                    .last()
                    .unwrap();
                let out = *d
                    .forward(&mut tape, &dp, fake, BnMode::TrainFrozen)
                    .unwrap()
                    .last()
                    .unwrap();
                let loss = g_loss(
                    &mut tape,
                    Objective::Standard,
                    GeneratorLoss::NonSaturating,
                    out,
                )
                .unwrap();
                let value = tape.value(loss).data()[0];
                if !track {
                    return (value, Vec::new());
                }
                tape.backward(loss).unwrap();
                (value, g.gradients(&tape, &gp))
            };

        let (_, grads) = loss_of(&mut g, true);
        // Small step: the ReLU stacks put kinks within 1e-5 of some weights.
        let h = 1e-6;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for _ in 0..6 {
            let (pi, ei) = loop {
                let pi = r.random_range(0..g.params().len());
                if g.param_names()[pi].ends_with(".weight") {
                    break (pi, r.random_range(0..g.params()[pi].len()));
                }
            };
            let orig = g.params()[pi].data()[ei];
            g.params_mut()[pi].data_mut()[ei] = orig + h;
            let up = loss_of(&mut g, false).0;
            g.params_mut()[pi].data_mut()[ei] = orig - h;
            let down = loss_of(&mut g, false).0;
            g.params_mut()[pi].data_mut()[ei] = orig;
            analytic.push(grads[pi].data()[ei]);
            numeric.push((up - down) / (2.0 * h));
        }
        let err = relative_error(&analytic, &numeric);
        assert!(
            err < 1e-3,
            "{variant}: relative error {err}: {analytic:?} vs {numeric:?}"
        );
    }
}
