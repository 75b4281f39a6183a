use hba_core::model::{ModelError, Mode, Network, NetworkConfig, Variant};
use hba_core::params::ParamKind;
use hba_core::tensor::{BnMode, PoolMode, ResampleMode};
use hba_core::{Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        levels: 2,
        base_channels: 4,
        attention_grid: 4,
        attention_channels: 8,
        attention_heads: 2,
        input_size: 32,
        ..NetworkConfig::toy(variant)
    }
}

fn image(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(Shape::new(n, 3, size, size), (0..n * 3 * size * size).map(|_| rng.random::<f32>()).collect())
        .unwrap()
}

fn forward(net: &Network, x: &Tensor, mode: Mode) -> Tensor {
    let mut tape = Tape::new();
    let bound = net.store().bind(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let out = net.forward(&mut tape, &bound, xv, mode).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn build_is_deterministic() {
    let cfg = small(Variant::HbaAll);
    let a: Network = Network::build(&cfg, 7).unwrap();
    let b: Network = Network::build(&cfg, 7).unwrap();
    assert_eq!(a.store(), b.store());
    let c: Network = Network::build(&cfg, 8).unwrap();
    assert_ne!(a.store(), c.store());
}

#[test]
fn unet_allocates_no_attention() {
    let net: Network = Network::build(&NetworkConfig::toy(Variant::Unet), 0).unwrap();
    assert_eq!(net.attention_blocks(), 0);
    assert!(net.store().iter().all(|(_, p)| !p.name.starts_with("att")));
    let all: Network = Network::build(&NetworkConfig::toy(Variant::HbaAll), 0).unwrap();
    assert_eq!(all.attention_blocks(), 4);
}

#[test]
fn ladder_counts_strictly_increase_at_full_scale() {
    let counts: Vec<usize> =
        Variant::LADDER.iter().map(|&v| NetworkConfig::full_scale(v).param_count().unwrap()).collect();
    for w in counts.windows(2) {
        assert!(w[0] < w[1], "{counts:?}");
    }
    // Each attention step costs under 5% of the model it extends.
    for w in counts[1..].windows(2) {
        assert!(((w[1] - w[0]) as f64) < 0.05 * w[0] as f64, "{counts:?}");
    }
}

#[test]
fn recipe_count_matches_allocated_count() {
    for v in Variant::LADDER {
        let cfg = NetworkConfig::toy(v);
        let net: Network = Network::build(&cfg, 3).unwrap();
        assert_eq!(net.param_count(), cfg.param_count().unwrap(), "{v}");
        assert_eq!(cfg.param_count().unwrap(), cfg.param_count().unwrap());
    }
}

#[test]
fn toy_unet_count_matches_closed_form() {
    // conv3×3 without bias, then batch-norm scale and shift.
    let block = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
    let encoder = block(3, 8) + block(8, 16) + block(16, 32) + block(32, 64);
    let decoder = block(64 + 32, 32) + block(32 + 16, 16) + block(16 + 8 + 3, 8);
    let head = 8 * 2 + 2;
    assert_eq!(NetworkConfig::toy(Variant::Unet).param_count().unwrap(), encoder + decoder + head);
}

#[test]
fn channel_mlp_is_the_only_difference_between_hba1_and_selfatt() {
    let cfg = NetworkConfig::toy(Variant::Hba1);
    let (c, hidden) = (cfg.attention_channels, cfg.attention_channels / 8);
    let mlp = c * hidden + hidden + hidden * c + c;
    let diff = cfg.param_count().unwrap() - cfg.with_variant(Variant::SelfAtt).param_count().unwrap();
    assert_eq!(diff, mlp);
}

#[test]
fn running_statistics_are_not_counted() {
    let net: Network = Network::build(&small(Variant::HbaAll), 0).unwrap();
    let buffers: usize =
        net.store().iter().filter(|(_, p)| p.kind == ParamKind::Buffer).map(|(_, p)| p.tensor.numel()).sum();
    let total: usize = net.store().iter().map(|(_, p)| p.tensor.numel()).sum();
    assert!(buffers > 0);
    assert_eq!(net.param_count() + buffers, total);
}

#[test]
fn output_shape_matches_input() {
    for v in Variant::LADDER {
        let net: Network = Network::build(&small(v), 1).unwrap();
        for n in [1, 3] {
            let y = forward(&net, &image(n, 32, 2), Mode::Train);
            assert_eq!(y.shape(), Shape::new(n, 2, 32, 32), "{v}");
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net: Network = Network::build(&small(Variant::Unet), 1).unwrap();
    let mut tape = Tape::new();
    let bound = net.store().bind(&mut tape, false);
    let x = tape.leaf(image(1, 64, 0));
    assert!(matches!(net.forward(&mut tape, &bound, x, Mode::Eval), Err(ModelError::Input { .. })));
}

#[test]
fn zeroed_values_reduce_attention_variants_to_the_residual_unet() {
    for v in [Variant::SelfAtt, Variant::Hba1, Variant::HbaAll] {
        let cfg = small(v);
        let mut att: Network = Network::build(&cfg, 11).unwrap();
        let mut base: Network = Network::build(&cfg.with_variant(Variant::UnetResnet), 11).unwrap();
        // Shared tensors are initialized from per-name streams, so they already agree.
        assert_eq!(base.copy_shared_from(&att), base.store().len());
        let ids: Vec<_> = att.store().iter().filter(|(_, p)| p.name.ends_with(".hba.wv")).map(|(id, _)| id).collect();
        assert!(!ids.is_empty());
        for id in ids {
            att.store_mut().tensor_mut(id).data_mut().fill(0.0);
        }
        let x = image(2, 32, 5);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(forward(&att, &x, mode).data(), forward(&base, &x, mode).data(), "{v} {mode:?}");
        }
    }
}

/// A plain U-Net written directly against the tape, looked up by tensor name.
fn plain_unet(net: &Network, x: &Tensor) -> Tensor {
    let cfg = net.config();
    let store = net.store();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let p = |name: &str| bound[store.find(name).unwrap_or_else(|| panic!("{name}"))];
    let conv_bn_relu = |tape: &mut Tape, x: Var, conv: &str, bn: &str| {
        let y = tape.conv2d(x, p(&format!("{conv}.weight")), 1, 1).unwrap();
        let y = tape
            .batch_norm(y, p(&format!("{bn}.gamma")), p(&format!("{bn}.beta")), &BnMode::Batch, cfg.bn_eps as f32)
            .unwrap();
        tape.relu(y).unwrap()
    };
    let block = |tape: &mut Tape, x: Var, name: &str| {
        let h = conv_bn_relu(tape, x, &format!("{name}.conv1"), &format!("{name}.bn1"));
        conv_bn_relu(tape, h, &format!("{name}.conv2"), &format!("{name}.bn2"))
    };
    let input = tape.leaf(x.clone());
    let e0 = block(&mut tape, input, "enc0");
    let p1 = tape.pool2d(e0, PoolMode::Max, (2, 2), 2).unwrap();
    let e1 = block(&mut tape, p1, "enc1");
    let p2 = tape.pool2d(e1, PoolMode::Max, (2, 2), 2).unwrap();
    let e2 = block(&mut tape, p2, "enc2");
    let u1 = tape.resample(e2, (16, 16), ResampleMode::Bilinear).unwrap();
    let c1 = tape.concat(&[u1, e1], 1).unwrap();
    let d1 = block(&mut tape, c1, "dec1");
    let u0 = tape.resample(d1, (32, 32), ResampleMode::Bilinear).unwrap();
    let c0 = tape.concat(&[u0, e0, input], 1).unwrap();
    let d0 = block(&mut tape, c0, "dec0");
    let y = tape.conv2d(d0, p("head.weight"), 1, 0).unwrap();
    let y = tape.add(y, p("head.bias")).unwrap();
    tape.value(y).clone()
}

#[test]
fn unet_variant_is_a_plain_unet() {
    let net: Network = Network::build(&small(Variant::Unet), 4).unwrap();
    let x = image(2, 32, 6);
    assert_eq!(forward(&net, &x, Mode::Train).data(), plain_unet(&net, &x).data());
}

#[test]
fn running_stats_move_toward_batch_stats() {
    let mut net: Network = Network::build(&small(Variant::Hba1), 2).unwrap();
    let before = net.store().clone();
    let mut tape = Tape::new();
    let bound = net.store().bind(&mut tape, true);
    let x = tape.leaf(image(2, 32, 3));
    let out = net.forward(&mut tape, &bound, x, Mode::Train).unwrap();
    net.update_running_stats(&tape, &out);
    let id = net.store().find("enc0.bn1.running_mean").unwrap();
    let (old, new) = (before.tensor(id).data(), net.store().tensor(id).data());
    assert!(old.iter().zip(new).any(|(a, b)| a != b));
    // Learnable tensors are untouched.
    for ((_, a), (_, b)) in before.iter().zip(net.store().iter()) {
        if a.kind == ParamKind::Learnable {
            assert_eq!(a.tensor, b.tensor);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::HbaAll);
    let mut net: Network = Network::build(&cfg, 9).unwrap();
    // Non-trivial running statistics.
    let id = net.store().find("dec0.bn2.running_var").unwrap();
    net.store_mut().tensor_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + i as f32);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    net.save(&a).unwrap();
    let loaded: Network = Network::load(&a, &cfg).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let x = image(1, 32, 1);
    assert_eq!(forward(&net, &x, Mode::Eval).data(), forward(&loaded, &x, Mode::Eval).data());
    let any: Network = Network::load_any(&a).unwrap();
    assert_eq!(any.config(), &cfg);
}

#[test]
fn checkpoint_under_other_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::HbaAll);
    let path = dir.path().join("m.ckpt");
    Network::<f32>::build(&cfg, 0).unwrap().save(&path).unwrap();
    let other = NetworkConfig { attention_grid: 2, ..cfg };
    match Network::<f32>::load(&path, &other) {
        Err(ModelError::ConfigMismatch { detail }) => assert!(detail.contains("attention_grid"), "{detail}"),
        r => panic!("expected config mismatch, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::Unet);
    let path = dir.path().join("m.ckpt");
    Network::<f32>::build(&cfg, 0).unwrap().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Network::<f32>::load(&path, &cfg), Err(ModelError::Corrupt(_))));
}

#[test]
fn f64_cast_agrees_with_f32() {
    let net: Network = Network::build(&small(Variant::HbaAll), 5).unwrap();
    let wide = net.cast::<f64>();
    let x = image(2, 32, 8);
    let y32 = forward(&net, &x, Mode::Train);
    let mut tape = Tape::<f64>::new();
    let bound = wide.store().bind(&mut tape, false);
    let xv = tape.leaf(x.cast());
    let out = wide.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
    let y64 = tape.value(out.logits).cast::<f32>();
    assert!(y32.max_abs_diff(&y64) < 1e-3, "{}", y32.max_abs_diff(&y64));
}
