use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seanet_core::autograd::{Array, Tape};
use seanet_core::config::{AttentionMode, MmVariant, NetworkConfig, Variant};
use seanet_core::decoder::{total_loss, Decoder};
use seanet_core::encoders::{AudioEncoder, EmbeddingSeq, VisualInput};
use seanet_core::fusion::{aggregate, segment, Fusion};
use seanet_core::metrics::si_sdr;
use seanet_core::multimodal::FusionAttention;
use seanet_core::nn::{Linear, NORM_EPS};
use seanet_core::params::{Ctx, Init, ParamStore};
use seanet_core::psnl::{AttentionBranch, ChunkAxis, PsnlBlock, ReverseAttention};
use seanet_core::signal::Waveform;
use seanet_core::build_network;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn arr(shape: &[usize], v: &[f64]) -> Array {
    ArrayD::from_shape_vec(IxDyn(shape), v.to_vec()).unwrap()
}

fn zero_linear(store: &mut ParamStore, l: Linear) {
    let w = store.value(l.weight).clone();
    store.set(l.weight, Array::zeros(w.raw_dim()));
    if let Some(b) = l.bias {
        let bv = store.value(b).clone();
        store.set(b, Array::zeros(bv.raw_dim()));
    }
}

fn negate_linear(store: &mut ParamStore, l: Linear) {
    let w = -store.value(l.weight);
    store.set(l.weight, w);
    if let Some(b) = l.bias {
        let bv = -store.value(b);
        store.set(b, bv);
    }
}

fn copy_linear(store: &mut ParamStore, from: Linear, to: Linear) {
    let w = store.value(from.weight).clone();
    store.set(to.weight, w);
    if let (Some(a), Some(b)) = (from.bias, to.bias) {
        let bv = store.value(a).clone();
        store.set(b, bv);
    }
}

fn branch(mode: AttentionMode, dim: usize, seed: u64) -> (ParamStore, AttentionBranch) {
    let mut store = ParamStore::new();
    let b = AttentionBranch::new(&mut Init::new(&mut store, seed), "b", dim, mode);
    (store, b)
}

#[test]
fn tied_cross_query_makes_full_attention_equal_self_attention() {
    let (mut store, b) = branch(AttentionMode::Full, 4, 1);
    copy_linear(&mut store, b.query.unwrap(), b.cross_query.unwrap());
    negate_linear(&mut store, b.cross_query.unwrap());
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let f = ctx.constant(random(&[2, 5, 4], 3));
    let (_, sc) = b.forward(&ctx, f, f);
    let (plus, minus) = (sc.plus.unwrap().value(), sc.cross.unwrap().value());
    assert_eq!(*minus, *plus);
    assert_eq!(*sc.combined.value(), *plus);
}

#[test]
fn gamma_with_zero_cross_query_equals_self_attention() {
    let (mut store, g) = branch(AttentionMode::Gamma, 4, 2);
    zero_linear(&mut store, g.cross_query.unwrap());
    let (mut self_store, s) = branch(AttentionMode::SelfOnly, 4, 2);
    for (from, to) in [(g.query.unwrap(), s.query.unwrap()), (g.key, s.key), (g.value, s.value)] {
        let w = store.value(from.weight).clone();
        self_store.set(to.weight, w);
        let b = store.value(from.bias.unwrap()).clone();
        self_store.set(to.bias.unwrap(), b);
    }
    let (fs, fn_) = (random(&[3, 6, 4], 4), random(&[3, 6, 4], 5));
    let t1 = Tape::new();
    let c1 = Ctx::new(&t1, &store, false, false);
    let (_, gamma) = g.forward(&c1, c1.constant(fs.clone()), c1.constant(fn_));
    let t2 = Tape::new();
    let c2 = Ctx::new(&t2, &self_store, false, false);
    let f = c2.constant(fs);
    let (_, plus) = s.forward(&c2, f, f);
    assert_eq!(*gamma.combined.value(), *plus.plus.unwrap().value());
}

#[test]
fn zero_logits_average_the_values_uniformly() {
    let (mut store, b) = branch(AttentionMode::Full, 2, 3);
    for l in [b.query.unwrap(), b.key, b.cross_query.unwrap()] {
        zero_linear(&mut store, l);
    }
    // V = F·Wᵀ + c with W = [[1, 0], [1, 1]], c = [0, 1].
    store.set(b.value.weight, arr(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
    store.set(b.value.bias.unwrap(), arr(&[2], &[0.0, 1.0]));
    let f = arr(&[1, 3, 2], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let x = ctx.constant(f.clone());
    let (out, sc) = b.forward(&ctx, x, ctx.constant(random(&[1, 3, 2], 9)));
    assert!(sc.combined.value().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    // Rows of V: [1, 4], [3, 3], [0, 5]; their mean is [4/3, 4].
    let expected = arr(&[1, 3, 2], &[1.0 + 4.0 / 3.0, 6.0, 3.0 + 4.0 / 3.0, 3.0, 4.0 / 3.0, 8.0]);
    let got = out.value();
    for (a, e) in got.iter().zip(expected.iter()) {
        assert!((a - e).abs() < 1e-12, "{got:?}");
    }
}

#[test]
fn zero_values_make_attention_the_identity() {
    for mode in [AttentionMode::Full, AttentionMode::Gamma, AttentionMode::CrossReverse] {
        let mut store = ParamStore::new();
        let att = ReverseAttention::new(&mut Init::new(&mut store, 8), "a", 4, mode, Some(mode), ChunkAxis::Inter);
        zero_linear(&mut store, att.speech.value);
        zero_linear(&mut store, att.noise.unwrap().value);
        let (fs, fn_) = (random(&[2, 7, 4], 1), random(&[2, 7, 4], 2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let (s, n, _) = att.forward(&ctx, ctx.constant(fs.clone()), Some(ctx.constant(fn_.clone()))).unwrap();
        assert_eq!(*s.value(), fs);
        assert_eq!(*n.unwrap().value(), fn_);
    }
}

#[test]
fn negating_the_cross_query_of_full_reproduces_both_positive() {
    let (store, full) = branch(AttentionMode::Full, 4, 6);
    let (mut s4_store, s4) = branch(AttentionMode::BothPositive, 4, 6);
    negate_linear(&mut s4_store, s4.cross_query.unwrap());
    let (fs, fn_) = (random(&[2, 5, 4], 1), random(&[2, 5, 4], 2));
    let run = |store: &ParamStore, b: &AttentionBranch| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, false);
        let (_, sc) = b.forward(&ctx, ctx.constant(fs.clone()), ctx.constant(fn_.clone()));
        (sc.plus.unwrap().value().as_ref().clone(), sc.cross.unwrap().value().as_ref().clone())
    };
    let (p_full, m_full) = run(&store, &full);
    let (p_s4, m_s4) = run(&s4_store, &s4);
    assert_eq!(p_full, p_s4);
    assert_eq!(m_full, m_s4);
}

#[test]
fn attention_rejects_mismatched_streams() {
    let mut store = ParamStore::new();
    let att = ReverseAttention::new(&mut Init::new(&mut store, 0), "a", 4, AttentionMode::Full, Some(AttentionMode::Full), ChunkAxis::Intra);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let r = att.forward(&ctx, ctx.constant(random(&[2, 5, 4], 1)), Some(ctx.constant(random(&[2, 6, 4], 2))));
    assert!(r.is_err());
}

#[test]
fn noise_input_reaches_speech_output_only_with_interaction() {
    let cfg = NetworkConfig { feature_dim: 4, recurrent_hidden: 3, ..NetworkConfig::tiny() };
    for (variant, live) in [(Variant::Seanet, true), (Variant::AvDprnn, false)] {
        let cfg = cfg.clone().with_variant(variant);
        let mut store = ParamStore::new();
        let block = PsnlBlock::new(&mut Init::new(&mut store, 1), "b", &cfg, false);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true, true);
        let (ms, mn) = (tape.leaf(random(&[1, 3, 4, 4], 1)), tape.leaf(random(&[1, 3, 4, 4], 2)));
        let out = block.forward(&ctx, ms, Some(mn), None).unwrap();
        let g = tape.backward(out.speech.mul(out.speech).sum());
        let reached = g.get(mn).is_some_and(|a| a.iter().any(|&v| v != 0.0));
        assert_eq!(reached, live, "{variant}");
    }
}

#[test]
fn forced_identical_pre_units_agree_and_default_ones_differ() {
    let cfg = NetworkConfig { blocks: 1, ..NetworkConfig::tiny() };
    let mut net = build_network(&cfg, 3).unwrap();
    let mix = random(&[1, 480], 1);
    let l = net.frames_for(480).unwrap();
    let vis = VisualInput::Embedding(random(&[1, l, cfg.visual_dim], 2));
    let first = |net: &seanet_core::Network| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, false);
        let pass = net.forward(&ctx, &mix, &vis).unwrap();
        (pass.speech_features[0].value().as_ref().clone(), pass.noise_features[0].value().as_ref().clone())
    };
    let (s, n) = first(&net);
    assert_eq!(s.shape(), n.shape());
    assert_ne!(s, n);
    let names: Vec<String> = net.store.iter().map(|(_, e)| e.name.clone()).filter(|n| n.starts_with("pre_extractor.")).collect();
    for name in names {
        let from = net.store.id(&name).unwrap();
        let to = net.store.id(&name.replacen("pre_extractor", "pre_suppressor", 1)).unwrap();
        let v = net.store.value(from).clone();
        net.store.set(to, v);
    }
    let (s, n) = first(&net);
    assert_eq!(s, n);
}

#[test]
fn sub_architectures_have_fewer_parameters() {
    let count = |v| build_network(&NetworkConfig::tiny().with_variant(v), 0).unwrap().trainable_parameters();
    let full = count(Variant::Seanet);
    assert!(count(Variant::Alpha) < full);
    assert!(count(Variant::AvDprnn) < full);
    let pairs = [Variant::S1, Variant::S2, Variant::S3, Variant::S4, Variant::BetaVariant, Variant::Gamma];
    for v in pairs {
        assert!(count(v) <= full, "{v}");
    }
}

#[test]
fn every_variant_runs_half_a_second() {
    for v in Variant::ALL {
        let cfg = NetworkConfig::tiny().with_variant(v);
        let net = build_network(&cfg, 0).unwrap();
        let samples = 8000;
        let l = net.frames_for(samples).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, false);
        let pass = net.forward(&ctx, &random(&[1, samples], 4), &VisualInput::Embedding(random(&[1, l, cfg.visual_dim], 5))).unwrap();
        let est = pass.outputs.estimate().unwrap().value();
        assert_eq!(est.shape(), &[1, samples]);
        assert!(est.iter().all(|v| v.is_finite()), "{v}");
    }
}

#[test]
fn inconsistent_multimodal_combination_is_rejected() {
    for v in Variant::ALL {
        for mm in [MmVariant::F, MmVariant::P, MmVariant::A] {
            let cfg = NetworkConfig { mm_variant: mm, ..NetworkConfig::tiny().with_variant(v) };
            assert_eq!(build_network(&cfg, 0).is_ok(), v == Variant::Seanet, "{v} {mm:?}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = NetworkConfig::tiny();
    let run = || {
        let net = build_network(&cfg, 9).unwrap();
        let l = net.frames_for(640).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, false);
        let pass = net.forward(&ctx, &random(&[2, 640], 1), &VisualInput::Embedding(random(&[2, l, cfg.visual_dim], 2))).unwrap();
        pass.outputs.estimate().unwrap().value().as_ref().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn speech_path_update_changes_noise_decoding() {
    let cfg = NetworkConfig::tiny();
    let mut net = build_network(&cfg, 2).unwrap();
    assert_eq!(net.store.iter().filter(|(_, e)| e.name.starts_with("decoder")).count(), 1);
    let (mix, target) = (random(&[1, 640], 1), random(&[1, 640], 2));
    let l = net.frames_for(640).unwrap();
    let vis = VisualInput::Embedding(random(&[1, l, cfg.visual_dim], 3));
    let noise_out = |net: &seanet_core::Network| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, false);
        let pass = net.forward(&ctx, &mix, &vis).unwrap();
        pass.outputs.noise[0].value().as_ref().clone()
    };
    let before = noise_out(&net);
    let grad = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, true);
        let pass = net.forward(&ctx, &mix, &vis).unwrap();
        let loss = seanet_core::decoder::si_sdr_loss(pass.outputs.estimate().unwrap(), &target).unwrap();
        let mut g = tape.backward(loss);
        ctx.param_grads(&mut g).into_iter().find(|(id, _)| *id == net.decoder.weight).unwrap().1
    };
    let updated = net.store.value(net.decoder.weight) - &(grad * 0.5);
    net.store.set(net.decoder.weight, updated);
    let after = noise_out(&net);
    assert!((&after - &before).iter().any(|d| d.abs() > 1e-9));
}

#[test]
fn decoder_hand_computed_eight_sample_toy() {
    let cfg = NetworkConfig { encoder_window: 4, encoder_hop: 2, audio_dim: 2, ..NetworkConfig::tiny() };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init::new(&mut store, 0), &cfg);
    store.set(dec.weight, arr(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let x = ctx.constant(arr(&[1, 3, 2], &[1.0, 2.0, 3.0, 0.0, -1.0, 1.0]));
    let ones = ctx.constant(ArrayD::from_elem(IxDyn(&[1, 3, 2]), 1.0));
    let y = dec.mask_and_decode(&ctx, ones, x, 8).unwrap().value();
    // Frames [1, 2, 3, -1], [3, 0, 3, 3], [-1, 1, 0, -2] at hop 2, each
    // sample divided by the number of frames covering it.
    assert_eq!(y.as_slice().unwrap(), &[1.0, 2.0, 3.0, -0.5, 1.0, 2.0, 0.0, -2.0]);
}

#[test]
fn fusion_hand_computed_three_frame_toy() {
    let cfg = NetworkConfig { audio_dim: 2, visual_dim: 1, feature_dim: 2, ..NetworkConfig::tiny() };
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut Init::new(&mut store, 0), &cfg);
    let id = |s: &ParamStore, n: &str| s.id(n).unwrap();
    store.set(id(&store, "fusion.audio_proj.weight"), arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    store.set(id(&store, "fusion.joint_proj.weight"), arr(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, -1.0]));
    store.set(id(&store, "fusion.joint_proj.bias"), arr(&[2], &[0.5, 0.0]));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let a = ctx.constant(arr(&[1, 3, 2], &[1.0, 3.0, 2.0, 2.0, 3.0, 1.0]));
    let v = ctx.constant(arr(&[1, 3, 1], &[0.5, -1.0, 2.0]));
    let y = fusion.forward(&ctx, a, v).unwrap().value();
    // Mean 2 and variance 2/3 over all six audio values.
    let z = 1.0 / (2.0f64 / 3.0 + NORM_EPS).sqrt();
    let xhat = [[-z, z], [0.0, 0.0], [z, -z]];
    let vis = [0.5, -1.0, 2.0];
    for f in 0..3 {
        assert!((y[[0, f, 0]] - (xhat[f][0] + vis[f] + 0.5)).abs() < 1e-12);
        assert!((y[[0, f, 1]] - (xhat[f][1] - vis[f])).abs() < 1e-12);
    }
}

#[test]
fn fusion_attention_with_opposite_queries_doubles_one_branch() {
    let cfg = NetworkConfig { feature_dim: 2, visual_dim: 2, mm_variant: MmVariant::F, ..NetworkConfig::tiny() };
    let mut store = ParamStore::new();
    let fa = FusionAttention::new(&mut Init::new(&mut store, 4), &cfg);
    let m = fa.attention;
    copy_linear(&mut store, m.query_s, m.query_n);
    negate_linear(&mut store, m.query_n);
    copy_linear(&mut store, m.key_s, m.key_n);
    copy_linear(&mut store, m.value_s, m.value_n);
    let f = arr(&[1, 3, 2], &[0.2, -0.4, 1.0, 0.3, -0.7, 0.5]);
    let v = arr(&[1, 3, 2], &[0.1, 0.9, -0.6, 0.2, 0.4, -0.3]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let y = fa.forward(&ctx, ctx.constant(f.clone()), ctx.constant(v.clone())).unwrap().value();

    let lin = |l: Linear, x: &Array| {
        let (w, b) = (store.value(l.weight), store.value(l.bias.unwrap()));
        ArrayD::from_shape_fn(IxDyn(&[3, 2]), |i| b[[i[1]]] + (0..2).map(|k| w[[i[1], k]] * x[[0, i[0], k]]).sum::<f64>())
    };
    let (q, k, val) = (lin(m.query_s, &v), lin(m.key_s, &f), lin(m.value_s, &f));
    for t in 0..3 {
        let logits: Vec<f64> = (0..3).map(|u| (q[[t, 0]] * k[[u, 0]] + q[[t, 1]] * k[[u, 1]]) / 2f64.sqrt()).collect();
        let mx = logits.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
        let sum: f64 = e.iter().sum();
        for d in 0..2 {
            let attended: f64 = (0..3).map(|u| e[u] / sum * val[[u, d]]).sum();
            assert!((y[[0, t, d]] - (2.0 * f[[0, t, d]] + 2.0 * attended)).abs() < 1e-12);
        }
    }
}

#[test]
fn audio_encoder_zero_input_and_short_input() {
    let cfg = NetworkConfig::tiny();
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut Init::new(&mut store, 0), &cfg);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let e = enc.encode(&ctx, &Waveform::zeros(32000, 16000).unwrap()).unwrap();
    assert_eq!(e.frames(), 1999);
    assert!(e.data.iter().all(|&v| v == 0.0));
    let err = enc.encode(&ctx, &Waveform::zeros(31, 16000).unwrap()).unwrap_err();
    assert!(err.to_string().contains("32"), "{err}");
}

#[test]
fn beta_zero_total_matches_hand_summed_loss() {
    let tape = Tape::new();
    let (s, n) = (random(&[1, 64], 1), random(&[1, 64], 2));
    let outs = seanet_core::decoder::BlockOutputs {
        speech_masks: vec![],
        noise_masks: vec![],
        speech: (0..2).map(|i| tape.leaf(random(&[1, 64], 10 + i))).collect(),
        noise: (0..2).map(|i| tape.leaf(random(&[1, 64], 20 + i))).collect(),
    };
    let w = |a: &Array| Waveform::new(a.iter().copied().collect(), 16000).unwrap();
    let l = |v: seanet_core::autograd::Var<'_>, r: &Array| -si_sdr(&w(&v.value()), &w(r)).unwrap();
    let hand = l(outs.speech[1], &s) + 0.1 * (l(outs.speech[0], &s) + l(outs.noise[0], &n) + l(outs.noise[1], &n));
    let got = total_loss(&outs, &s, &n, 0.1, true).unwrap().total.item();
    assert!((got - hand).abs() < 1e-9, "{got} vs {hand}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segmentation_round_trip_and_chunk_count(l in 1usize..400, half in 1usize..60, seed in 0u64..1000) {
        let k = 2 * half;
        let e = EmbeddingSeq { data: random(&[l, 3], seed).into_dimensionality().unwrap(), hop: 16 };
        let c = segment(&e, k).unwrap();
        let expected_p = l.saturating_sub(k).div_ceil(half) + 1;
        prop_assert_eq!(c.chunks(), expected_p);
        prop_assert_eq!(c.data.shape(), &[expected_p, k, 3]);
        prop_assert_eq!(c.pad_len(), (expected_p - 1) * half + k - l);
        let back = aggregate(&c, 16);
        prop_assert_eq!(back.data.dim(), (l, 3));
        let err = (&back.data - &e.data).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prop_assert!(err <= 1e-12);
        for p in 0..expected_p {
            for j in 0..k {
                let frame = p * half + j;
                let want = if frame < l { e.data[[frame, 1]] } else { 0.0 };
                prop_assert_eq!(c.data[[p, j, 1]], want);
            }
        }
    }

    #[test]
    fn segmentation_is_linear(l in 1usize..200, half in 1usize..30, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let k = 2 * half;
        let e: ndarray::Array2<f64> = random(&[l, 2], 1).into_dimensionality().unwrap();
        let f: ndarray::Array2<f64> = random(&[l, 2], 2).into_dimensionality().unwrap();
        let seq = |d: ndarray::Array2<f64>| EmbeddingSeq { data: d, hop: 16 };
        let lhs = segment(&seq(&e * a + &f * b), k).unwrap().data;
        let rhs = segment(&seq(e), k).unwrap().data * a + segment(&seq(f), k).unwrap().data * b;
        prop_assert!((&lhs - &rhs).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn audio_encoder_shape_law(t in 32usize..3000, seed in 0u64..100) {
        let cfg = NetworkConfig::tiny();
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut Init::new(&mut store, seed), &cfg);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, false);
        let w = Waveform::new(random(&[t], seed).into_iter().collect(), 16000).unwrap();
        let e = enc.encode(&ctx, &w).unwrap();
        prop_assert_eq!(e.frames(), (t - 32) / 16 + 1);
        prop_assert!(e.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decoded_length_matches_input(t in 32usize..1200) {
        let cfg = NetworkConfig { blocks: 1, ..NetworkConfig::tiny() };
        let net = build_network(&cfg, 0).unwrap();
        let l = net.frames_for(t).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, false, false);
        let pass = net.forward(&ctx, &random(&[1, t], 1), &VisualInput::Embedding(random(&[1, l, cfg.visual_dim], 2))).unwrap();
        for w in pass.outputs.speech.iter().chain(&pass.outputs.noise) {
            prop_assert_eq!(w.shape(), vec![1, t]);
        }
    }
}
