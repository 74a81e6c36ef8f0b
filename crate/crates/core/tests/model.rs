//! Network-level checks: scalar oracles for the reconstruction units and the
//! fusion module, finite-difference gradients, and the shape contract.

use marsnet_core::model::config::EncoderMode;
use marsnet_core::model::esbc::{BandConv, Bru, Sru};
use marsnet_core::model::net::ModalFusion;
use marsnet_core::model::params::ParamBuilder;
use marsnet_core::model::{ForwardCtx, ModalInputs, Modality, ModelConfig, ModelParams, ParamStore, Session};
use marsnet_core::tensor::{GateBackward, Tensor};
use marsnet_core::train::masked_loss_var;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in &mut store.params {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

/// Direct zero-padded grouped convolution of one image, `[c][y][x]` flattened per channel.
fn conv_ref(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, groups: usize) -> Tensor {
    let [_, cin, h, wd] = x.shape();
    let [cout, cpg, k, _] = w.shape();
    let opg = cout / groups;
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros([1, cout, h, wd]);
    for o in 0..cout {
        let g = o / opg;
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    assert!(c < cin);
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w.at(o, ci, ky, kx) * x.at(0, c, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                out.set(0, o, y, xx, acc);
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sru_fixture(threshold: f64) -> (Sru, ParamStore) {
    let mut b = ParamBuilder::new(1);
    let sru = Sru::build(&mut b, "sru", 4, 2, threshold);
    let mut store = b.store;
    store.params[sru.gn_gamma].value = Tensor::from_vec([1, 4, 1, 1], vec![1.0, -2.0, 0.5, 3.0]);
    store.params[sru.gn_beta].value = Tensor::from_vec([1, 4, 1, 1], vec![0.1, -0.3, 0.2, 0.0]);
    (sru, store)
}

fn run_sru(sru: &Sru, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut s = Session::new(store, ForwardCtx::eval());
    let v = s.input(x.clone());
    let y = sru.forward(&mut s, v);
    s.value(y).clone()
}

#[test]
fn sru_matches_step_by_step_oracle() {
    let (sru, store) = sru_fixture(0.5);
    let x = Tensor::from_vec(
        [1, 4, 2, 2],
        vec![0.3, -1.2, 2.0, 0.7, 1.5, 0.1, -0.4, -2.2, 0.9, 0.8, -0.6, 0.2, -1.0, 3.0, 0.5, 0.0],
    );
    let gamma = [1.0, -2.0, 0.5, 3.0];
    let beta = [0.1, -0.3, 0.2, 0.0];
    let total: f64 = gamma.iter().map(|g: &f64| g.abs()).sum();
    let mut w1 = [[0.0; 4]; 4];
    for group in 0..2 {
        let vals: Vec<f64> = (0..2).flat_map(|c| x.plane_slice(0, group * 2 + c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for c in group * 2..group * 2 + 2 {
            for p in 0..4 {
                let gn = (x.plane_slice(0, c)[p] - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
                let soft = sigmoid(gamma[c].abs() / total * gn);
                w1[c][p] = if soft > 0.5 { 1.0 } else { 0.0 };
            }
        }
    }
    let y = run_sru(&sru, &store, &x);
    for p in 0..4 {
        let xv = |c: usize| x.plane_slice(0, c)[p];
        let expect = [
            w1[0][p] * xv(0) + (1.0 - w1[2][p]) * xv(2),
            w1[1][p] * xv(1) + (1.0 - w1[3][p]) * xv(3),
            (1.0 - w1[0][p]) * xv(0) + w1[2][p] * xv(2),
            (1.0 - w1[1][p]) * xv(1) + w1[3][p] * xv(3),
        ];
        for c in 0..4 {
            assert!((y.plane_slice(0, c)[p] - expect[c]).abs() < 1e-9, "band {c} pixel {p}");
        }
    }
    // The fixture must exercise both gate outcomes.
    let ones: f64 = w1.iter().flatten().sum();
    assert!(ones > 0.0 && ones < 16.0);
}

#[test]
fn sru_all_informative_is_identity_and_zero_stays_zero() {
    let (sru, store) = sru_fixture(0.0);
    let x = random([1, 4, 2, 2], &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(run_sru(&sru, &store, &x), x);
    let (sru, store) = sru_fixture(0.5);
    let z = Tensor::zeros([1, 4, 2, 2]);
    assert!(run_sru(&sru, &store, &z).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn sru_conserves_the_total(seed in any::<u64>(), threshold in 0.2..0.8f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(seed);
        let sru = Sru::build(&mut b, "sru", 8, 4, threshold);
        let mut store = b.store;
        randomize(&mut store, &mut rng);
        let x = random([2, 8, 3, 3], &mut rng);
        let y = run_sru(&sru, &store, &x);
        prop_assert!((y.sum() - x.sum()).abs() <= 1e-6 * (1.0 + x.data().iter().map(|v| v.abs()).sum::<f64>()));
    }
}

#[test]
fn bru_matches_scalar_oracle() {
    let cfg = ModelConfig::default();
    let widths = cfg.bru_widths(4).unwrap();
    assert_eq!((widths.upper, widths.lower, widths.upper_squeezed, widths.lower_squeezed), (2, 2, 1, 1));
    let mut b = ParamBuilder::new(4);
    let bru = Bru::build(&mut b, "bru", widths, cfg.gwc_groups);
    let mut store = b.store;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    randomize(&mut store, &mut rng);
    let x = random([1, 4, 2, 2], &mut rng);

    let mut s = Session::new(&store, ForwardCtx::eval());
    let xv = s.input(x.clone());
    let (y, b1, b2) = bru.forward_with_weights(&mut s, xv);
    let (y, b1, b2) = (s.value(y).clone(), s.value(b1).clone(), s.value(b2).clone());

    let w = |c: &marsnet_core::model::layers::Conv2d| (store.value(c.weight).clone(), c.bias.map(|i| store.value(i).clone()), c.groups);
    let conv = |x: &Tensor, c: &marsnet_core::model::layers::Conv2d| {
        let (k, bias, g) = w(c);
        conv_ref(x, &k, bias.as_ref(), g)
    };
    let x_up = conv(&x.slice_channels(0, 2), &bru.squeeze_upper);
    let x_low = conv(&x.slice_channels(2, 2), &bru.squeeze_lower);
    let y1 = conv(&x_up, &bru.gwc).zip_map(&conv(&x_up, &bru.pwc_upper), |a, b| a + b);
    let y2 = Tensor::concat_channels(&[&conv(&x_low, &bru.pwc_lower), &x_low]);
    for c in 0..4 {
        let s1 = y1.plane_slice(0, c).iter().sum::<f64>() / 4.0;
        let s2 = y2.plane_slice(0, c).iter().sum::<f64>() / 4.0;
        let (e1, e2) = (s1.exp(), s2.exp());
        let (beta1, beta2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        assert!((b1.data()[c] - beta1).abs() < 1e-12);
        assert_eq!(b1.data()[c] + b2.data()[c], 1.0);
        for p in 0..4 {
            let expect = beta1 * y1.plane_slice(0, c)[p] + beta2 * y2.plane_slice(0, c)[p];
            assert!((y.plane_slice(0, c)[p] - expect).abs() < 1e-9);
        }
    }

    let mut s = Session::new(&store, ForwardCtx::eval());
    let zero = s.input(Tensor::zeros([1, 4, 2, 2]));
    let out = bru.forward(&mut s, zero);
    let gwc_bias = store.value(bru.gwc.bias.unwrap()).clone();
    // Only the group-wise bias survives a zero input; with it zeroed the output is zero.
    assert!(s.value(out).data().iter().any(|v| *v != 0.0) == gwc_bias.data().iter().any(|v| *v != 0.0));
}

#[test]
fn bru_zero_input_with_zero_bias_is_zero() {
    let cfg = ModelConfig::default();
    let mut b = ParamBuilder::new(6);
    let bru = Bru::build(&mut b, "bru", cfg.bru_widths(8).unwrap(), 2);
    let store = b.store;
    let mut s = Session::new(&store, ForwardCtx::eval());
    let zero = s.input(Tensor::zeros([1, 8, 3, 3]));
    let out = bru.forward(&mut s, zero);
    assert!(s.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn plain_band_conv_equals_direct_convolution() {
    let cfg = ModelConfig { esbc_enabled: false, ..Default::default() };
    let mut b = ParamBuilder::new(7);
    let conv = BandConv::build(&mut b, "blk", 5, 8, &cfg).unwrap();
    let mut store = b.store;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize(&mut store, &mut rng);
    let x = random([1, 5, 6, 6], &mut rng);
    let BandConv::Plain(c) = &conv else { panic!("expected a plain convolution") };
    let expect = conv_ref(&x, store.value(c.weight), c.bias.map(|i| store.value(i)), 1);
    let mut s = Session::new(&store, ForwardCtx::eval());
    let v = s.input(x);
    let y = conv.forward(&mut s, v);
    assert!(s.value(y).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn esbc_zero_input_zero_bias_is_zero() {
    let cfg = ModelConfig::default();
    let mut b = ParamBuilder::new(9);
    let conv = BandConv::build(&mut b, "blk", 17, 64, &cfg).unwrap();
    let store = b.store;
    let mut s = Session::new(&store, ForwardCtx::eval());
    let v = s.input(Tensor::zeros([1, 17, 4, 4]));
    let y = conv.forward(&mut s, v);
    assert_eq!(s.value(y).shape(), [1, 64, 4, 4]);
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn fusion_matches_scalar_oracle() {
    let mut b = ParamBuilder::new(10);
    let fusion = ModalFusion::build(&mut b, "fusion", 2, 3);
    let mut store = b.store;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize(&mut store, &mut rng);
    let f1 = random([1, 3, 8, 8], &mut rng);
    let f2 = random([1, 3, 8, 8], &mut rng);
    let mut s = Session::new(&store, ForwardCtx::eval());
    let (a, c) = (s.input(f1.clone()), s.input(f2.clone()));
    let y = fusion.forward(&mut s, &[a, c]).unwrap();
    let y = s.value(y).clone();

    let cat = Tensor::concat_channels(&[&f1, &f2]);
    let h = conv_ref(&cat, store.value(fusion.conv1.weight), Some(store.value(fusion.conv1.bias.unwrap())), 1);
    let r = h.map(|v| v.max(0.0));
    let logit = conv_ref(&r, store.value(fusion.conv2.weight), Some(store.value(fusion.conv2.bias.unwrap())), 1);
    for ch in 0..3 {
        for p in 0..64 {
            let weight = sigmoid(logit.plane_slice(0, 0)[p]);
            let rv = r.plane_slice(0, ch)[p];
            let got = y.plane_slice(0, ch)[p];
            assert!((got - weight * rv).abs() < 1e-12);
            assert!(got.abs() <= rv.abs());
        }
    }

    let mut s = Session::new(&store, ForwardCtx::eval());
    let a = s.input(f1.clone());
    let small = s.input(Tensor::zeros([1, 3, 4, 4]));
    assert!(fusion.forward(&mut s, &[a, small]).is_err());
    let mut b = ParamBuilder::new(12);
    let single = ModalFusion::build(&mut b, "one", 1, 3);
    let store = b.store;
    let mut s = Session::new(&store, ForwardCtx::eval());
    let a = s.input(f1);
    let y = single.forward(&mut s, &[a]).unwrap();
    assert_eq!(s.value(y).shape(), [1, 3, 8, 8]);
}

fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> ModalInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.modalities
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, random([n, cfg.bands_of(i), cfg.input_spatial, cfg.input_spatial], &mut rng)))
        .collect()
}

fn reduced(mode: EncoderMode, esbc: bool) -> ModelConfig {
    ModelConfig {
        stage_widths: vec![4, 8],
        input_spatial: 8,
        modalities: vec![Modality::Sentinel1, Modality::Palsar2],
        input_bands: vec![6, 4],
        encoder_mode: mode,
        esbc_enabled: esbc,
        gn_groups: 2,
        seed: 13,
        ..Default::default()
    }
}

/// Loss at fixed gate/dropout masks so that finite differences see a smooth function.
fn loss_at(params: &ModelParams, x: &ModalInputs, label: &Tensor, mask: &Tensor, masks: Option<Vec<Tensor>>) -> (f64, Vec<(usize, Tensor)>, Vec<Tensor>) {
    let ctx = ForwardCtx::train(3, GateBackward::FixedMask);
    let ctx = match masks {
        Some(m) => ctx.replaying(m),
        None => ctx.recording(),
    };
    let mut s = Session::new(&params.store, ctx);
    let out = params.forward(&mut s, x).unwrap();
    let loss = masked_loss_var(&mut s, out.prediction, label.clone(), mask.clone(), 1e-3).unwrap();
    let value = s.value(loss).data()[0];
    let g = s.graph.backward(loss);
    let grads = s.graph.bound_params().into_iter().filter_map(|(id, v)| g.get(v).map(|t| (id, t.clone()))).collect();
    (value, grads, s.ctx.take_masks())
}

fn gradient_check(mode: EncoderMode, esbc: bool) {
    let cfg = reduced(mode, esbc);
    let mut params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Move normalization affines and biases off their trivial initial values.
    for p in &mut params.store.params {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = inputs(&cfg, 2, 15);
    let label = random([2, 1, 8, 8], &mut rng).map(|v| 10.0 * v);
    let mask = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect());
    let (_, grads, masks) = loss_at(&params, &x, &label, &mask, None);
    let analytic: std::collections::HashMap<usize, Tensor> = grads.into_iter().collect();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in 0..params.store.params.len() {
        let n = params.store.params[id].value.len();
        for &i in &[0, n / 2, n - 1] {
            let orig = params.store.params[id].value.data()[i];
            params.store.params[id].value.data_mut()[i] = orig + step;
            let up = loss_at(&params, &x, &label, &mask, Some(masks.clone())).0;
            params.store.params[id].value.data_mut()[i] = orig - step;
            let down = loss_at(&params, &x, &label, &mask, Some(masks.clone())).0;
            params.store.params[id].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            // Relative error with an absolute floor for near-zero derivatives.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < 1e-4,
                "{}[{i}]: analytic {a} vs numeric {numeric} (rel {rel})",
                params.store.params[id].name
            );
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked > 100, "{checked}");
    eprintln!("{mode:?} esbc={esbc}: {checked} entries, worst relative error {worst:.2e}");
}

#[test]
fn gradients_match_finite_differences_separate() {
    gradient_check(EncoderMode::Separate, true);
}

#[test]
fn gradients_match_finite_differences_shared_plain() {
    gradient_check(EncoderMode::Shared, false);
}

#[test]
fn shape_contract_at_full_size() {
    let cfg = ModelConfig { seed: 16, ..Default::default() };
    let params = ModelParams::init(&cfg).unwrap();
    let x = inputs(&cfg, 1, 17);
    let pyramids = params.pyramids(&x).unwrap();
    assert_eq!(pyramids.len(), 4);
    for p in &pyramids {
        let shapes: Vec<_> = p.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![[1, 64, 64, 64], [1, 128, 32, 32], [1, 256, 16, 16], [1, 512, 8, 8]]);
        assert!(p.iter().all(|t| t.data().iter().all(|&v| v >= 0.0)), "attention keeps ReLU signs");
    }
    let y = params.predict(&x).unwrap();
    assert_eq!(y.shape(), [1, 1, 64, 64]);
    assert!(y.all_finite());
    assert_eq!(params.predict(&x).unwrap(), y, "eval mode is deterministic");
}

#[test]
fn init_is_seeded_and_counts_scale_with_encoders() {
    let cfg = ModelConfig::default();
    let a = ModelParams::init(&cfg).unwrap();
    let b = ModelParams::init(&cfg).unwrap();
    assert_eq!(a.store, b.store);
    assert!(a.store.all_finite());
    let shared = ModelParams::init(&ModelConfig { encoder_mode: EncoderMode::Shared, ..cfg.clone() }).unwrap();
    let ratio = a.encoder_param_count() as f64 / shared.encoder_param_count() as f64;
    assert!((ratio - 4.0).abs() / 4.0 < 0.01, "ratio {ratio}");
    let sar = ModelParams::init(&ModelConfig { encoder_mode: EncoderMode::SarShared, ..cfg }).unwrap();
    assert_eq!(sar.net.encoders.len(), 3);
}

#[test]
fn single_modality_shared_equals_separate() {
    let base = ModelConfig {
        stage_widths: vec![8, 16],
        input_spatial: 8,
        modalities: vec![Modality::Sentinel2],
        seed: 18,
        ..Default::default()
    };
    let sep = ModelParams::init(&ModelConfig { encoder_mode: EncoderMode::Separate, ..base.clone() }).unwrap();
    let shr = ModelParams::init(&ModelConfig { encoder_mode: EncoderMode::Shared, ..base.clone() }).unwrap();
    assert_eq!(sep.store, shr.store);
    let x = inputs(&base, 2, 19);
    assert!(sep.predict(&x).unwrap().max_abs_diff(&shr.predict(&x).unwrap()) < 1e-9);
}

#[test]
fn training_mode_dropout_varies_while_eval_does_not() {
    let cfg = reduced(EncoderMode::Separate, true);
    let params = ModelParams::init(&cfg).unwrap();
    let x = inputs(&cfg, 2, 20);
    let run = |seed| {
        let mut s = Session::new(&params.store, ForwardCtx::train(seed, GateBackward::FixedMask));
        let out = params.forward(&mut s, &x).unwrap();
        s.value(out.prediction).clone()
    };
    assert_ne!(run(1), run(2));
    assert_eq!(run(3), run(3));
    assert_eq!(params.predict(&x).unwrap(), params.predict(&x).unwrap());
}

#[test]
fn decoder_uses_the_skip_pathway() {
    let cfg = reduced(EncoderMode::Separate, true);
    let mut params = ModelParams::init(&cfg).unwrap();
    randomize(&mut params.store, &mut ChaCha8Rng::seed_from_u64(21));
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let fine = random([1, 4, 8, 8], &mut rng);
    let coarse = random([1, 8, 4, 4], &mut rng);
    let decode = |skip: Tensor| {
        let mut s = Session::new(&params.store, ForwardCtx::eval());
        let a = s.input(skip);
        let b = s.input(coarse.clone());
        let y = params.net.decoder.forward(&mut s, &[a, b]).unwrap();
        s.value(y).clone()
    };
    let with = decode(fine.clone());
    let without = decode(Tensor::zeros(fine.shape()));
    assert_eq!(with.shape(), [1, 1, 8, 8]);
    assert!(with.max_abs_diff(&without) > 1e-6);
    let mut s = Session::new(&params.store, ForwardCtx::eval());
    let b = s.input(coarse.clone());
    assert!(params.net.decoder.forward(&mut s, &[b]).is_err());
}

#[test]
fn missing_modality_and_single_modality_paths() {
    let cfg = ModelConfig {
        stage_widths: vec![8, 16],
        input_spatial: 8,
        modalities: vec![Modality::Sentinel2],
        ..Default::default()
    };
    let p = ModelParams::init(&cfg).unwrap();
    assert!(p.predict(&inputs(&cfg, 1, 23)).unwrap().all_finite());
    let err = p.predict(&ModalInputs::new()).unwrap_err();
    assert!(err.to_string().contains("sentinel2"), "{err}");
}
