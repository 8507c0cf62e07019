use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::channel::transmit;
use crate::params::{check_param_gradients, FD_FLOOR, FD_STEP};

fn hamming_model(cfg: ModelConfig, seed: u64) -> EccmModel {
    EccmModel::new(ParityCheckMatrix::hamming_7_4(), cfg, seed).unwrap()
}

fn noisy_inputs(model: &EccmModel, count: usize, sigma: f64, seed: u64) -> Vec<DecoderInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.code().n();
    (0..count)
        .map(|_| {
            let s = transmit(&vec![0; n], sigma, 0.0, &mut rng).unwrap();
            model.input_for(&s).unwrap()
        })
        .collect()
}

#[test]
fn config_validation() {
    let h = ParityCheckMatrix::hamming_7_4();
    let tiny = ModelConfig::tiny();
    assert!(tiny.validate(&h).is_ok());
    let odd = ModelConfig { n_blocks: 3, ..tiny };
    assert!(matches!(odd.validate(&h), Err(ModelError::Config(_))));
    assert!(ModelConfig { layout: Layout::Transformer, ..odd }.validate(&h).is_ok());
    assert!(ModelConfig { heads: 3, ..tiny }.validate(&h).is_err());
    let narrow = ModelConfig { d_state: 2, ..tiny };
    assert!(matches!(narrow.validate(&h), Err(ModelError::MaskTooWide { width: 3, .. })));
    // g(H) needs one channel per sequence position.
    let g_mask = ModelConfig { mamba_mask: MambaMask::G, d_model: 8, d_state: 8, ..tiny };
    assert!(matches!(g_mask.validate(&h), Err(ModelError::MaskTooWide { width: 10, .. })));
}

#[test]
fn layers_alternate_starting_with_mamba() {
    let m = hamming_model(ModelConfig::tiny(), 0);
    let kinds: Vec<bool> = m.layers().iter().map(|l| matches!(l, Layer::Mamba(_))).collect();
    assert_eq!(kinds, [true, false, true, false]);
    let t = hamming_model(ModelConfig { layout: Layout::Transformer, ..ModelConfig::tiny() }, 0);
    assert!(t.layers().iter().all(|l| matches!(l, Layer::Attention(_))));
    assert!(t.scan_masks().is_none());
}

#[test]
fn embedding_is_a_per_position_scale() {
    let m = hamming_model(ModelConfig::tiny(), 1);
    let w = m.store().get(m.embedding()).tensor.clone();
    let mut y_in: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
    y_in[4] = 0.0;
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(m.store(), false);
    let rows = [vec![1.0; 10], y_in.clone()].concat();
    let yv = g.constant(Tensor::from_f64(&[2, 10], &rows).unwrap());
    let e = m.embed(&mut g, &mut bind, yv).unwrap();
    let e = g.value(e);
    assert_eq!(&e.data()[..160], w.data());
    for l in 0..10 {
        for d in 0..16 {
            assert_eq!(e.at(&[1, l, d]), y_in[l] * w.at(&[l, d]));
        }
    }
    assert!((0..16).all(|d| e.at(&[1, 4, d]) == 0.0));
}

#[test]
fn output_head_shape_and_neutral_point() {
    let m = hamming_model(ModelConfig::tiny(), 2);
    let mut g = Graph::<f64>::new();
    let mut bind = Binder::new(m.store(), false);
    let y = g.constant(Tensor::zeros(&[3, 10, 16]));
    let o = m.output_head(&mut g, &mut bind, 0, y).unwrap();
    assert_eq!(g.shape(o), &[3, 7]);
    assert!(g.value(o).data().iter().all(|&p| p == 0.5));
}

#[test]
fn output_head_gradients() {
    let m = hamming_model(ModelConfig::tiny(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = uniform(&mut rng, &[2, 10, 16], 1.0);
    let report = check_param_gradients(m.store(), FD_STEP, FD_FLOOR, |g, bind| {
        let yv = g.constant(y.clone());
        let o = m.output_head(g, bind, 0, yv)?;
        g.bce(o, &[0, 1, 0, 0, 1, 1, 0, 1, 0, 0, 0, 0, 1, 0], 1e-12)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn early_stop_always_yields_codewords() {
    let m = hamming_model(ModelConfig::tiny(), 4);
    let code = m.code().clone();
    let g = code.generator_matrix().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut stopped = 0;
    for trial in 0..400 {
        let u: Vec<u8> = (0..4).map(|i| ((trial >> i) & 1) as u8).collect();
        let x = crate::gf2::encode(&g, &u).unwrap();
        let s = transmit(&x, 0.4 + (trial % 5) as f64 * 0.2, 0.0, &mut rng).unwrap();
        let inp = m.input_for(&s).unwrap();
        let r = m.decode(&inp, true).unwrap();
        assert_eq!(r.per_layer_outputs.len(), r.i_last);
        if r.stopped_early {
            stopped += 1;
            assert!(code.is_codeword(&r.codeword_estimate).unwrap());
        }
    }
    assert!(stopped > 0);
}

#[test]
fn confident_no_flip_head_returns_hard_decision() {
    let mut m = hamming_model(ModelConfig::tiny(), 5);
    let bs = m.heads()[0].b_s;
    m.store_mut().get_mut(bs).tensor = Tensor::full(&[7], -40.0);
    let inputs = noisy_inputs(&m, 20, 0.9, 5);
    for inp in &inputs {
        let r = m.decode(inp, false).unwrap();
        assert!(r.per_layer_outputs.iter().flatten().all(|&p| p < 0.5));
        assert_eq!(r.codeword_estimate, hard_decision(&inp.y_raw));
        assert_eq!(r.i_last, 4);
        // A zero input syndrome matches the all-zero prediction immediately.
        let es = m.decode(inp, true).unwrap();
        assert_eq!(es.i_last == 1, inp.syndrome.iter().all(|&b| b == 0));
    }
}

#[test]
fn without_early_stop_every_sample_runs_all_layers() {
    let m = hamming_model(ModelConfig::tiny(), 6);
    let inputs = noisy_inputs(&m, 9, 0.8, 6);
    let refs: Vec<&DecoderInput> = inputs.iter().collect();
    let rs = m.decode_batch(&refs, false, false).unwrap();
    assert!(rs.iter().all(|r| r.i_last == 4 && r.per_layer_outputs.len() == 4 && !r.stopped_early));
}

#[test]
fn batched_decode_matches_single_decodes() {
    let m = hamming_model(ModelConfig::tiny(), 7);
    let inputs = noisy_inputs(&m, 12, 0.7, 7);
    let refs: Vec<&DecoderInput> = inputs.iter().collect();
    let batch = m.decode_batch(&refs, true, false).unwrap();
    for (inp, b) in inputs.iter().zip(&batch) {
        let single = m.decode(inp, true).unwrap();
        assert_eq!(single.i_last, b.i_last);
        assert_eq!(single.codeword_estimate, b.codeword_estimate);
        for (x, y) in single.per_layer_outputs.iter().flatten().zip(b.per_layer_outputs.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(batch, m.decode_batch(&refs, true, false).unwrap());
}

#[test]
fn stop_depth_matches_first_syndrome_match() {
    let m = hamming_model(ModelConfig::tiny(), 8);
    let inputs = noisy_inputs(&m, 30, 0.8, 8);
    for inp in &inputs {
        let full = m.decode(inp, false).unwrap();
        let es = m.decode(inp, true).unwrap();
        let first = full.per_layer_outputs.iter().position(|o| {
            let flips: Vec<u8> = o.iter().map(|&p| u8::from(p > 0.5)).collect();
            m.code().syndrome(&flips).unwrap() == inp.syndrome
        });
        match first {
            Some(i) => assert!(es.stopped_early && es.i_last == i + 1),
            None => assert!(!es.stopped_early && es.i_last == 4),
        }
        assert_eq!(es.per_layer_outputs[..], full.per_layer_outputs[..es.i_last]);
    }
}

#[test]
fn captured_attention_respects_the_mask() {
    let m = hamming_model(ModelConfig::tiny(), 9);
    let inputs = noisy_inputs(&m, 4, 0.8, 9);
    let refs: Vec<&DecoderInput> = inputs.iter().collect();
    assert!(m.decode_batch(&refs, true, true).is_err());
    let rs = m.decode_batch(&refs, false, true).unwrap();
    let mask = m.attention_mask();
    for r in &rs {
        let maps = r.attention.as_ref().unwrap();
        assert_eq!(maps.len(), 2);
        for a in maps {
            assert_eq!(a.shape(), &[2, 10, 10]);
            for (i, &v) in a.data().iter().enumerate() {
                let (row, col) = ((i / 10) % 10, i % 10);
                if mask.get(row, col) == 0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        let sum = r.summed_attention().unwrap();
        // Two layers of two heads, each row a distribution.
        for row in sum.data().chunks_exact(10) {
            assert!((row.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        }
    }
    assert!(m.decode(&inputs[0], false).unwrap().summed_attention().is_err());
}

#[test]
fn summed_attention_is_additive() {
    let mut eye = Tensor::zeros(&[2, 3, 3]);
    for h in 0..2 {
        for i in 0..3 {
            eye.data_mut()[h * 9 + i * 4] = 1.0;
        }
    }
    let mut r = DecodeResult {
        per_layer_outputs: vec![],
        i_last: 1,
        stopped_early: false,
        codeword_estimate: vec![],
        attention: Some(vec![eye.clone()]),
    };
    let one = r.summed_attention().unwrap();
    assert_eq!(one.data(), Tensor::<f64>::eye(3).map(|v| 2.0 * v).data());
    r.attention = Some(vec![eye.clone(), eye]);
    assert_eq!(r.summed_attention().unwrap(), one.map(|v| 2.0 * v));
}

#[test]
fn single_precision_tracks_double() {
    let m64 = hamming_model(ModelConfig::tiny(), 10);
    let mut m32 = m64.clone();
    m32.config.precision = Precision::F32;
    let inputs = noisy_inputs(&m64, 10, 0.8, 10);
    for inp in &inputs {
        let (a, b) = (m64.decode(inp, false).unwrap(), m32.decode(inp, false).unwrap());
        for (x, y) in a.per_layer_outputs.iter().flatten().zip(b.per_layer_outputs.iter().flatten()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}

#[test]
fn ablation_layouts_decode() {
    for cfg in [
        ModelConfig { layout: Layout::Transformer, ..ModelConfig::tiny() },
        ModelConfig { mamba_mask: MambaMask::G, ..ModelConfig::tiny() },
        ModelConfig { tail_mode: TailMode::Pass, residual: true, per_layer_heads: true, ..ModelConfig::tiny() },
        ModelConfig { syndrome_encoding: SyndromeEncoding::Binary, scan: ScanImpl::Composed, ..ModelConfig::tiny() },
    ] {
        let m = hamming_model(cfg, 11);
        let inputs = noisy_inputs(&m, 3, 0.8, 11);
        for inp in &inputs {
            let r = m.decode(inp, true).unwrap();
            assert_eq!(r.codeword_estimate.len(), 7);
        }
    }
}
