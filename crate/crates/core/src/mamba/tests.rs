use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gf2::ParityCheckMatrix;
use crate::params::{check_param_gradients, FD_FLOOR, FD_STEP};

fn dims(l: usize, d: usize, s: usize, k: usize) -> MambaDims {
    MambaDims {
        seq_len: l,
        d_model: d,
        d_state: s,
        k_conv: k,
    }
}

fn random_pmask(rng: &mut ChaCha8Rng, l: usize, m: usize) -> BinaryMatrix {
    let mut b = BinaryMatrix::zeros(l, m);
    for r in 0..l {
        for c in 0..m {
            b.set(r, c, u8::from(rng.random_bool(0.5)));
        }
    }
    b
}

/// Plain-loop evaluation of one direction for `y [L, D]`, read straight off
/// the parameter tensors.
fn oracle(store: &ParamStore, p: &MambaParams, y: &Tensor<f64>, masks: &ScanMasks, opts: &MambaOptions) -> Vec<f64> {
    let t = |id: ParamId| &store.get(id).tensor;
    let (l, d) = (y.shape()[0], y.shape()[1]);
    let s = t(p.w_b).shape()[0];
    let k = t(p.conv_kernel).shape()[0];
    let proj = |w: &Tensor<f64>| -> Vec<f64> {
        let mut o = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..d {
                o[i * d + j] = (0..d).map(|m| y.at(&[i, m]) * w.at(&[m, j])).sum();
            }
        }
        o
    };
    let u = proj(t(p.w_u));
    let z: Vec<f64> = proj(t(p.w_z)).iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    let mut uc = vec![0.0; l * d];
    for i in 0..l {
        for c in 0..d {
            let mut acc = t(p.conv_bias).data()[c];
            for j in 0..k.min(i + 1) {
                acc += t(p.conv_kernel).at(&[j, c]) * u[(i - j) * d + c];
            }
            uc[i * d + c] = acc;
        }
    }
    let readout = |w: &Tensor<f64>, i: usize, si: usize| -> f64 { (0..d).map(|c| uc[i * d + c] * w.at(&[si, c])).sum() };
    let mut h = vec![0.0; d * s];
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for c in 0..d {
            let pre = t(p.w_delta).at(&[i, c]) * uc[i * d + c];
            let delta = if opts.delta_softplus { (1.0 + pre.exp()).ln() } else { pre };
            let mut acc = 0.0;
            for si in 0..s {
                let a_log = t(p.a_log).at(&[c, si]);
                let a = if opts.a_negative_exp { -a_log.exp() } else { a_log };
                let a_bar = (delta * a).exp();
                let b_bar = delta * readout(t(p.w_b), i, si) * masks.b.at(&[i, c]);
                h[c * s + si] = a_bar * h[c * s + si] + b_bar * uc[i * d + c];
                acc += h[c * s + si] * readout(t(p.w_c), i, si) * masks.c.at(&[i, si]);
            }
            out[i * d + c] = z[i * d + c] * (acc + t(p.r).data()[c] * uc[i * d + c]);
        }
    }
    out
}

fn setup(seed: u64, dm: MambaDims) -> (ParamStore, MambaParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = MambaParams::init(&mut store, "m", dm, &mut rng);
    (store, p, rng)
}

#[test]
fn zero_input_gives_zero_output() {
    let h = ParityCheckMatrix::hamming_7_4();
    let (store, p, _) = setup(0, dims(10, 4, 4, 4));
    let layer = MambaLayer {
        forward: p,
        backward: None,
    };
    let masks = ScanMasks::new(&h.participation_mask().0, 4, 4, TailMode::Zero).unwrap();
    let out = run_bidirectional(&store, &layer, &Tensor::zeros(&[10, 4]), &masks, &MambaOptions::default()).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scalar_recurrence_hand_unrolled() {
    let (mut store, p, _) = setup(1, dims(3, 1, 1, 1));
    let set = |s: &mut ParamStore, id, v: &[f64], shape: &[usize]| s.get_mut(id).tensor = Tensor::from_f64(shape, v).unwrap();
    set(&mut store, p.w_u, &[1.0], &[1, 1]);
    set(&mut store, p.conv_kernel, &[1.0], &[1, 1]);
    set(&mut store, p.w_b, &[1.0], &[1, 1]);
    set(&mut store, p.w_c, &[1.0], &[1, 1]);
    set(&mut store, p.w_delta, &[1.0, 1.0, 1.0], &[3, 1]);
    set(&mut store, p.a_log, &[0.0], &[1, 1]);
    set(&mut store, p.r, &[0.0], &[1]);
    // No softplus, A = -1: delta = B = C = u_conv = u, so a = exp(-u), the
    // state drive is delta * B * u = u^3 and the readout multiplies by u.
    let opts = MambaOptions {
        delta_softplus: false,
        ..MambaOptions::default()
    };
    let masks = ScanMasks::new(&BinaryMatrix::from_rows(&[[1u8], [1], [1]]).unwrap(), 1, 1, TailMode::Zero).unwrap();
    let u = [0.5, 1.0, 2.0];
    let y = Tensor::from_f64(&[3, 1], &u).unwrap();
    let out = run_directional(&store, &p, &y, &masks, &opts).unwrap();
    let a: Vec<f64> = u.iter().map(|v| (-v).exp()).collect();
    let h1 = u[0].powi(3);
    let h2 = a[1] * h1 + u[1].powi(3);
    let h3 = a[2] * h2 + u[2].powi(3);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let wz = store.get(p.w_z).tensor.data()[0];
    for (i, h) in [h1, h2, h3].iter().enumerate() {
        let expect = silu(wz * u[i]) * h * u[i];
        assert!((out.data()[i] - expect).abs() < 1e-14, "{i}: {} vs {expect}", out.data()[i]);
    }
}

#[test]
fn both_scan_routes_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..30 {
        let l = rng.random_range(4..=14);
        let d = rng.random_range(1..=6);
        let s = rng.random_range(1..=6);
        let m = rng.random_range(1..=d.min(s));
        let (store, p, mut r2) = setup(100 + trial, dims(l, d, s, 4.min(l)));
        let tail = if rng.random_bool(0.5) { TailMode::Zero } else { TailMode::Pass };
        let masks = ScanMasks::new(&random_pmask(&mut rng, l, m), d, s, tail).unwrap();
        let y = uniform(&mut r2, &[l, d], 1.5);
        for scan in [ScanImpl::Fused, ScanImpl::Composed] {
            let opts = MambaOptions {
                tail_mode: tail,
                scan,
                ..MambaOptions::default()
            };
            let got = run_directional(&store, &p, &y, &masks, &opts).unwrap();
            let want = oracle(&store, &p, &y, &masks, &opts);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "trial {trial} {scan:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn batched_pass_equals_per_sequence_passes() {
    let (store, p, mut rng) = setup(3, dims(8, 4, 5, 4));
    let masks = ScanMasks::new(&random_pmask(&mut rng, 8, 3), 4, 5, TailMode::Zero).unwrap();
    let y = uniform(&mut rng, &[3, 8, 4], 1.0);
    let opts = MambaOptions::default();
    let batched = run_directional(&store, &p, &y, &masks, &opts).unwrap();
    for b in 0..3 {
        let one = Tensor::new(vec![8, 4], y.data()[b * 32..(b + 1) * 32].to_vec()).unwrap();
        let single = run_directional(&store, &p, &one, &masks, &opts).unwrap();
        assert_eq!(single.data(), &batched.data()[b * 32..(b + 1) * 32]);
    }
}

#[test]
fn fused_and_composed_gradients_agree() {
    let h = ParityCheckMatrix::hamming_7_4();
    let (store, p, mut rng) = setup(4, dims(10, 4, 4, 4));
    let masks = ScanMasks::new(&h.participation_mask().0, 4, 4, TailMode::Pass).unwrap();
    let y = uniform(&mut rng, &[2, 10, 4], 1.0);
    let w = uniform(&mut rng, &[2, 10, 4], 1.0);
    let grads = |scan| {
        let opts = MambaOptions {
            scan,
            tail_mode: TailMode::Pass,
            ..MambaOptions::default()
        };
        let mut g = Graph::<f64>::new();
        let mut bind = Binder::new(&store, true);
        let yv = g.leaf(y.clone());
        let wv = g.constant(w.clone());
        let out = directional_pass(&mut g, &mut bind, &p, yv, &masks, &opts).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let gr = g.backward(loss).unwrap();
        let mut all = bind.collect(&gr);
        all.push(gr.get(yv).unwrap().clone());
        all
    };
    for (a, b) in grads(ScanImpl::Fused).iter().zip(grads(ScanImpl::Composed)) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let h = ParityCheckMatrix::hamming_7_4();
    for (scan, shared) in [(ScanImpl::Fused, true), (ScanImpl::Composed, false)] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dm = dims(10, 4, 4, 4);
        let layer = MambaLayer::init(&mut store, "m", dm, shared, &mut rng);
        let masks = ScanMasks::new(&h.participation_mask().0, 4, 4, TailMode::Zero).unwrap();
        let y = uniform(&mut rng, &[2, 10, 4], 1.0);
        let w = uniform(&mut rng, &[2, 10, 4], 1.0);
        let opts = MambaOptions {
            scan,
            ..MambaOptions::default()
        };
        let report = check_param_gradients(&store, FD_STEP, FD_FLOOR, |g, bind| {
            let yv = g.constant(y.clone());
            let wv = g.constant(w.clone());
            let lm = LayerMasks::bind(g, &masks);
            let out = bidirectional_forward(g, bind, &layer, yv, &lm, &opts)?;
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{scan:?}: {report:?}");
    }
}

#[test]
fn scan_masks_behaviour() {
    let h = ParityCheckMatrix::hamming_7_4();
    let pm = h.participation_mask().0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b_bar = uniform(&mut rng, &[10, 4, 5], 1.0);
    let c = uniform(&mut rng, &[10, 5], 1.0);

    let ones = BinaryMatrix::from_rows(&vec![vec![1u8; 3]; 10]).unwrap();
    let pass = ScanMasks::new(&ones, 4, 5, TailMode::Pass).unwrap();
    let (bm, cm) = apply_scan_masks(&b_bar, &c, &pass).unwrap();
    assert_eq!((bm, cm), (b_bar.clone(), c.clone()));

    let zero = ScanMasks::new(&pm, 4, 5, TailMode::Zero).unwrap();
    let (bm, cm) = apply_scan_masks(&b_bar, &c, &zero).unwrap();
    for l in 0..10 {
        for s in 0..5 {
            let keep = s < 3 && pm.get(l, s) == 1;
            assert_eq!(cm.at(&[l, s]), if keep { c.at(&[l, s]) } else { 0.0 });
        }
        for d in 0..4 {
            let keep = d < 3 && pm.get(l, d) == 1;
            for s in 0..5 {
                assert_eq!(bm.at(&[l, d, s]), if keep { b_bar.at(&[l, d, s]) } else { 0.0 });
            }
        }
    }
    // Bit 3 of Hamming(7,4) is in checks 1 and 2 only.
    assert_eq!(&zero.c.data()[15..20], &[0.0, 1.0, 1.0, 0.0, 0.0]);

    assert!(matches!(
        ScanMasks::new(&pm, 2, 5, TailMode::Zero),
        Err(ModelError::MaskTooWide { width: 3, .. })
    ));
}

#[test]
fn palindromic_input_gives_palindromic_output() {
    let l = 7;
    let (store, p, mut rng) = setup(7, dims(l, 3, 3, 4));
    let half = uniform(&mut rng, &[4, 3], 1.0);
    let mut y = Tensor::zeros(&[l, 3]);
    let mut pm = BinaryMatrix::zeros(l, 2);
    let pattern = [[1u8, 0], [0, 1], [1, 1], [0, 1]];
    for i in 0..l {
        let src = i.min(l - 1 - i);
        y.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&half.data()[src * 3..src * 3 + 3]);
        pm.set(i, 0, pattern[src][0]);
        pm.set(i, 1, pattern[src][1]);
    }
    let layer = MambaLayer {
        forward: p,
        backward: None,
    };
    let masks = ScanMasks::new(&pm, 3, 3, TailMode::Zero).unwrap();
    let out = run_bidirectional(&store, &layer, &y, &masks, &MambaOptions::default()).unwrap();
    for i in 0..l {
        for c in 0..3 {
            assert!((out.at(&[i, c]) - out.at(&[l - 1 - i, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn bidirectional_is_forward_plus_reversed_backward() {
    let h = ParityCheckMatrix::hamming_7_4();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let layer = MambaLayer::init(&mut store, "m", dims(10, 4, 4, 4), false, &mut rng);
    let masks = ScanMasks::new(&h.participation_mask().0, 4, 4, TailMode::Zero).unwrap();
    let y = uniform(&mut rng, &[10, 4], 1.0);
    let opts = MambaOptions::default();
    let both = run_bidirectional(&store, &layer, &y, &masks, &opts).unwrap();
    let fwd = oracle(&store, &layer.forward, &y, &masks, &opts);
    let rev = |v: &[f64]| -> Vec<f64> { v.chunks_exact(4).rev().flatten().copied().collect() };
    let yr = Tensor::new(vec![10, 4], rev(y.data())).unwrap();
    let bwd = rev(&oracle(&store, layer.backward_params(), &yr, &masks.reversed(), &opts));
    for i in 0..40 {
        assert!((both.data()[i] - fwd[i] - bwd[i]).abs() < 1e-12);
    }
}

#[test]
fn scan_stays_finite_and_contractive() {
    let h = ParityCheckMatrix::hamming_7_4();
    let (store, p, mut rng) = setup(9, dims(10, 4, 4, 4));
    let layer = MambaLayer {
        forward: p,
        backward: None,
    };
    let masks = ScanMasks::new(&h.participation_mask().0, 4, 4, TailMode::Zero).unwrap();
    let y = uniform(&mut rng, &[10_000, 10, 4], 5.0);
    let out = run_bidirectional(&store, &layer, &y, &masks, &MambaOptions::default()).unwrap();
    assert!(out.all_finite());
    let si = scan_inputs(&store, &p, &uniform(&mut rng, &[10, 4], 5.0), &masks, &MambaOptions::default()).unwrap();
    assert!(si.a_bar.data().iter().all(|&a| a > 0.0 && a <= 1.0));
}

/// Position `l` can feed state row `d` only if it takes part in check `d`,
/// and rows past the mask width never receive input.
#[test]
fn state_rows_only_receive_their_check() {
    let h = ParityCheckMatrix::hamming_7_4();
    let pm = h.participation_mask().0;
    let (store, p, mut rng) = setup(10, dims(10, 5, 6, 4));
    let masks = ScanMasks::new(&pm, 5, 6, TailMode::Zero).unwrap();
    let y = uniform(&mut rng, &[10, 5], 1.0);
    let si = scan_inputs(&store, &p, &y, &masks, &MambaOptions::default()).unwrap();
    for l in 0..10 {
        for d in 0..5 {
            let live = d < 3 && pm.get(l, d) == 1;
            for s in 0..6 {
                let v = si.b_bar_masked.at(&[l, d, s]);
                if live {
                    assert_ne!(v, 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        for s in 3..6 {
            assert_eq!(si.c_masked.at(&[l, s]), 0.0);
        }
    }
}


/// Perturbs each position of a K = 1 forward pass and returns, for every
/// (source, later position, channel), whether the output moved.
fn perturbation_reach(seed: u64, pm: &BinaryMatrix) -> Vec<Vec<Vec<bool>>> {
    let (store, p, mut rng) = setup(seed, dims(10, 4, 4, 1));
    let masks = ScanMasks::new(pm, 4, 4, TailMode::Zero).unwrap();
    let opts = MambaOptions::default();
    let y = uniform(&mut rng, &[10, 4], 1.0);
    let base = run_directional(&store, &p, &y, &masks, &opts).unwrap();
    (0..10)
        .map(|l| {
            let mut yp = y.clone();
            for c in 0..4 {
                yp.data_mut()[l * 4 + c] += 0.3;
            }
            let out = run_directional(&store, &p, &yp, &masks, &opts).unwrap();
            (0..10)
                .map(|lp| (0..4).map(|d| out.at(&[lp, d]) != base.at(&[lp, d])).collect())
                .collect()
        })
        .collect()
}

/// Position `l` feeds new input only into the state rows of its checks. Its
/// step size also rescales every row's decay at step `l`, so a row can move
/// later on only if `l` drives it or it already held input from earlier.
/// Rows past the mask width never move.
#[test]
fn perturbation_reaches_only_driven_or_occupied_rows() {
    // Checks cover positions 0-3, 4-6 and 7-9 respectively.
    let pm = BinaryMatrix::from_rows(
        &(0..10)
            .map(|l| [u8::from(l < 4), u8::from((4..7).contains(&l)), u8::from(l >= 7)])
            .collect::<Vec<_>>(),
    )
    .unwrap();
    for seed in 0..5 {
        let reach = perturbation_reach(seed, &pm);
        for l in 0..10 {
            for lp in l + 1..10 {
                for d in 0..4 {
                    if reach[l][lp][d] {
                        let occupied = (0..l).any(|j| pm.get(j, d) == 1);
                        assert!(d < 3 && (pm.get(l, d) == 1 || occupied), "l={l} l'={lp} d={d}");
                    }
                }
            }
        }
        // Position 1 moves its own row and nothing else.
        assert!((2..10).all(|lp| reach[1][lp][0] && !reach[1][lp][1] && !reach[1][lp][2]));
        // Position 5 moves its own row and, through the decay, the row of
        // check 0 that is already occupied.
        assert!((6..10).all(|lp| reach[5][lp][0] && reach[5][lp][1] && !reach[5][lp][2]));
    }
}

/// Masking confines each state row to one check, but the readout of a later
/// position mixes all rows it can see, so two bits with no common check still
/// influence each other: bit 4 (check 0 only) reaches bit 5 (check 1 only).
#[test]
fn pairwise_locality_does_not_hold() {
    let pm = ParityCheckMatrix::hamming_7_4().participation_mask().0;
    let reach = perturbation_reach(0, &pm);
    assert!((0..3).all(|j| pm.get(4, j) == 0 || pm.get(5, j) == 0));
    assert!(reach[4][5].iter().any(|&moved| moved));
}
