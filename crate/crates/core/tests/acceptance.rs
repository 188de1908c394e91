//! End-to-end acceptance checks. Each test prints one `[n] ... PASS|FAIL` line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irisfcn::accel::{accel_gemm_dfp, tile_schedule, AccelJob, TileConfig};
use irisfcn::codec::{hamming, match_min_hd, IrisCode, ANGULAR_RES, MAX_SHIFT, RADIAL_RES};
use irisfcn::config::PipelineConfig;
use irisfcn::contour::{fit_contours, render_annulus};
use irisfcn::eval::{all_pairs, e1, e2, eer, seg_metrics, GalleryEntry, MetricReport, ScoreSet};
use irisfcn::fcn::{
    batch_norm, build_arch, count_flops, fold_bn, forward_logits, infer, ArchSpec, BnParams, LayerSpec,
    Network, RefGemm,
};
use irisfcn::pipeline::encode_eye;
use irisfcn::quant::{calibrate_and_quantize, quantized_infer, select_calibration};
use irisfcn::synth::{render_all, SyntheticEyeSpec, SyntheticSample};
use irisfcn::tensor::{gemm_ref, gemm_ref_q, im2col, softmax2, DfpMatrix, Matrix, Tensor};
use irisfcn::train::{loss_and_gradients, train, weighted_bce_loss, LossParams, TrainConfig, TrainSample};
use irisfcn::{BinaryMask, Error};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{n}] {name}: {verdict} ({detail})");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------------------------------

#[test]
fn flop_accounting() {
    let t = Instant::now();
    // (label, scale, channels, groups, published GFLOPs), decreasing cost
    let family = [
        ("FCN9", 1.0, 16, "0-1-2-3-4-3-2-1-0", 1.791),
        ("FCN10", 1.0, 8, "0-1-2-3-4-3-2-1-0", 0.453),
        ("FCN11", 1.0, 6, "0-1-2-3-4-3-2-1-0", 0.335),
        ("FCN12", 1.0, 4, "0-1-2-3-4-3-2-1-0", 0.154),
        ("FCN13", 1.0, 4, "0-1-2-4-2-1-0", 0.117),
        ("FCN14", 0.5, 8, "0-1-2-4-2-1-0", 0.054),
        ("FCN15", 0.5, 4, "0-1-2-4-2-1-0", 0.038),
        ("FCN16", 0.25, 8, "0-1-4-1-0", 0.014),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    let mut counts = Vec::new();
    for (label, s, n, g, published) in family {
        let f = count_flops(&ArchSpec::parse(s, n, g).unwrap(), 240, 320).unwrap() as f64 / 1e9;
        let within = rel(f, published) <= 0.25;
        ok &= within;
        counts.push(f);
        lines.push(format!("{label} {f:.4}/{published} {}", if within { "ok" } else { "off" }));
    }
    let ordered = counts.windows(2).all(|w| w[0] > w[1]);
    ok &= ordered;
    let f0 = count_flops(&ArchSpec::parse(1.0, 12, "0-1-2-3-4-3-2-1-0").unwrap(), 280, 320).unwrap() as f64 / 1e9;
    let f0_ok = rel(f0, 1.143) <= 0.25;
    ok &= f0_ok;
    lines.push(format!("FCN0 {f0:.4}/1.143 {}", if f0_ok { "ok" } else { "off" }));
    let fast = t.elapsed().as_secs_f64() < 1.0;
    ok &= fast;
    report(
        1,
        "FLOP accounting",
        ok,
        &format!("{}; ordering {}; {:.2?}", lines.join(", "), if ordered { "ok" } else { "broken" }, t.elapsed()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

fn loss_of(net: &Network<f64>, x: &Tensor<f64>, gt: &BinaryMask, lp: &LossParams) -> f64 {
    let logits = forward_logits(net, x, &mut RefGemm, None).unwrap();
    weighted_bce_loss(&softmax2(&logits).unwrap(), gt, lp).unwrap()
}

fn param(net: &mut Network<f64>, layer: usize, bias: bool, j: usize) -> &mut f64 {
    let p = &mut net.params_mut()[layer];
    if bias {
        &mut p.bias[j]
    } else {
        &mut p.weights.data_mut()[j]
    }
}

fn randomize(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..net.layers().len() {
        let p = &net.params()[i];
        let (r, c, nb) = (p.weights.rows(), p.weights.cols(), p.bias.len());
        if r * c == 0 {
            continue;
        }
        let w = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
        let b = (0..nb).map(|_| rng.gen_range(-0.2..0.2)).collect();
        net.set_params(i, w, b).unwrap();
    }
}

/// Largest relative error between backprop and central differences over `samples` random
/// parameters.
fn max_gradient_error(mut net: Network<f64>, h: usize, w: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(&mut net, &mut rng);
    let x = Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let gt = BinaryMask::from_fn(w, h, |px, py| (px * 3 + py * 5) % 7 < 3);
    let lp = LossParams::new(0.35).unwrap();
    let (_, grads) = loss_and_gradients(&net, &x, &gt, &lp).unwrap();
    let slots: Vec<(usize, bool, usize)> = (0..net.layers().len())
        .flat_map(|l| {
            let p = &net.params()[l];
            let ws = (0..p.weights.data().len()).map(move |j| (l, false, j));
            let bs = (0..p.bias.len()).map(move |j| (l, true, j));
            ws.chain(bs)
        })
        .collect();
    // near the cube root of f64 epsilon, which balances truncation and rounding error
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (l, is_bias, j) = slots[rng.gen_range(0..slots.len())];
        let analytic = if is_bias { grads.layers[l].bias[j] } else { grads.layers[l].weights.data()[j] };
        let probe = |delta: f64| {
            let mut n = net.clone();
            *param(&mut n, l, is_bias, j) += delta;
            loss_of(&n, &x, &gt, &lp)
        };
        let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradient_correctness() {
    let t = Instant::now();
    let plain = Network::from_layers(vec![
        LayerSpec::conv(1, 3, 3, 1, 1),
        LayerSpec::conv(3, 2, 3, 1, 1).without_relu(),
        LayerSpec::softmax(),
    ])
    .unwrap();
    let tconv = Network::from_layers(vec![
        LayerSpec::conv(1, 4, 3, 2, 1),
        LayerSpec::conv(4, 4, 3, 1, 1),
        LayerSpec::tconv(4, 2, 4, 2, 1).without_relu(),
        LayerSpec::softmax(),
    ])
    .unwrap();
    let skip: Network<f64> = build_arch(&ArchSpec::parse(1.0, 4, "0-1-4-1-0").unwrap()).unwrap();
    assert!(skip.layers().iter().any(|l| l.skip_from.is_some()));
    let errs = [
        max_gradient_error(plain, 9, 11, 100, 1),
        max_gradient_error(tconv, 10, 12, 100, 2),
        max_gradient_error(skip, 16, 16, 100, 3),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let ok = worst < 1e-4 && t.elapsed().as_secs() < 60;
    report(
        2,
        "gradient correctness",
        ok,
        &format!("max rel err {worst:.2e} over 3x100 params ({:.2e}, {:.2e}, {:.2e}); {:.2?}", errs[0], errs[1], errs[2], t.elapsed()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

#[test]
fn bn_folding_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (cin, cout, k) = (rng.gen_range(1..4), rng.gen_range(1..6), [1, 3, 5][rng.gen_range(0..3)]);
        let (h, w) = (rng.gen_range(4..12), rng.gen_range(4..12));
        let rk = cin * k * k;
        let weights =
            Matrix::from_vec(cout, rk, (0..cout * rk).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).unwrap();
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bn = BnParams {
            mu: (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            sigma_sq: (0..cout).map(|_| rng.gen_range(1e-3..10.0)).collect(),
            gamma: (0..cout).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            epsilon: 1e-5,
        };
        let x = Tensor::from_vec(cin, h, w, (0..cin * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let cols = im2col(&x, k, 1, k / 2).unwrap();
        let conv = |wm: &Matrix<f32>, b: &[f32]| {
            let mut y = gemm_ref(wm, &cols).unwrap();
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y.set(r, c, y.get(r, c) + b[r]);
                }
            }
            Tensor::from_matrix(y, h, w).unwrap()
        };
        let unfolded = batch_norm(&conv(&weights, &bias), &bn).unwrap();
        let (fw, fb) = fold_bn(&weights, &bias, &bn).unwrap();
        let folded = conv(&fw, &fb);
        for (a, b) in unfolded.data().iter().zip(folded.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = worst < 1e-5;
    report(3, "BN folding equivalence", ok, &format!("max abs diff {worst:.2e} over 100 draws, f32"));
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

/// Walks the tile loops literally and counts tiles.
fn enumerate_tiles(m: usize, k: usize, n: usize, cfg: &TileConfig) -> u64 {
    let mut tiles = 0;
    let mut i = 0;
    while i < m {
        let mut j = 0;
        while j < n {
            let mut p = 0;
            while p < k {
                tiles += 1;
                p += cfg.a_cols;
            }
            j += cfg.b_cols;
        }
        i += cfg.a_rows;
    }
    tiles
}

#[test]
fn quantized_gemm_oracle() {
    let t = Instant::now();
    let cfg = TileConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mismatches, mut saturations) = (0, 0u64);
    for _ in 0..1000 {
        let (m, k, n) = (rng.gen_range(1..=64), rng.gen_range(1..=64), rng.gen_range(1..=64));
        // code range that keeps every partial sum inside the 16-bit C buffer
        let r = ((32767 / k) as f64).sqrt().floor().min(127.0) as i8;
        let codes = |rng: &mut ChaCha8Rng, len: usize| -> Vec<i8> { (0..len).map(|_| rng.gen_range(-r..=r)).collect() };
        let a = DfpMatrix {
            matrix: Matrix::from_vec(m, k, codes(&mut rng, m * k)).unwrap(),
            fl: rng.gen_range(0..8),
        };
        let b = DfpMatrix {
            matrix: Matrix::from_vec(k, n, codes(&mut rng, k * n)).unwrap(),
            fl: rng.gen_range(0..8),
        };
        let out_fl = rng.gen_range(-2..10);
        let (got, rep) = accel_gemm_dfp(&a, &b, None, out_fl, &cfg).unwrap();
        saturations += rep.saturations;
        if got != gemm_ref_q(&a, &b, out_fl).unwrap() {
            mismatches += 1;
        }
    }
    let mut tiles_ok = true;
    let mut shapes = Vec::new();
    for ((m, k, n), want) in [((16, 9, 76800), 686), ((32, 144, 19200), 5504)] {
        let s = tile_schedule(&AccelJob::dfp(m, k, n, 0), &cfg);
        tiles_ok &= s.tiles == want && s.tiles == enumerate_tiles(m, k, n, &cfg);
        shapes.push(format!("({m},{k},{n})->{}", s.tiles));
    }
    let ok = mismatches == 0 && saturations == 0 && tiles_ok && t.elapsed().as_secs() < 60;
    report(
        4,
        "quantized GEMM oracle",
        ok,
        &format!(
            "{mismatches}/1000 mismatches, {saturations} saturations, tiles {}; {:.2?}",
            shapes.join(" "),
            t.elapsed()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

fn gallery(samples: &[SyntheticSample], masks: &[BinaryMask]) -> ScoreSet {
    let cfg = PipelineConfig::default();
    let entries: Vec<GalleryEntry> = samples
        .iter()
        .zip(masks)
        .map(|(s, m)| {
            let (_, code) = encode_eye(&s.image, m, &cfg.contour, &cfg.gabor).unwrap();
            GalleryEntry {
                id: s.name.clone(),
                identity: s.identity.clone(),
                code,
            }
        })
        .collect();
    all_pairs(&entries).unwrap()
}

fn separation(s: &ScoreSet) -> (f64, f64) {
    (
        s.genuine().into_iter().fold(0.0, f64::max),
        s.impostor().into_iter().fold(1.0, f64::min),
    )
}

#[test]
fn synthetic_recognition() {
    let t = Instant::now();
    let spec = SyntheticEyeSpec::default();
    let samples = render_all(&spec).unwrap();
    assert_eq!(samples.len(), 50);
    let held_out = spec.samples_per_identity - 1;
    let (train_set, test_set): (Vec<&SyntheticSample>, Vec<&SyntheticSample>) =
        samples.iter().partition(|s| !s.name.ends_with(&format!("_{held_out}")));

    let arch = ArchSpec::parse(0.5, 8, "0-1-2-4-2-1-0").unwrap();
    let mut net: Network<f32> = build_arch(&arch).unwrap();
    net.init_he(1);
    let data: Vec<TrainSample<f32>> = train_set
        .iter()
        .map(|s| TrainSample::prepare(&net, &s.image.to_tensor(), &s.mask).unwrap())
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.3,
        epochs: 50,
        ..TrainConfig::default()
    };
    train(&mut net, &data, &cfg).unwrap();

    let f_of = |preds: &[BinaryMask]| {
        MetricReport::from_pairs(test_set.iter().zip(preds).map(|(s, p)| (s.name.clone(), p, &s.mask)))
            .unwrap()
            .f_measure
            .mean
    };
    let float_masks: Vec<BinaryMask> = samples.iter().map(|s| infer(&net, &s.image.to_tensor()).unwrap()).collect();
    let held: Vec<BinaryMask> = test_set
        .iter()
        .map(|s| float_masks[samples.iter().position(|x| x.name == s.name).unwrap()].clone())
        .collect();
    let f_float = f_of(&held);
    let (g_float, i_float) = separation(&gallery(&samples, &float_masks));

    let pick = select_calibration(train_set.len(), 16, 1);
    let calib: Vec<Tensor<f32>> = pick.iter().map(|&i| train_set[i].image.to_tensor()).collect();
    let q = calibrate_and_quantize(&net, &calib).unwrap();
    let dfp_masks: Vec<BinaryMask> =
        samples.iter().map(|s| quantized_infer(&q, &s.image.to_tensor::<f32>()).unwrap()).collect();
    let held_q: Vec<BinaryMask> = test_set
        .iter()
        .map(|s| dfp_masks[samples.iter().position(|x| x.name == s.name).unwrap()].clone())
        .collect();
    let f_dfp = f_of(&held_q);
    let dfp_scores = gallery(&samples, &dfp_masks);
    let (g_dfp, i_dfp) = separation(&dfp_scores);
    let eer_dfp = eer(&dfp_scores.genuine(), &dfp_scores.impostor()).unwrap();

    let drop = (f_float - f_dfp) * 100.0;
    let a = f_float >= 0.95;
    let b = g_float < i_float;
    let c = drop <= 2.0 && g_dfp < i_dfp && eer_dfp == 0.0;
    let ok = a && b && c && t.elapsed().as_secs() < 15 * 60;
    report(
        5,
        "synthetic end-to-end recognition",
        ok,
        &format!(
            "held-out F {f_float:.4}; float genuine max {g_float:.3} < impostor min {i_float:.3}: {b}; \
             DFP F {f_dfp:.4} (drop {drop:.2} pts), genuine max {g_dfp:.3} impostor min {i_dfp:.3}, EER {eer_dfp}; {:.1?}",
            t.elapsed()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

#[test]
fn contour_fitting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (w, h) = (320, 240);
    let (mut fit_ok, mut worst_c, mut worst_r, mut violations, mut fallbacks) = (0, 0.0f64, 0.0f64, 0, 0);
    for _ in 0..100 {
        let r = rng.gen_range(40.0..90.0);
        let cx = rng.gen_range(r + 5.0..w as f64 - r - 5.0);
        let cy = rng.gen_range(r + 5.0..h as f64 - r - 5.0);
        let pr = r * rng.gen_range(0.2..0.6);
        let (px, py) = (cx + rng.gen_range(-3.0..3.0), cy + rng.gen_range(-3.0..3.0));
        let noise = rng.gen_range(0.0..=0.05);
        let clean = render_annulus(w, h, (cx, cy, r), (px, py, pr));
        let bits: Vec<bool> = clean.bits().iter().map(|&b| b ^ rng.gen_bool(noise)).collect();
        let m = BinaryMask::from_bits(w, h, bits).unwrap();
        let g = fit_contours(&m).unwrap();
        let dc = (g.iris.cx - cx).hypot(g.iris.cy - cy);
        let dr = (g.iris.r - r).abs();
        worst_c = worst_c.max(dc);
        worst_r = worst_r.max(dr);
        if dc <= 2.0 && dr <= 3.0 {
            fit_ok += 1;
        }
        if g.pupil_fallback {
            fallbacks += 1;
        } else if !(g.pupil.r >= 0.1 * g.iris.r && g.pupil.r <= 0.8 * g.iris.r) {
            violations += 1;
        }
    }
    let ok = fit_ok == 100 && violations == 0;
    report(
        6,
        "contour fitting oracle",
        ok,
        &format!(
            "{fit_ok}/100 within tolerance (worst center {worst_c:.2} px, radius {worst_r:.2} px); \
             {violations} pupil violations, {fallbacks} fallbacks"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

fn toy_code(code: &[bool], mask: &[bool]) -> IrisCode {
    let mut c = IrisCode::new(1, code.len()).unwrap();
    for (i, (&b, &m)) in code.iter().zip(mask).enumerate() {
        c.set(0, i, b, m);
    }
    c
}

/// FAR and FRR at every observed threshold by direct counting, then linear interpolation
/// across the first sign change of FAR - FRR.
fn brute_force_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut prev = (0.0, 1.0);
    for t in ts {
        let far = impostor.iter().filter(|&&s| s <= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s > t).count() as f64 / genuine.len() as f64;
        if far >= frr {
            let (d0, d1) = (prev.0 - prev.1, far - frr);
            if d1 == 0.0 {
                return far;
            }
            return prev.0 + (far - prev.0) * (-d0 / (d1 - d0));
        }
        prev = (far, frr);
    }
    unreachable!()
}

#[test]
fn matching_identities() {
    let mut failures = Vec::new();
    let (t, f) = (true, false);
    // hand-enumerated cases: (a code, a mask, b code, b mask, expected)
    let cases: [([bool; 8], [bool; 8], [bool; 8], [bool; 8], f64); 4] = [
        ([t, f, t, f, t, f, t, f], [t; 8], [t, f, t, f, t, f, t, f], [t; 8], 0.0),
        ([t, t, t, t, f, f, f, f], [t; 8], [t, t, f, f, f, f, t, t], [t; 8], 0.5),
        ([t, t, f, f, t, t, f, f], [t, t, t, t, t, t, f, f], [f, t, f, t, t, t, t, t], [t, t, t, t, t, t, t, f], 2.0 / 6.0),
        ([t; 8], [t, f, t, f, t, f, t, f], [f; 8], [t, t, t, t, t, t, t, t], 1.0),
    ];
    for (i, (ac, am, bc, bm, want)) in cases.iter().enumerate() {
        let got = hamming(&toy_code(ac, am), &toy_code(bc, bm)).unwrap();
        if got != *want {
            failures.push(format!("case {i}: {got} != {want}"));
        }
    }
    let disjoint = hamming(&toy_code(&[t; 4], &[t, t, f, f]), &toy_code(&[t; 4], &[f, f, t, t]));
    if !matches!(disjoint, Err(Error::IncomparableCodes)) {
        failures.push("disjoint masks did not report incomparable codes".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut code = IrisCode::new(RADIAL_RES, 2 * ANGULAR_RES).unwrap();
    for r in 0..RADIAL_RES {
        for c in 0..2 * ANGULAR_RES {
            code.set(r, c, rng.gen(), rng.gen_bool(0.8));
        }
    }
    for k in -(MAX_SHIFT as i32)..=MAX_SHIFT as i32 {
        let (hd, _) = match_min_hd(&code.rotated(k), &code).unwrap();
        if hd != 0.0 {
            failures.push(format!("rotation {k}: hd {hd}"));
        }
    }

    let mut worst = 0.0f64;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let n_gen = rng.gen_range(20..120);
        let genuine: Vec<f64> = (0..n_gen).map(|_| rng.gen_range(0.0..0.45)).collect();
        let impostor: Vec<f64> = (0..200 - n_gen).map(|_| rng.gen_range(0.25..0.6)).collect();
        let e = eer(&genuine, &impostor).unwrap();
        worst = worst.max((e - brute_force_eer(&genuine, &impostor)).abs());
    }
    if worst > 1e-9 {
        failures.push(format!("EER differs from sweep by {worst:e}"));
    }
    let ok = failures.is_empty();
    report(
        7,
        "matching identities",
        ok,
        &if ok {
            format!("4 toy cases exact, rotations |k|<={MAX_SHIFT} give hd 0, EER sweep diff {worst:.1e}")
        } else {
            failures.join("; ")
        },
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------------------

#[test]
fn metric_formulas() {
    let mut failures = Vec::new();
    let mut check = |label: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            failures.push(format!("{label}: {got} != {want}"));
        }
    };
    // 4x4: gt is the left column pair of the top row block, pred doubles it
    let gt = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
    let pred = BinaryMask::from_fn(4, 4, |_, y| y < 2);
    let m = seg_metrics(&pred, &gt).unwrap();
    check("superset P", m.precision, 0.5);
    check("superset R", m.recall, 1.0);
    check("superset F", m.f_measure, 2.0 / 3.0);
    check("superset E1", e1(&pred, &gt).unwrap(), 4.0 / 16.0);
    check("superset E2", e2(m.fp, m.fn_), 0.5 * (4.0 / 16.0 + 0.0));

    let same = seg_metrics(&gt, &gt).unwrap();
    check("identical F", same.f_measure, 1.0);
    check("identical E1", e1(&gt, &gt).unwrap(), 0.0);

    let other = BinaryMask::from_fn(4, 4, |x, y| x >= 2 && y >= 2);
    let d = seg_metrics(&other, &gt).unwrap();
    check("disjoint P", d.precision, 0.0);
    check("disjoint R", d.recall, 0.0);
    check("disjoint F", d.f_measure, 0.0);

    // 3x3, gt 4 pixels; pred hits 3 of them and adds 2 -> P 3/5, R 3/4, F 2/3
    let gt3 = BinaryMask::from_fn(3, 3, |x, y| x < 2 && y < 2);
    let pred3 = BinaryMask::from_bits(3, 3, vec![true, true, true, true, false, true, false, false, false]).unwrap();
    let m3 = seg_metrics(&pred3, &gt3).unwrap();
    check("mixed P", m3.precision, 3.0 / 5.0);
    check("mixed R", m3.recall, 3.0 / 4.0);
    check("mixed F", m3.f_measure, 2.0 * 0.6 * 0.75 / 1.35);
    check("mixed E1", e1(&pred3, &gt3).unwrap(), 3.0 / 9.0);
    check("mixed E2", e2(m3.fp, m3.fn_), 0.5 * (2.0 / 9.0 + 1.0 / 9.0));

    let one = BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0);
    check("2x2 one-pixel E1", e1(&one, &BinaryMask::new(2, 2)).unwrap(), 0.25);
    check("rate E2", e2(0.1, 0.3), 0.2);

    let r = MetricReport::from_pairs([("a".to_string(), &pred, &gt), ("b".to_string(), &pred3, &gt3)]).unwrap();
    check("dataset mean P", r.precision.mean, (0.5 + 0.6) / 2.0);
    check("dataset std P", r.precision.std, 0.05);
    check("dataset mean E1", r.e1, (0.25 + 3.0 / 9.0) / 2.0);

    let ok = failures.is_empty();
    report(8, "metric formulas", ok, &if ok { "all hand cases exact to 1e-12".into() } else { failures.join("; ") });
    assert!(ok);
}
