//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! process's standard output, bypassing the harness capture, and then
//! asserts.

use std::io::Write;
use std::os::fd::AsFd;
use std::time::Instant;

use multishot::body_model::{forward_kinematics, pose_joints, rodrigues, BodyModel, FrameParams};
use multishot::exec::Exec;
use multishot::experiments::{run_encoder_comparison, run_mode_comparison, EncoderProtocol, ModeProtocol};
use multishot::metrics::{pa_mpjpe, pck, sequence_errors};
use multishot::neural::{
    compute_losses, conv_forward, encode_frame, rest_mean, train, transformer_forward, window_gradient, FrameFeature,
    LossWeights, Mat, ModelKind, Temporal, TemporalModelWeights, TrainConfig,
};
use multishot::objectives::{e_sm_joint, total_energy, Layout, Smoothing, Weights};
use multishot::scene_sim::{
    assemble_tracklets, generate_dataset, generate_sequence, MotionConfig, ShotConfig, SimConfig, TrackletMode,
};
use multishot::solver::{solve_sequence, InitStrategy, SequenceEstimate, SolverConfig, SolverMode};
use multishot::{Vec2, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {id} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    // A duplicate of descriptor 1 is not subject to the harness capture.
    match std::io::stdout().as_fd().try_clone_to_owned().map(std::fs::File::from) {
        Ok(mut out) => {
            let _ = writeln!(out, "\n{line}");
        }
        Err(_) => println!("{line}"),
    }
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = xp[i];
            xp[i] = x0 + h;
            let a = f(&xp);
            xp[i] = x0 - h;
            let b = f(&xp);
            xp[i] = x0;
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// Max-norm error relative to the max-norm of the numerical gradient.
fn max_rel(ana: &[f64], num: &[f64]) -> f64 {
    let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    ana.iter().zip(num).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn short_sim(frames: usize, seed: u64) -> SimConfig {
    SimConfig {
        motion: MotionConfig { frame_count: frames, ..MotionConfig::default() },
        shots: ShotConfig { mean_shot_length: 2.0, missing_prob: 0.2, ..ShotConfig::default() },
        num_sequences: 1,
        seed,
        ..SimConfig::default()
    }
}

fn perturb(rng: &mut ChaCha8Rng, v: &mut [f64], scale: f64) {
    for x in v {
        *x += rng.random_range(-scale..scale);
    }
}

#[test]
fn criterion_1_gradient_oracles() {
    let start = Instant::now();
    let model = BodyModel::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Weights::default();
    let modes = [Smoothing::None, Smoothing::WithinShot, Smoothing::Canonical];

    let mut energy_err = 0.0f64;
    for i in 0..100u64 {
        let seq = generate_sequence(&model, &short_sim(2 + (i as usize) % 4, i), 0).unwrap();
        let gt = SequenceEstimate::from_ground_truth(&seq).unwrap();
        let layout = Layout::new(&model, seq.len());
        let mut x = layout.pack(&gt.beta, &gt.frames);
        perturb(&mut rng, &mut x, 0.15);
        let mode = modes[i as usize % 3];
        let g = total_energy(&model, &seq, &x, &w, mode, true).unwrap().1.unwrap();
        let fd = fd_grad(|v| total_energy(&model, &seq, v, &w, mode, false).unwrap().0.total, &x, 1e-6);
        energy_err = energy_err.max(max_rel(&g, &fd));
    }

    let lw = LossWeights::default();
    let mut loss_err = 0.0f64;
    for i in 0..100u64 {
        let seq = generate_sequence(&model, &short_sim(3, 1000 + i), 0).unwrap();
        if !seq.frames.iter().any(|f| f.valid) {
            continue;
        }
        let gt = SequenceEstimate::from_ground_truth(&seq).unwrap();
        let p = model.frame_dim() + model.shape_dim();
        let mut pred = Mat::zeros(seq.len(), p);
        for (t, f) in gt.frames.iter().enumerate() {
            let mut row = f.to_vec();
            row.extend(&gt.beta);
            perturb(&mut rng, &mut row, 0.1);
            pred.row_mut(t).copy_from_slice(&row);
        }
        let (_, g) = compute_losses(&model, &pred, &seq.frames, &gt.frames, &gt.beta, &lw).unwrap();
        let flat: Vec<f64> = pred.iter().copied().collect();
        let loss = |v: &[f64]| {
            let m = Mat::from_column_slice(seq.len(), p, v);
            compute_losses(&model, &m, &seq.frames, &gt.frames, &gt.beta, &lw).unwrap().0.total
        };
        let fd = fd_grad(loss, &flat, 1e-6);
        let ana: Vec<f64> = g.iter().copied().collect();
        loss_err = loss_err.max(max_rel(&ana, &fd));
    }

    // Backpropagation through every architecture on small random models.
    let mut weight_err = 0.0f64;
    for i in 0..100u64 {
        let kind = ModelKind::ALL[i as usize % 3];
        let seq = generate_sequence(&model, &short_sim(3, 2000 + i), 0).unwrap();
        if !seq.frames.iter().any(|f| f.valid) {
            continue;
        }
        let gt = SequenceEstimate::from_ground_truth(&seq).unwrap();
        let mut wts = TemporalModelWeights::new(&model, kind, 8, rest_mean(&model), i).unwrap();
        let n = wts.tensors().len();
        for (k, t) in wts.tensors_mut().into_iter().enumerate() {
            if k + 1 < n {
                for v in t.iter_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
        let (_, g) = window_gradient(&model, &wts, &seq.frames, &gt.frames, &gt.beta, &lw, false).unwrap();
        let loss = |w: &TemporalModelWeights| {
            window_gradient(&model, w, &seq.frames, &gt.frames, &gt.beta, &lw, false).unwrap().0.total
        };
        let grads: Vec<Mat> = g.tensors().iter().map(|(_, m)| (*m).clone()).collect();
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for (k, gk) in grads.iter().enumerate().take(n - 1) {
            for _ in 0..2 {
                let j = rng.random_range(0..gk.len());
                let (mut a, mut b) = (wts.clone(), wts.clone());
                a.tensors_mut()[k][j] += 1e-6;
                b.tensors_mut()[k][j] -= 1e-6;
                num.push((loss(&a) - loss(&b)) / 2e-6);
                ana.push(gk[j]);
            }
        }
        weight_err = weight_err.max(max_rel(&ana, &num));
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = energy_err < 1e-4 && loss_err < 1e-4 && weight_err < 1e-4 && secs < 120.0;
    report(
        1,
        "gradient oracles",
        ok,
        &format!("energy {energy_err:.2e}, losses {loss_err:.2e}, weights {weight_err:.2e} (limit 1e-4), {secs:.1}s"),
    );
    assert!(ok);
}

#[test]
fn criterion_2_canonical_frame_mechanism() {
    let model = BodyModel::standard();
    let data = generate_dataset(&model, &SimConfig::default(), Exec::default()).unwrap();
    let (mut pairs, mut exact, mut disp_sum) = (0usize, true, 0.0);
    for seq in &data.sequences {
        let gt = SequenceEstimate::from_ground_truth(seq).unwrap();
        for (a, b) in seq.shot_boundaries() {
            let fa = &gt.frames[a];
            let shared = FrameParams { theta_b: fa.theta_b.clone(), ..gt.frames[b].clone() };
            let e = e_sm_joint(&model, fa, &shared, &gt.beta).unwrap();
            exact &= e.value == 0.0 && e.first[..6].iter().chain(&e.second[..6]).all(|&g| g == 0.0);
            let xb_a = forward_kinematics(&model, &fa.theta_b, &gt.beta).unwrap();
            let xb_b = forward_kinematics(&model, &gt.frames[b].theta_b, &gt.beta).unwrap();
            let ja = pose_joints(&xb_a, &fa.r_gl, &fa.t_gl);
            let jb = pose_joints(&xb_b, &gt.frames[b].r_gl, &gt.frames[b].t_gl);
            disp_sum += ja.iter().zip(&jb).map(|(p, q)| (p - q).norm()).sum::<f64>() / ja.len() as f64;
            pairs += 1;
        }
    }
    let disp = disp_sum / pairs.max(1) as f64;
    let ok = pairs > 0 && exact && disp > 0.5;
    report(
        2,
        "canonical-frame mechanism",
        ok,
        &format!("{pairs} boundaries, zero energy and r_gl/t_gl gradient: {exact}, mean camera-frame joint jump {disp:.2} m"),
    );
    assert!(ok);
}

#[test]
fn criterion_3_mode_ordering() {
    let start = Instant::now();
    let model = BodyModel::standard();
    let c = run_mode_comparison(&model, &ModeProtocol::default(), Exec::default()).unwrap();
    let v = c.verdict().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = v.passes() && secs < 600.0;
    report(
        3,
        "mode ordering on two-shot scenes",
        ok,
        &format!(
            "mean cross-shot PCK@0.1 single-frame {:.2} < single-shot {:.2} < multi-shot {:.2}: {}, lead {:.2} (>= 5), ordered on {}/{} seeds (>= 17), {secs:.0}s",
            v.means[0], v.means[1], v.means[2], v.ordered_on_means, v.margin, v.ordered_seeds, v.seeds
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_noiseless_recovery() {
    let model = BodyModel::standard();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let sim = SimConfig {
            noise_sigma_px: 0.0,
            shots: ShotConfig { truncation_prob: 0.0, ..ShotConfig::default() },
            num_sequences: 1,
            seed,
            ..SimConfig::default()
        };
        let seq = generate_sequence(&model, &sim, 0).unwrap();
        let cfg = SolverConfig {
            mode: SolverMode::MultiShot,
            init: InitStrategy::PerturbedGt,
            init_noise: 0.05,
            seed,
            ..SolverConfig::default()
        };
        let est = solve_sequence(&model, &seq, &cfg).unwrap();
        worst = worst.max(sequence_errors(&model, &est, &seq).unwrap().1);
    }
    let ok = worst < 5.0;
    report(4, "noiseless recovery", ok, &format!("worst PA-MPJPE over 10 seeds {worst:.3} mm (< 5)"));
    assert!(ok);
}

#[test]
fn criterion_5_masking_invariance() {
    let model = BodyModel::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sim = SimConfig { shots: ShotConfig { missing_prob: 0.3, ..ShotConfig::default() }, ..SimConfig::default() };
    let (mut transformer_same, mut conv_changed, mut windows) = (true, 0usize, 0usize);
    for i in 0..20 {
        let seq = generate_sequence(&model, &sim, i).unwrap();
        let single = TemporalModelWeights::new(&model, ModelKind::SingleFrame, 64, rest_mean(&model), i as u64).unwrap();
        let mut tw = single.with_kind(ModelKind::Transformer, i as u64).unwrap();
        let mut cw = single.with_kind(ModelKind::Conv, i as u64).unwrap();
        // Trained-looking temporal stages: every weight non-trivial.
        for w in [&mut tw, &mut cw] {
            let n = w.tensors().len();
            for (k, t) in w.tensors_mut().into_iter().enumerate() {
                if k + 1 < n {
                    for v in t.iter_mut() {
                        *v += rng.random_range(-0.2..0.2);
                    }
                }
            }
        }
        let (Temporal::Transformer(layer), Temporal::Conv(stage)) = (&tw.temporal, &cw.temporal) else {
            unreachable!()
        };
        for chunk in seq.frames.chunks(16) {
            if chunk.iter().all(|f| f.valid) || !chunk.iter().any(|f| f.valid) {
                continue;
            }
            windows += 1;
            let clean: Vec<FrameFeature> = chunk.iter().map(|f| encode_frame(f, &tw).unwrap()).collect();
            let mut garbage = clean.clone();
            for f in garbage.iter_mut().filter(|f| !f.valid) {
                for v in &mut f.phi {
                    *v = rng.random_range(-1e3..1e3);
                }
            }
            let valid_rows = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                rows.into_iter().zip(chunk).filter(|(_, f)| f.valid).map(|(r, _)| r).collect()
            };
            let (a, _) = transformer_forward(&clean, layer).unwrap();
            let (b, _) = transformer_forward(&garbage, layer).unwrap();
            transformer_same &= valid_rows(a) == valid_rows(b);
            let a = conv_forward(&clean, stage).unwrap();
            let b = conv_forward(&garbage, stage).unwrap();
            conv_changed += (valid_rows(a) != valid_rows(b)) as usize;
        }
    }
    let ok = windows > 0 && transformer_same && conv_changed == windows;
    report(
        5,
        "masking invariance",
        ok,
        &format!(
            "{windows} windows with missing frames: transformer valid outputs bitwise unchanged {transformer_same}, conv outputs changed in {conv_changed}/{windows}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_6_encoder_trend() {
    let start = Instant::now();
    let model = BodyModel::standard();
    let c = run_encoder_comparison(&model, &EncoderProtocol::default(), Exec::default()).unwrap();
    let v = c.verdict().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = v.passes() && secs < 1800.0;
    report(
        6,
        "transformer vs conv under 30% missing frames",
        ok,
        &format!(
            "mean test cross-shot PCK@0.1 single-frame {:.2}, transformer {:.2}, conv {:.2}; transformer >= conv on {}/{} seeds (>= 8), {secs:.0}s",
            v.means[0], v.means[1], v.means[2], v.winning_seeds, v.seeds
        ),
    );
    assert!(ok);
}

/// Default-size datasets from generator configurations with shots shorter
/// than the long-tracklet threshold. Merging two long tracklets lowers the
/// long count, so with long shots, or on a handful of sequences, the
/// ordering is not guaranteed.
#[test]
fn criterion_7_tracklet_ordering() {
    let model = BodyModel::standard();
    let (mut datasets, mut ordered) = (0usize, 0usize);
    for seed in 0..10u64 {
        for (missing, shot_len) in [(0.0, 10.0), (0.1, 10.0), (0.3, 10.0), (0.1, 5.0), (0.3, 5.0)] {
            let sim = SimConfig {
                shots: ShotConfig { missing_prob: missing, mean_shot_length: shot_len, ..ShotConfig::default() },
                seed,
                ..SimConfig::default()
            };
            let data = generate_dataset(&model, &sim, Exec::default()).unwrap();
            let longs: Vec<usize> = TrackletMode::ALL.iter().map(|&m| assemble_tracklets(&data, m).1.count_long).collect();
            datasets += 1;
            ordered += (longs[0] <= longs[1] && longs[1] <= longs[2]) as usize;
        }
    }
    let ok = ordered == datasets;
    report(
        7,
        "tracklet statistics ordering",
        ok,
        &format!("long-tracklet counts single-shot <= continuous-identity <= multi-shot on {ordered}/{datasets} datasets"),
    );
    assert!(ok);
}

#[test]
fn criterion_8_training_sanity() {
    let model = BodyModel::standard();
    let sim = SimConfig {
        noise_sigma_px: 0.0,
        shots: ShotConfig { missing_prob: 0.0, ..ShotConfig::default() },
        num_sequences: 1,
        ..SimConfig::default()
    };
    let data = generate_dataset(&model, &sim, Exec::default()).unwrap();
    let gt: Vec<SequenceEstimate> = data.sequences.iter().map(|s| SequenceEstimate::from_ground_truth(s).unwrap()).collect();
    let cfg = TrainConfig { epochs: 200, ..TrainConfig::default() };
    let a = train(&model, &data, &gt, ModelKind::SingleFrame, &cfg, None, Exec::default()).unwrap();
    let b = train(&model, &data, &gt, ModelKind::SingleFrame, &cfg, None, Exec::default()).unwrap();
    let (first, last) = (a.curve[0].total, a.curve.last().unwrap().total);
    let same = a.curve == b.curve && a.weights == b.weights;
    let ok = last < 0.1 * first && same;
    report(
        8,
        "training sanity",
        ok,
        &format!("total loss {first:.2} -> {last:.2} ({:.1}% of initial, < 10%), curves bitwise reproducible {same}", 100.0 * last / first),
    );
    assert!(ok);
}

/// Mean error in millimeters of the best similarity transform found by a
/// coarse-to-fine grid over rotation vectors and scales. Translation is the
/// closed-form centroid match for each candidate.
fn brute_force_pa(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<Vec3>() / n;
    let mg = gt.iter().sum::<Vec3>() / n;
    let cost = |w: &Vec3, s: f64| -> f64 {
        let r = rodrigues(w);
        pred.iter().zip(gt).map(|(p, g)| (s * r * (p - mp) - (g - mg)).norm_squared()).sum()
    };
    let mut best = (Vec3::zeros(), 1.0, f64::INFINITY);
    let steps = 12;
    let pi = std::f64::consts::PI;
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let w = Vec3::new(i as f64, j as f64, k as f64) * (2.0 * pi / steps as f64) - Vec3::repeat(pi);
                if w.norm() > pi {
                    continue;
                }
                for si in 0..10 {
                    let s = 0.5 + 0.15 * si as f64;
                    let c = cost(&w, s);
                    if c < best.2 {
                        best = (w, s, c);
                    }
                }
            }
        }
    }
    let (mut dw, mut ds) = (2.0 * pi / steps as f64, 0.15);
    for _ in 0..40 {
        let (w0, s0) = (best.0, best.1);
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    for si in -2..=2 {
                        let w = w0 + Vec3::new(i as f64, j as f64, k as f64) * (dw / 2.0);
                        let s = s0 + si as f64 * ds / 2.0;
                        let c = cost(&w, s);
                        if c < best.2 {
                            best = (w, s, c);
                        }
                    }
                }
            }
        }
        dw *= 0.6;
        ds *= 0.6;
    }
    let r = rodrigues(&best.0);
    pred.iter().zip(gt).map(|(p, g)| (best.1 * r * (p - mp) - (g - mg)).norm()).sum::<f64>() / n * 1000.0
}

#[test]
fn criterion_9_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gt: Vec<Vec3> = (0..5).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
        let w = Vec3::from_fn(|_, _| rng.random_range(-1.5..1.5));
        let s = rng.random_range(0.6..1.8);
        let t = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let pred: Vec<Vec3> =
            gt.iter().map(|g| rodrigues(&w) * g * s + t + Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05))).collect();
        let fast = pa_mpjpe(&pred, &gt).unwrap();
        let brute = brute_force_pa(&pred, &gt);
        worst = worst.max((fast - brute).abs() / brute);
    }

    // PCK hand cases: threshold is alpha times the larger ground-truth bbox side.
    let gt = [Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0), Vec2::new(0.0, 50.0)];
    let pred = [Vec2::new(5.0, 0.0), Vec2::new(100.0, 15.0), Vec2::new(3.0, 54.0)];
    let cases = [
        (pck(&pred, &gt, None, 0.1).unwrap(), 200.0 / 3.0),
        (pck(&pred, &gt, None, 0.2).unwrap(), 100.0),
        (pck(&pred, &gt, None, 0.04).unwrap(), 0.0),
        (pck(&pred, &gt, Some(&[true, false, true]), 0.1).unwrap(), 100.0),
        (pck(&pred, &gt, Some(&[false, true, false]), 0.1).unwrap(), 0.0),
    ];
    let exact = cases.iter().all(|(a, b)| a == b);
    let ok = worst < 0.02 && exact;
    report(
        9,
        "metric oracles",
        ok,
        &format!("PA-MPJPE vs grid search max relative gap {:.3}% (< 2%), PCK hand cases exact {exact}", 100.0 * worst),
    );
    assert!(ok);
}
