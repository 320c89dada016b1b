#![allow(dead_code)]

use grutrack::gkf::{gkf_step_on_tape, hidden_to_tape, GainArch, GainNetConfig, GainNetwork, StepOptions};
use grutrack::geometry::Box3D;
use grutrack::metrics::{evaluate, position_rmse, EvalConfig};
use grutrack::motion::{ModelKind, MotionModel, StateSpace};
use grutrack::neural::{NodeId, Tape};
use grutrack::scene::{Scenario, TrackFrame};
use grutrack::simulator::{NoiseMode, NoiseSpec, SimConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// CTRA scenes with heavy-tailed detection noise.
pub fn mixture_sim(coverage: f64) -> SimConfig {
    SimConfig {
        frames: 40,
        objects: 6,
        motion_kinds: vec![ModelKind::Ctra],
        annotation_coverage: coverage,
        noise: NoiseSpec {
            mode: NoiseMode::Mixture,
            outlier_prob: 0.15,
            outlier_scale: 5.0,
            position_scale: 0.3,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Mean AMOTA and mean position RMSE over a set of tracked scenes.
pub fn mean_scores(outputs: &[Vec<TrackFrame>], scenes: &[Scenario]) -> (f64, f64) {
    let (mut amota, mut rmse) = (0.0, 0.0);
    for (out, scene) in outputs.iter().zip(scenes) {
        amota += evaluate(out, &scene.frames, &EvalConfig::default()).unwrap().amota;
        rmse += position_rmse(out, &scene.frames, 2.0).map(|r| r.0).unwrap_or(2.0);
    }
    let n = scenes.len() as f64;
    (amota / n, rmse / n)
}

struct Sequence {
    x0: DVector<f64>,
    obs: Vec<Option<DVector<f64>>>,
    targets: Vec<DVector<f64>>,
}

fn sequence(model: &MotionModel, steps: usize, rng: &mut ChaCha8Rng) -> Sequence {
    // x, y, z, w, l, h, v, a, yaw, omega
    let mut truth = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.8, 4.2, 1.5, 5.0, 0.1, 0.3, 0.08]);
    truth[6] += rng.random_range(-1.0..1.0);
    let x0 = truth.map(|v| v + 0.05 * rng.random_range(-1.0..1.0));
    let mut obs = vec![];
    let mut targets = vec![];
    for k in 0..steps {
        truth = model.predict(&truth, 0.5);
        let y = model.observe(&truth).map(|v| v + 0.2 * rng.random_range(-1.0..1.0));
        // one coasting step exercises the prediction-only path
        obs.push(if k == 2 { None } else { Some(y) });
        targets.push(truth.clone());
    }
    Sequence { x0, obs, targets }
}

fn sequence_loss(net: &GainNetwork, model: &MotionModel, seq: &Sequence) -> (Tape, NodeId) {
    let mut tape = Tape::new();
    let mut post = tape.leaf(seq.x0.clone());
    let mut hidden = hidden_to_tape(&mut tape, &net.initial_hidden());
    let mut terms = vec![];
    let opts = StepOptions { flip_heading: true };
    for (y, target) in seq.obs.iter().zip(&seq.targets) {
        let (p, h) = gkf_step_on_tape(net, &mut tape, post, &hidden, y.as_ref(), model, 0.5, opts).unwrap();
        terms.push(tape.squared_error(p, target.clone(), model.state_heading()));
        post = p;
        hidden = h;
    }
    let loss = tape.sum(&terms);
    (tape, loss)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares tape gradients with finite differences over every scalar
/// parameter of a composed gain network.
pub fn gain_network_fd_check(kind: ModelKind, steps: usize, seed: u64) -> FdReport {
    let model = MotionModel::new(kind);
    let cfg = GainNetConfig { hidden_cap: 6, ..Default::default() };
    let mut net = GainNetwork::new(GainArch::new(model.dim(), model.obs_dim(), &cfg), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // biases start at zero and the first-step features are zero, which puts
    // every embedding exactly on a ReLU kink; jitter to a generic point
    for p in net.params.iter_mut() {
        p.value.apply(|v| *v += 0.05 * rng.random_range(-1.0..1.0));
    }
    let seq = sequence(&model, steps, &mut rng);
    let (tape, loss) = sequence_loss(&net, &model, &seq);
    let mut grads = net.params.zeros_like();
    tape.backward(&[(loss, DVector::from_element(1, 1.0))], &net.params, &mut grads);

    // fourth-order stencil; scalars whose stencil crosses a ReLU kink are
    // skipped since the loss is not differentiable across it
    let h = 1e-3;
    let pattern = tape.relu_pattern();
    let mut worst: f64 = 0.0;
    let mut report = FdReport::default();
    for pi in 0..grads.tensors.len() {
        for ei in 0..grads.tensors[pi].len() {
            let orig = net.params.iter().nth(pi).unwrap().value[ei];
            let mut smooth = true;
            let mut at = |v: f64| {
                net.params.iter_mut().nth(pi).unwrap().value[ei] = v;
                let (t, l) = sequence_loss(&net, &model, &seq);
                smooth &= t.relu_pattern() == pattern;
                t.scalar(l)
            };
            let numeric = (8.0 * (at(orig + h) - at(orig - h)) - (at(orig + 2.0 * h) - at(orig - 2.0 * h))) / (12.0 * h);
            net.params.iter_mut().nth(pi).unwrap().value[ei] = orig;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let analytic = grads.tensors[pi][ei];
            // below 1e-8 the stencil's roundoff (about 1e-13 here) dominates
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
            report.checked += 1;
        }
    }
    report.max_rel_error = worst;
    report
}

fn inside_box(b: &Box3D, p: [f64; 3]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
    // rotate into the box frame; length runs along the heading
    let along = c * dx + s * dy;
    let across = -s * dx + c * dy;
    along.abs() <= 0.5 * b.size[1] && across.abs() <= 0.5 * b.size[0] && (p[2] - b.center[2]).abs() <= 0.5 * b.size[2]
}

fn corners(b: &Box3D) -> Vec<[f64; 2]> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (0.5 * b.size[1], 0.5 * b.size[0]);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| [b.center[0] + c * u - s * v, b.center[1] + s * u + c * v])
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull by Andrew's monotone chain.
fn hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut lower: Vec<[f64; 2]> = vec![];
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = vec![];
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_convex(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    (0..poly.len()).all(|i| cross(poly[i], poly[(i + 1) % poly.len()], p) >= 0.0)
}

/// Monte-Carlo GIoU of two boxes from uniform samples in their joint
/// bounding box. Returns the estimate and its standard error from batch
/// means.
pub fn giou_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut pts = corners(a);
    pts.extend(corners(b));
    let h = hull(pts.clone());
    let lo = |k: usize| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(0), hi(0), lo(1), hi(1));
    let z0 = (a.center[2] - 0.5 * a.size[2]).min(b.center[2] - 0.5 * b.size[2]);
    let z1 = (a.center[2] + 0.5 * a.size[2]).max(b.center[2] + 0.5 * b.size[2]);
    let batches = 20;
    let per = samples / batches;
    let mut estimates = vec![];
    for _ in 0..batches {
        let (mut inter, mut union, mut hull_n) = (0usize, 0usize, 0usize);
        for _ in 0..per {
            let p = [rng.random_range(x0..x1), rng.random_range(y0..y1), rng.random_range(z0..z1)];
            let (ia, ib) = (inside_box(a, p), inside_box(b, p));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
            hull_n += inside_convex(&h, [p[0], p[1]]) as usize;
        }
        let (i, u, c) = (inter as f64, union as f64, hull_n as f64);
        estimates.push(i / u + u / c - 1.0);
    }
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn random_box_pair(rng: &mut ChaCha8Rng) -> (Box3D, Box3D) {
    let mut one = || {
        Box3D::from_parts(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..2.5),
            rng.random_range(-3.14..3.14),
        )
        .unwrap()
    };
    (one(), one())
}

/// Best partial matching by enumeration: pairs need `sim >= threshold` and
/// the total similarity is maximized. Returns sorted pairs.
pub fn brute_force_matching(sim: &[Vec<f64>], rows: &[usize], cols: &[usize], threshold: f64) -> Vec<(usize, usize)> {
    fn go(
        sim: &[Vec<f64>],
        rows: &[usize],
        cols: &[usize],
        used: &mut Vec<bool>,
        thr: f64,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
        total: f64,
    ) {
        let Some((&r, rest)) = rows.split_first() else {
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        };
        go(sim, rest, cols, used, thr, cur, best, total);
        for (k, &c) in cols.iter().enumerate() {
            if !used[k] && sim[r][c] >= thr {
                used[k] = true;
                cur.push((r, c));
                go(sim, rest, cols, used, thr, cur, best, total + sim[r][c]);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, vec![]);
    go(sim, rows, cols, &mut vec![false; cols.len()], threshold, &mut vec![], &mut best, 0.0);
    let mut out = best.1;
    out.sort();
    out
}

/// Random two-stage instances with at most three tracks and detections;
/// returns the number of instances where a stage differs from brute force.
pub fn two_stage_mismatches(trials: usize, seed: u64) -> usize {
    use grutrack::assign::{two_stage, Solver};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t1, t2) = (0.3, 0.0);
    let mut bad = 0;
    for _ in 0..trials {
        let n = rng.random_range(0..=3);
        let m = rng.random_range(0..=3);
        let s1: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s2: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (result, first) = two_stage(&s1, &s2, m, (t1, t2), Solver::Hungarian);
        let rows: Vec<usize> = (0..n).collect();
        let cols: Vec<usize> = (0..m).collect();
        let want1 = brute_force_matching(&s1, &rows, &cols, t1);
        let rest_r: Vec<usize> = rows.iter().copied().filter(|r| !want1.iter().any(|p| p.0 == *r)).collect();
        let rest_c: Vec<usize> = cols.iter().copied().filter(|c| !want1.iter().any(|p| p.1 == *c)).collect();
        let want2 = brute_force_matching(&s2, &rest_r, &rest_c, t2);
        let mut got1 = first.clone();
        got1.sort();
        let mut got2: Vec<(usize, usize)> = result.matches.iter().copied().filter(|p| !first.contains(p)).collect();
        got2.sort();
        if got1 != want1 || got2 != want2 {
            bad += 1;
        }
    }
    bad
}

/// Runs the built binary; returns exit code, stdout and stderr.
pub fn run_bin(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_grutrack"))
        .args(args)
        .env_remove("GRUTRACK_LOG")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Ground truth for two objects at x = 0 and x = 10 over ten frames, and
/// predictions: object 1 tracked by id 1 with a 0.5 m offset, object 2 by id
/// 2 for frames 0-4 and id 3 for frames 5-8, one far false positive at
/// frame 3. Hand-computed: AMOTA 167/171, IDS 0 at the best-MOTAR cut.
pub fn scripted_metrics_case() -> (Vec<grutrack::scene::Frame>, Vec<TrackFrame>) {
    use grutrack::scene::{AnnotationBox, Frame, TrackBox};
    let bx = |x: f64, y: f64| Box3D::from_parts(x, y, 0.0, 2.0, 4.0, 1.5, 0.0).unwrap();
    let gt = (0..10)
        .map(|k| Frame {
            index: k,
            timestamp: k as f64 * 0.5,
            ground_truth: [(1u64, 0.0), (2, 10.0)]
                .iter()
                .map(|&(id, x)| AnnotationBox {
                    bbox: bx(x, 0.0),
                    velocity: [0.0, 0.0],
                    instance_id: id,
                    class_id: 0,
                    frame_index: k,
                    annotated: true,
                })
                .collect(),
            detections: vec![],
        })
        .collect();
    let track = |k: usize, id: u64, x: f64, y: f64, score: f64| TrackBox {
        bbox: bx(x, y),
        velocity: [0.0, 0.0],
        score,
        class_id: 0,
        track_id: id,
        frame_index: k,
        timestamp: k as f64 * 0.5,
    };
    let pred = (0..10)
        .map(|k| {
            let mut tracks = vec![track(k, 1, 0.0, 0.5, 0.9)];
            match k {
                0..=4 => tracks.push(track(k, 2, 10.0, 0.0, 0.8)),
                5..=8 => tracks.push(track(k, 3, 10.0, 0.0, 0.7)),
                _ => {}
            }
            if k == 3 {
                tracks.push(track(k, 4, 50.0, 0.0, 0.75));
            }
            TrackFrame {
                index: k,
                timestamp: k as f64 * 0.5,
                tracks,
            }
        })
        .collect();
    (gt, pred)
}

/// simulate, track and eval through the binary into `dir`; returns the
/// bytes of every output file.
pub fn pipeline_outputs(dir: &std::path::Path, seed: u64) -> Vec<Vec<u8>> {
    let p = |name: &str| dir.join(name).display().to_string();
    let seed = seed.to_string();
    let steps: [Vec<String>; 3] = [
        vec!["simulate".into(), "--seed".into(), seed, "--out".into(), p("scene.jsonl")],
        vec!["track".into(), "--input".into(), p("scene.jsonl"), "--mode".into(), "ekf".into(), "--out".into(), p("tracks.jsonl")],
        vec![
            "eval".into(),
            "--tracks".into(),
            p("tracks.jsonl"),
            "--gt".into(),
            p("scene.jsonl"),
            "--out".into(),
            p("report.json"),
            "--csv".into(),
            p("report.csv"),
        ],
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, _, err) = run_bin(&args);
        assert_eq!(code, 0, "{args:?}: {err}");
    }
    ["scene.jsonl", "tracks.jsonl", "report.json", "report.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}
