//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use qdiff::bounds::{quantization_bound, time_disc_bound, BoundParams};
use qdiff::evaluate::{eval_average, eval_discounted_paired, lyapunov_envelope, lyapunov_moment_check, mean_and_se, path_moments, EvalOptions};
use qdiff::harness::{reproduce, Budget, FigureId, ReproduceOptions, RunManifest};
use qdiff::mdp::{bellman_discounted, relative_value_iteration, value_iteration, FiniteMdp};
use qdiff::qlearn::{run_q_learning, run_q_learning_env, DiffusionEnv, LearnConfig, MdpEnv, ResetRule, ResetTarget, Variant};
use qdiff::rng::stream_rng;
use qdiff::sde::{sample_transition, ConstantCostParams, LinearOuParams, ModelSpec, SimConfig};
use qdiff::{build_action_grid, build_quantizer, builtin_model, ConstantControl, Policy, QuantizedPolicy, UniformExploration};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_mdp(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> FiniteMdp {
    let mut p = vec![0.0; ns * na * ns];
    for row in p.chunks_mut(ns) {
        let w: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = w.iter().sum();
        for (o, x) in row.iter_mut().zip(w) {
            *o = x / z;
        }
    }
    let c = (0..ns * na).map(|_| 3.0 * rng.random::<f64>()).collect();
    FiniteMdp::new(ns, na, 1.0, p, c).unwrap()
}

fn c1_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let model = builtin_model("double_well").unwrap();
    let sim = SimConfig::new(0.1, 0.01, 0.1, 7);
    let q = build_quantizer(1, 2.8, 12, None).unwrap();
    let grid = build_action_grid(&model.action_box, 5).unwrap();
    let cfg = LearnConfig {
        steps: 5_000_000,
        beta_h: 0.95,
        stop_tol: None,
        record_transitions: true,
        reset: ResetRule {
            every: Some(10),
            target: ResetTarget::UniformInCube,
        },
        seed: 7,
        ..LearnConfig::default()
    };
    let out = run_q_learning(&model, &sim, &q, &grid, &cfg, Variant::Discounted).unwrap();
    let mdp = out.diagnostics.transitions.as_ref().unwrap().to_mdp(sim.h).unwrap();
    let sol = value_iteration(&mdp, cfg.beta_h, 1e-12, 1_000_000).unwrap();
    let dist = out.table.sup_distance(&sol.q);
    let scale = sup_abs(&sol.q);
    let elapsed = started.elapsed();
    ensure(
        dist <= 1e-2 * scale && elapsed < Duration::from_secs(300),
        format!(
            "|Q - Q*| = {dist:.3e}, 1% of |Q*| = {:.3e}, steps {}, min pair visits {}, {:.1}s",
            1e-2 * scale,
            out.diagnostics.steps_run,
            out.diagnostics.min_pair_visits,
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let ns = 2 + i % 7;
        let na = 1 + i % 4;
        let mdp = random_mdp(&mut rng, ns, na);
        let beta = rng.random_range(0.0..0.999);
        for _ in 0..20 {
            let scale = 10f64.powi(rng.random_range(-3..4));
            let v: Vec<f64> = (0..ns).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
            let w: Vec<f64> = (0..ns).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
            let lhs = sup_dist(&bellman_discounted(&mdp, beta, &v), &bellman_discounted(&mdp, beta, &w));
            let rhs = beta * sup_dist(&v, &w);
            if lhs > rhs {
                return Err(format!("pair {pairs}: {lhs:e} > {rhs:e}"));
            }
            if rhs > 0.0 {
                worst = worst.max(lhs / rhs);
            }
            pairs += 1;
        }
    }
    ensure(pairs == 1000, format!("{pairs} pairs on 50 MDPs, largest |TV-TW| / (beta |V-W|) = {worst:.6}"))
}

/// `(P, C)` for two states and two actions, `P[s][a] = prob of moving to state 1`.
fn hand_mdps() -> Vec<([[f64; 2]; 2], [[f64; 2]; 2])> {
    vec![
        ([[0.2, 0.9], [0.5, 0.1]], [[1.0, 2.0], [0.5, 3.0]]),
        ([[1.0, 0.0], [0.0, 1.0]], [[2.0, 1.0], [1.0, 0.0]]),
        ([[0.5, 0.5], [0.5, 0.5]], [[1.0, 1.0], [1.0, 1.0]]),
        ([[0.9, 0.3], [0.7, 0.95]], [[0.0, 0.2], [4.0, 1.0]]),
        ([[0.1, 0.6], [0.2, 0.8]], [[3.0, 0.0], [0.0, 3.0]]),
        ([[0.999, 0.001], [0.001, 0.999]], [[5.0, 4.9], [0.1, 0.2]]),
    ]
}

fn hand_to_mdp(p1: &[[f64; 2]; 2], c: &[[f64; 2]; 2]) -> FiniteMdp {
    let mut p = Vec::new();
    for s in 0..2 {
        for a in 0..2 {
            p.extend([1.0 - p1[s][a], p1[s][a]]);
        }
    }
    FiniteMdp::new(2, 2, 1.0, p, vec![c[0][0], c[0][1], c[1][0], c[1][1]]).unwrap()
}

fn c3_brute_force() -> Outcome {
    let mut worst_v: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    for (k, (p1, c)) in hand_mdps().iter().enumerate() {
        let mdp = hand_to_mdp(p1, c);
        // every deterministic policy (a0, a1)
        let policies = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for beta in [0.5, 0.9, 0.95] {
            let mut best = [f64::INFINITY; 2];
            for &(a0, a1) in &policies {
                // (I - beta P) V = C, solved by Cramer's rule
                let (p01, p11) = (p1[0][a0], p1[1][a1]);
                let m = [[1.0 - beta * (1.0 - p01), -beta * p01], [-beta * (1.0 - p11), 1.0 - beta * p11]];
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                let (b0, b1) = (c[0][a0], c[1][a1]);
                let v = [(b0 * m[1][1] - m[0][1] * b1) / det, (m[0][0] * b1 - m[1][0] * b0) / det];
                best = [best[0].min(v[0]), best[1].min(v[1])];
            }
            let sol = value_iteration(&mdp, beta, 1e-12, 1_000_000).unwrap();
            let d = sup_dist(&sol.v, &best);
            worst_v = worst_v.max(d);
            if d > 1e-6 {
                return Err(format!("MDP {k}, beta {beta}: VI {:?} vs enumeration {best:?}", sol.v));
            }
        }
        let mut gain = f64::INFINITY;
        for &(a0, a1) in &policies {
            let (up, down) = (p1[0][a0], 1.0 - p1[1][a1]);
            // both states absorbing: not unichain, and never better than the
            // unichain policies on these examples
            if up + down > 0.0 {
                gain = gain.min((down * c[0][a0] + up * c[1][a1]) / (up + down));
            }
        }
        let sol = relative_value_iteration(&mdp, 1e-12, 1_000_000).unwrap();
        let g = sol.gain.unwrap();
        worst_g = worst_g.max((g - gain).abs());
        if (g - gain).abs() > 1e-6 {
            return Err(format!("MDP {k}: RVI gain {g} vs stationary oracle {gain}"));
        }
    }
    Ok(format!(
        "{} hand MDPs, max value error {worst_v:.2e}, max gain error {worst_g:.2e}",
        hand_mdps().len()
    ))
}

fn c4_ou_closed_forms() -> Outcome {
    let model = builtin_model("linear_ou").unwrap();
    let (a, sigma, h) = (1.0f64, 0.5f64, 0.5f64);
    let sim = SimConfig::new(h, 0.001, h, 11);
    let n = 100_000;
    let mut rng = stream_rng(11, 0);
    let xs: Vec<f64> = (0..n)
        .map(|_| sample_transition(&model, &sim, &[1.0], &[0.0], &mut rng).unwrap().0[0])
        .collect();
    let (mean, se) = mean_and_se(&xs);
    let mean_ref = (-a * h).exp();
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean_ref).powi(2)).collect();
    let (var, var_se) = mean_and_se(&dev);
    let var_ref = sigma * sigma * (1.0 - (-2.0 * a * h).exp()) / (2.0 * a);
    // from x0² = σ²/2a the second moment stays at σ²/2a for all t
    let stat = sigma * sigma / (2.0 * a);
    let eval_sim = SimConfig::new(0.1, 0.001, 2.0, 12);
    let est = eval_average(
        &model,
        &eval_sim,
        &ConstantControl::zero(1),
        &[stat.sqrt()],
        &EvalOptions::default().with_replicas(n),
    )
    .unwrap();
    let z = [
        (mean - mean_ref) / se,
        (var - var_ref) / var_se,
        (est.mean - stat) / est.std_error,
    ];
    ensure(
        z.iter().all(|z| z.abs() <= 3.0),
        format!(
            "mean {mean:.5} vs {mean_ref:.5} ({:+.2} SE), variance {var:.5} vs {var_ref:.5} ({:+.2} SE), average cost {:.5} vs {stat} ({:+.2} SE)",
            z[0], z[1], est.mean, z[2]
        ),
    )
}

fn trend<'a>(m: &'a RunManifest, name: &str) -> Result<&'a qdiff::harness::TrendCheck, String> {
    m.trends
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| format!("{} manifest lacks trend {name}", m.experiment_id))
}

fn c5_dw_trend(root: &Path) -> Outcome {
    let m = reproduce(FigureId::Fig1, &ReproduceOptions::new(root, Budget::Full)).map_err(|e| e.to_string())?;
    let t = trend(&m, "finest_below_coarsest")?;
    ensure(
        m.succeeded() && t.passed && m.wall_clock_seconds <= 1800.0,
        format!("{}; {:.0}s for the five-point sweep", t.detail, m.wall_clock_seconds),
    )
}

fn c6_logistic_behavior(root: &Path) -> Outcome {
    let m = reproduce(FigureId::Fig4, &ReproduceOptions::new(root, Budget::Full)).map_err(|e| e.to_string())?;
    let offset = trend(&m, "finest_offset_below_zero_control")?;
    let mean = trend(&m, "zero_control_mean_state_in_[0.8,1.1]")?;
    ensure(
        m.succeeded() && offset.passed && mean.passed,
        format!("{}; {}", offset.detail, mean.detail),
    )
}

fn c7_sweeps(root: &Path) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for id in [FigureId::Fig2, FigureId::Fig5] {
        let m = reproduce(id, &ReproduceOptions::new(root, Budget::Full)).map_err(|e| e.to_string())?;
        let t = trend(&m, "factor_0.95_below_0.5")?;
        ok &= m.succeeded() && t.passed;
        details.push(format!("{}: {}", id.label(), t.detail));
    }
    ensure(ok, details.join("; "))
}

fn c8_average_cost() -> Outcome {
    let c = 2.0;
    let h = 0.1;
    let model = ModelSpec::ConstantCost(ConstantCostParams {
        cost: c,
        ..Default::default()
    })
    .build()
    .unwrap();
    let sim = SimConfig::new(h, 0.05, h, 5);
    let q = build_quantizer(1, 2.0, 1, None).unwrap();
    let grid = build_action_grid(&model.action_box, 2).unwrap();
    let cfg = LearnConfig {
        steps: 200_000,
        stop_tol: None,
        seed: 5,
        ..LearnConfig::default()
    };
    let mut env = DiffusionEnv::new(&model, &sim, &q, &grid, vec![0.0]).unwrap();
    let out = run_q_learning_env(&mut env, &cfg, Variant::Average).unwrap();
    let rho = out.rho_hat(cfg.delta_for(q.n_bins()));
    if (rho - c * h).abs() > 1e-3 {
        return Err(format!("constant cost: rho {rho} vs c h = {}", c * h));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for t in 0..6 {
        let ns = 2 + t % 3;
        let mdp = random_mdp(&mut rng, ns, 2);
        let gain = relative_value_iteration(&mdp, 1e-12, 1_000_000).unwrap().gain.unwrap();
        let cfg = LearnConfig {
            steps: 1_000_000,
            stop_tol: None,
            seed: t as u64,
            ..LearnConfig::default()
        };
        let mut env = MdpEnv::new(&mdp, 0);
        let out = run_q_learning_env(&mut env, &cfg, Variant::Average).unwrap();
        let err = (out.rho_hat(cfg.delta_for(ns)) - gain).abs();
        let tol = 1e-2 * gain.max(1.0);
        worst = worst.max(err / tol);
        if err > tol {
            return Err(format!("MDP {t} ({ns} states): |rho - gain| = {err:.4} > {tol:.4}"));
        }
    }
    Ok(format!(
        "constant cost rho {rho:.6} vs {:.6}; 6 random MDPs, largest error/tolerance {worst:.3}",
        c * h
    ))
}

fn c9_bound_algebra() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut worst_slope: f64 = 0.0;
    for (d, m) in [(1, 2.0), (1, 1.0), (2, 2.0), (3, 4.0), (2, 7.5)] {
        let mut prev: Option<(f64, f64)> = None;
        for mb in [4.0, 16.0, 100.0, 1e3, 1e5] {
            let mut p = BoundParams::new(1.3, 0.7, 0.1);
            p.d = d;
            p.m = m;
            p.m_bins = mb;
            p.n_side = p.balanced_side();
            let b = quantization_bound(&p).unwrap();
            worst_rel = worst_rel.max((b.general - b.collapsed).abs() / b.collapsed);
            if let Some((m0, c0)) = prev {
                let slope = (b.collapsed / c0).ln() / (mb / m0).ln();
                worst_slope = worst_slope.max((slope - b.exponent).abs());
            }
            prev = Some((mb, b.collapsed));
        }
    }
    // small-h regime: the linear term h is below 4% of sqrt(2h/pi)
    let mut ratios = Vec::new();
    let mut h = 1e-3;
    while h > 1e-6 {
        let p = BoundParams::new(1.0, 1.0, h);
        ratios.push(time_disc_bound(&p.clone().with_h(h / 4.0)) / time_disc_bound(&p));
        h /= 4.0;
    }
    let worst_ratio = ratios.iter().map(|r| (r / 0.5 - 1.0).abs()).fold(0.0, f64::max);
    ensure(
        worst_rel <= 1e-12 && worst_slope <= 1e-12 && worst_ratio <= 0.05,
        format!("general vs collapsed {worst_rel:.1e}, slope error {worst_slope:.1e}, quartering-h ratios within {:.2}% of 0.5", 100.0 * worst_ratio),
    )
}

fn c10_time_discretization() -> Outcome {
    let model = builtin_model("linear_ou").unwrap();
    let q = build_quantizer(1, 4.0, 16, None).unwrap();
    let grid = build_action_grid(&model.action_box, 5).unwrap();
    // nearest grid action to the feedback u = -x
    let actions = (0..q.n_bins())
        .map(|b| {
            let target = -q.representative(b)[0];
            (0..grid.len())
                .min_by(|&i, &j| (grid.point(i)[0] - target).abs().total_cmp(&(grid.point(j)[0] - target).abs()))
                .unwrap()
        })
        .collect();
    let policy = Policy { actions };
    let law = QuantizedPolicy::new(&q, &grid, &policy);
    let opts = EvalOptions {
        truncation_tol: 1e-3,
        ..EvalOptions::default().with_replicas(2000)
    };
    let mut gaps = Vec::new();
    for h in [0.4, 0.2, 0.1, 0.05] {
        let sim = SimConfig::new(h, 0.001, (8.0 / h).ceil() * h, 21);
        let est = eval_discounted_paired(&model, &sim, &law, &[1.0], 1.0, &opts).unwrap();
        gaps.push((h, est.gap.mean.abs(), est.gap.half_width()));
    }
    let monotone = gaps.windows(2).all(|w| w[1].1 < w[0].1);
    let text: Vec<String> = gaps.iter().map(|(h, g, hw)| format!("h={h}: {g:.5}±{hw:.5}")).collect();
    ensure(monotone, format!("|interval - integral| {}", text.join(", ")))
}

fn c11_lyapunov() -> Outcome {
    let dw = builtin_model("double_well").unwrap();
    let grid = build_action_grid(&dw.action_box, 5).unwrap();
    let sim = SimConfig::new(0.1, 0.01, 20.0, 31);
    let rep = lyapunov_moment_check(&dw, &sim, &UniformExploration { grid: &grid }, &[1.2], 2.0, 10_000).unwrap();
    if !(rep.curve_within_envelope && rep.sup_within_envelope) {
        return Err(format!("double well: sup moment {:.4}, C1 {:.4}, C0 {:.4}", rep.sup_moment, rep.c1, rep.c0));
    }
    let (a, sigma) = (1.0, 0.5);
    let ou = ModelSpec::LinearOu(LinearOuParams {
        a,
        sigma,
        ..Default::default()
    })
    .build()
    .unwrap();
    let sim = SimConfig::new(0.1, 0.001, 5.0, 32);
    let pm = path_moments(&ou, &sim, &ConstantControl::zero(1), &[1.0], 10_000, &|x| x[0] * x[0]).unwrap();
    let n_points = pm.times.len() - 1;
    let z = Normal::standard().inverse_cdf(1.0 - 0.025 / n_points as f64);
    let (c1, c0) = (2.0 * a, sigma * sigma);
    let mut worst: f64 = 0.0;
    for k in 1..pm.times.len() {
        let t = pm.times[k];
        let exact = (-c1 * t).exp() + c0 / c1 * (1.0 - (-c1 * t).exp());
        let zk = (pm.mean[k] - exact).abs() / pm.std_error[k];
        worst = worst.max(zk);
        if zk > z || pm.mean[k] > lyapunov_envelope(1.0, c1, c0, t) + z * pm.std_error[k] {
            return Err(format!("OU moment at t={t:.1}: {:.5} vs {exact:.5} ({zk:.2} SE, band {z:.2})", pm.mean[k]));
        }
    }
    Ok(format!(
        "double well sup E[X^2] {:.4} within 1.1 x fitted envelope (C1 {:.3}, C0/C1 {:.4}); OU curve within {worst:.2} SE of the closed form (band {z:.2})",
        rep.sup_moment,
        rep.c1,
        rep.c0 / rep.c1
    ))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn c12_reproducible(first_root: &Path, second_root: &Path) -> Outcome {
    let id = FigureId::Fig2;
    reproduce(id, &ReproduceOptions::new(second_root, Budget::Full)).map_err(|e| e.to_string())?;
    let a = csv_files(&first_root.join(id.label()));
    let b = csv_files(&second_root.join(id.label()));
    if a.is_empty() {
        return Err("first run left no CSV files".into());
    }
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    ensure(a == b, format!("{} re-run, identical bytes in {}", id.label(), names.join(", ")))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let first = root.path().join("first");
    let second = root.path().join("second");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("learned Q matches empirical-MDP Q*", Box::new(c1_oracle_equivalence)),
        ("Bellman contraction", Box::new(c2_contraction)),
        ("brute-force 2x2 MDP oracle", Box::new(c3_brute_force)),
        ("OU closed forms", Box::new(c4_ou_closed_forms)),
        ("double-well h-sweep trend", Box::new(|| c5_dw_trend(&first))),
        ("logistic tracking vs zero control", Box::new(|| c6_logistic_behavior(&first))),
        ("vanishing-discount sweeps", Box::new(|| c7_sweeps(&first))),
        ("average-cost learning", Box::new(c8_average_cost)),
        ("bound algebra", Box::new(c9_bound_algebra)),
        ("time-discretization gap", Box::new(c10_time_discretization)),
        ("Lyapunov envelopes", Box::new(c11_lyapunov)),
        ("byte-identical re-run", Box::new(|| c12_reproducible(&first, &second))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name} [{secs:.1}s]: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s]: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
