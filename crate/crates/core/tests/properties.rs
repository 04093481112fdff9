use proptest::prelude::*;

use qdiff::bounds::{c1_term, loss_profile, quantization_bound, BoundParams, DistanceMode};
use qdiff::mdp::{bellman_discounted, relative_value_iteration, value_iteration, FiniteMdp};
use qdiff::persist::{decode_qtable, encode_qtable, read_mdp_csv, write_mdp_csv};
use qdiff::qlearn::{q_update_discounted, run_q_learning_env, LearnConfig, MdpEnv, QTable, Variant};
use qdiff::sde::Interval;
use qdiff::{build_action_grid, greedy_policy, ActionGrid, StateQuantizer};

fn stochastic_rows(ns: usize, rows: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, ns * rows).prop_map(move |w| {
        w.chunks(ns)
            .flat_map(|r| {
                let z: f64 = r.iter().sum();
                r.iter().map(move |x| x / z).collect::<Vec<_>>()
            })
            .collect()
    })
}

fn mdp_strategy(max_states: usize, max_actions: usize) -> impl Strategy<Value = FiniteMdp> {
    (1..=max_states, 1..=max_actions).prop_flat_map(|(ns, na)| {
        (stochastic_rows(ns, ns * na), prop::collection::vec(0.0f64..5.0, ns * na))
            .prop_map(move |(p, c)| FiniteMdp::new(ns, na, 1.0, p, c).unwrap())
    })
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Pointwise minimum over every deterministic stationary policy of its exact value.
fn enumerate_values(mdp: &FiniteMdp, beta: f64) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut best = vec![f64::INFINITY; ns];
    for code in 0..na.pow(ns as u32) {
        let policy: Vec<usize> = (0..ns).map(|s| code / na.pow(s as u32) % na).collect();
        let a = (0..ns)
            .map(|s| {
                let row = mdp.transition_row(s, policy[s]);
                (0..ns).map(|j| if s == j { 1.0 } else { 0.0 } - beta * row[j]).collect()
            })
            .collect();
        let b = (0..ns).map(|s| mdp.cost(s, policy[s])).collect();
        for (bst, v) in best.iter_mut().zip(solve(a, b)) {
            *bst = bst.min(v);
        }
    }
    best
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_state_has_one_bin(
        d in 1usize..4,
        k in 1usize..9,
        side in 0.1f64..10.0,
        xs in prop::collection::vec(-8.0f64..8.0, 3),
    ) {
        let q = StateQuantizer::new(d, side, k, None).unwrap();
        let x = &xs[..d];
        let bin = q.bin_of(x);
        prop_assert!(bin < q.n_bins());
        if q.contains(x) {
            let cell = q.cell_bounds(bin).unwrap();
            for (iv, v) in cell.iter().zip(x) {
                prop_assert!(iv.lo <= *v && *v <= iv.hi);
            }
            let rep = q.representative(bin);
            let err = rep.iter().zip(x).map(|(r, v)| (r - v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= q.uniform_loss() / 2.0 * (1.0 + 1e-12));
            prop_assert_eq!(q.bin_of(&rep), bin);
        } else {
            prop_assert!(q.is_overflow(bin));
        }
    }

    #[test]
    fn refinement_halves_the_loss(d in 1usize..4, k in 1usize..50, side in 0.1f64..10.0) {
        let coarse = StateQuantizer::new(d, side, k, None).unwrap();
        let fine = StateQuantizer::new(d, side, 2 * k, None).unwrap();
        prop_assert!((fine.uniform_loss() * 2.0 - coarse.uniform_loss()).abs() <= 1e-12 * coarse.uniform_loss());
        prop_assert!((coarse.delta() * k as f64 - side).abs() <= 1e-12 * side);
    }

    #[test]
    fn action_grid_points_are_distinct_and_admissible(
        lo in -5.0f64..0.0,
        width in 0.01f64..10.0,
        n_u in 1usize..20,
        dim in 1usize..3,
    ) {
        let bounds = vec![Interval::new(lo, lo + width); dim];
        let g = build_action_grid(&bounds, n_u).unwrap();
        prop_assert_eq!(g.len(), n_u.pow(dim as u32));
        for (i, p) in g.points().iter().enumerate() {
            prop_assert!(p.iter().all(|v| bounds[0].contains(*v)));
            for other in &g.points()[..i] {
                prop_assert!(p != other);
            }
        }
    }

    /// Exact inequality; with two or more mixing states and generic `V, W`
    /// the contraction is strict.
    #[test]
    fn bellman_operator_contracts(
        mdp in mdp_strategy(6, 4).prop_filter("two or more states", |m| m.n_states() > 1),
        beta in 0.0f64..0.999,
        seed_v in prop::collection::vec(-100.0f64..100.0, 6),
        seed_w in prop::collection::vec(-100.0f64..100.0, 6),
    ) {
        let ns = mdp.n_states();
        let (v, w) = (&seed_v[..ns], &seed_w[..ns]);
        let lhs = sup_dist(&bellman_discounted(&mdp, beta, v), &bellman_discounted(&mdp, beta, w));
        prop_assert!(lhs <= beta * sup_dist(v, w));
    }

    /// One state: `TV − TW = β(V − W)` holds with equality, so only rounding
    /// separates the two sides.
    #[test]
    fn single_state_operator_scales_by_beta(c in 0.0f64..5.0, beta in 0.0f64..0.999, v in -100.0f64..100.0, w in -100.0f64..100.0) {
        let mdp = FiniteMdp::new(1, 1, 1.0, vec![1.0], vec![c]).unwrap();
        let lhs = (bellman_discounted(&mdp, beta, &[v])[0] - bellman_discounted(&mdp, beta, &[w])[0]).abs();
        let rhs = beta * (v - w).abs();
        prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * (c + beta * v.abs().max(w.abs())));
    }

    #[test]
    fn value_iteration_matches_policy_enumeration(mdp in mdp_strategy(4, 3), beta in 0.0f64..0.98) {
        let sol = value_iteration(&mdp, beta, 1e-10, 1_000_000).unwrap();
        let oracle = enumerate_values(&mdp, beta);
        prop_assert!(sup_dist(&sol.v, &oracle) <= 1e-8, "{:?} vs {:?}", sol.v, oracle);
        // V is the row minimum of Q and bounded by max C / (1 - β)
        let na = mdp.n_actions();
        for (s, row) in sol.q.chunks(na).enumerate() {
            let (arg, min) = row.iter().enumerate().fold((0, f64::INFINITY), |acc, (a, &q)| if q < acc.1 { (a, q) } else { acc });
            prop_assert_eq!(sol.v[s], min);
            prop_assert_eq!(sol.policy[s], arg);
            prop_assert!(sol.v[s] >= 0.0 && sol.v[s] <= mdp.max_cost() / (1.0 - beta) + 1e-9);
        }
    }

    #[test]
    fn cost_shift_moves_gain_only(mdp in mdp_strategy(4, 3), kappa in -2.0f64..2.0) {
        let a = relative_value_iteration(&mdp, 1e-11, 1_000_000).unwrap();
        let b = relative_value_iteration(&mdp.shifted_costs(kappa), 1e-11, 1_000_000).unwrap();
        prop_assert!((b.gain.unwrap() - a.gain.unwrap() - kappa).abs() <= 1e-8);
        prop_assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn discounted_update_stays_in_range(
        costs in prop::collection::vec(0.0f64..1.0, 1..200),
        beta in 0.0f64..0.99,
        rate in 0.0f64..=1.0,
    ) {
        let cap = 1.0 / (1.0 - beta);
        let mut q = QTable::new(3, 2, 0.0);
        for (i, &c) in costs.iter().enumerate() {
            q_update_discounted(&mut q, i % 3, i % 2, c, (i * 7) % 3, beta, rate);
            prop_assert!(q.values().iter().all(|&v| (0.0..=cap * (1.0 + 1e-12)).contains(&v)));
        }
        prop_assert_eq!(q.total_visits(), costs.len() as u64);
        let mut frozen = q.clone();
        q_update_discounted(&mut frozen, 0, 0, 1.0, 1, beta, 0.0);
        prop_assert_eq!(frozen.values(), q.values());
    }

    #[test]
    fn visits_count_every_step(mdp in mdp_strategy(4, 3), steps in 1u64..3000, avg in any::<bool>()) {
        let cfg = LearnConfig { steps, stop_tol: None, eval_window: 100, ..LearnConfig::default() };
        let mut env = MdpEnv::new(&mdp, 0);
        let variant = if avg { Variant::Average } else { Variant::Discounted };
        let out = run_q_learning_env(&mut env, &cfg, variant).unwrap();
        prop_assert_eq!(out.table.total_visits(), steps);
        prop_assert!(out.table.values().iter().all(|v| v.is_finite()));
        if !avg {
            prop_assert_eq!(out.diagnostics.bound_violations, 0);
        }
    }

    #[test]
    fn qtable_roundtrip_keeps_greedy_policy(
        k in 1usize..6,
        n_u in 1usize..5,
        values in prop::collection::vec(-10.0f64..10.0, 36),
        visits in prop::collection::vec(0u64..1000, 36),
    ) {
        let q = StateQuantizer::new(1, 3.0, k, Some(vec![2.5])).unwrap();
        let grid = ActionGrid::uniform(&[Interval::new(-1.0, 1.0)], n_u).unwrap();
        let n = q.n_bins() * grid.len();
        let table = QTable::from_parts(q.n_bins(), grid.len(), values[..n].to_vec(), visits[..n].to_vec()).unwrap();
        let back = decode_qtable(&encode_qtable(&q, &grid, &table).unwrap()).unwrap();
        prop_assert_eq!(&back.table, &table);
        prop_assert_eq!(greedy_policy(&back.table), greedy_policy(&table));
        prop_assert_eq!(&back.quantizer, &q);
        prop_assert_eq!(&back.grid, &grid);
    }

    #[test]
    fn mdp_csv_roundtrip(mdp in mdp_strategy(5, 3)) {
        let mut buf = Vec::new();
        write_mdp_csv(&mdp, &mut buf).unwrap();
        let back = read_mdp_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back.transitions(), mdp.transitions());
        prop_assert_eq!(back.costs(), mdp.costs());
    }

    #[test]
    fn bounds_are_positive_and_monotone(
        d in 1usize..4,
        m in 0.5f64..6.0,
        alpha in 0.05f64..5.0,
        h in 1e-4f64..1.0,
        c_inf in 0.1f64..10.0,
        mb in 1.0f64..1e5,
    ) {
        let mut p = BoundParams::new(1.0, alpha, h);
        p.d = d;
        p.m = m;
        p.c_inf = c_inf;
        p.m_bins = mb;
        p.n_side = p.balanced_side();
        let b = quantization_bound(&p).unwrap();
        prop_assert!(b.general > 0.0 && b.collapsed > 0.0);
        prop_assert!((b.general - b.collapsed).abs() <= 1e-12 * b.collapsed);
        let mut finer = p.clone();
        finer.m_bins = 2.0 * mb;
        prop_assert!(quantization_bound(&finer).unwrap().collapsed < b.collapsed);
        let mut costlier = p.clone();
        costlier.c_inf = 2.0 * c_inf;
        prop_assert!(quantization_bound(&costlier).unwrap().collapsed > b.collapsed);
    }

    /// Averaged uniformly over `K`, the pointwise loss stays within
    /// `C_1 N^d / M` (equality for the diameter distance, a third of it for
    /// the exact in-bin mean distance).
    #[test]
    fn interior_loss_average_in_one_dimension(
        k in 1usize..40,
        side in 0.5f64..6.0,
        alpha in 0.1f64..3.0,
        h in 0.01f64..0.5,
    ) {
        let q = StateQuantizer::new(1, side, k, None).unwrap();
        let p = BoundParams::new(1.0, alpha, h);
        let cap = c1_term(&p) * side / k as f64;
        let n = 4000;
        let mut diam = 0.0;
        let mut exact = 0.0;
        for i in 0..n {
            let x = [-side / 2.0 + side * (i as f64 + 0.5) / n as f64];
            diam += loss_profile(&p, &x, &q, DistanceMode::Diameter).unwrap().l;
            exact += loss_profile(&p, &x, &q, DistanceMode::ExactUniform1d).unwrap().l;
        }
        let (diam, exact) = (diam / n as f64, exact / n as f64);
        prop_assert!((diam - cap).abs() <= 1e-9 * cap);
        prop_assert!(exact <= cap);
        prop_assert!((exact / cap - 1.0 / 3.0).abs() <= 0.01);
    }
}
