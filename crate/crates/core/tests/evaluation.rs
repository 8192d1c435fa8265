use std::collections::HashMap;

use causal_surrogate::abm::{exact_pushforward, infection_probability, AggregateTrajectory, LatticeConfig, ParamVector};
use causal_surrogate::evaluation::{
    abstraction_error_exact, amse_of, lockdown_counterfactual, markov_bound_check, quartiles, window_gap, EtaGrid,
    LookupTableSurrogate, TrajectoryModel,
};
use causal_surrogate::interventions::{AbmIntervention, EtaDistribution};
use causal_surrogate::rng::RngStream;
use causal_surrogate::surrogate::{Family, TrainedPair};

fn traj(rows: &[[u32; 3]]) -> AggregateTrajectory {
    AggregateTrajectory::new(rows.to_vec()).unwrap()
}

#[test]
fn amse_single_step_example() {
    let sim = [traj(&[[4, 0, 0]])];
    let obs = [traj(&[[0, 4, 0]])];
    assert_eq!(amse_of(&sim, &obs).unwrap(), 2.0);
    assert_eq!(amse_of(&obs, &obs).unwrap(), 0.0);
}

#[test]
fn amse_is_order_invariant_and_linear_in_squared_error() {
    let a = [traj(&[[4, 0, 0], [3, 1, 0]]), traj(&[[2, 2, 0], [1, 2, 1]])];
    let b = [traj(&[[3, 1, 0], [3, 0, 1]]), traj(&[[2, 1, 1], [0, 4, 0]])];
    let forward = amse_of(&a, &b).unwrap();
    let reversed = amse_of(&[a[1].clone(), a[0].clone()], &[b[1].clone(), b[0].clone()]).unwrap();
    assert!((forward - reversed).abs() < 1e-15);
    // duplicating every row doubles each squared deviation over a doubled N^2
    let widen = |y: &AggregateTrajectory| traj(&y.counts.iter().map(|c| c.map(|v| 2 * v)).collect::<Vec<_>>());
    let wide = amse_of(&a.iter().map(widen).collect::<Vec<_>>(), &b.iter().map(widen).collect::<Vec<_>>()).unwrap();
    assert!((wide - forward).abs() < 1e-15);
    assert!(amse_of(&a, &b[..1]).is_err());
}

#[test]
fn quartiles_interpolate_linearly() {
    let q = quartiles(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
    let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
    assert!(quartiles(&[]).is_err());
    assert!(quartiles(&[1.0, f64::NAN]).is_err());
}

#[test]
fn eta_grid_weights_sum_to_one() {
    let g = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], 20).unwrap();
    assert_eq!(g.points.len(), 81 + 81 * 6);
    assert!((g.points.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
    let short = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], 2).unwrap();
    assert_eq!(short.points.len(), 81);
    assert!(short.points.iter().all(|p| matches!(p.0, AbmIntervention::Init { .. })));
}

#[test]
fn lookup_table_has_zero_abstraction_error() {
    let config = LatticeConfig::new(2, 2).unwrap();
    let grid = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], 2).unwrap();
    let report = abstraction_error_exact(&LookupTableSurrogate::new(config), &grid, &config).unwrap();
    assert!(report.points.iter().all(|p| p.kl.abs() <= 1e-12));
    assert!(report.expected_kl.abs() <= 1e-12);
}

/// Aggregate-path pmf by direct recursion over micro states.
fn brute_force_pmf(side: usize, iota: &AbmIntervention, horizon: usize) -> HashMap<Vec<[u32; 3]>, f64> {
    let n = side * side;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|c| {
            let (r, k) = (c / side, c % side);
            let mut v = vec![
                ((r + side - 1) % side) * side + k,
                ((r + 1) % side) * side + k,
                r * side + (k + side - 1) % side,
                r * side + (k + 1) % side,
            ];
            v.sort();
            v.dedup();
            v.retain(|&m| m != c);
            v
        })
        .collect();
    let schedule = iota.apply_to_abm(horizon).unwrap();
    let counts = |x: &[u8]| {
        let mut c = [0u32; 3];
        x.iter().for_each(|&s| c[s as usize] += 1);
        c
    };
    let mut paths: Vec<(Vec<u8>, Vec<[u32; 3]>, f64)> = Vec::new();
    for mask in 0..(1u32 << n) {
        let x: Vec<u8> = (0..n).map(|c| ((mask >> c) & 1) as u8).collect();
        let k = x.iter().filter(|&&s| s == 1).count() as i32;
        let p = schedule.i0.powi(k) * (1.0 - schedule.i0).powi(n as i32 - k);
        if p > 0.0 {
            paths.push((x.clone(), vec![counts(&x)], p));
        }
    }
    for theta in &schedule.thetas {
        let mut next = Vec::new();
        for (x, hist, p) in paths {
            let mut outs: Vec<(Vec<u8>, f64)> = vec![(Vec::new(), p)];
            for c in 0..n {
                let opts = match x[c] {
                    0 => {
                        let k = neighbors[c].iter().filter(|&&m| x[m] == 1).count() as u32;
                        let q = infection_probability(theta.alpha, k);
                        [(1u8, q), (0, 1.0 - q)]
                    }
                    1 => [(2, theta.beta), (1, 1.0 - theta.beta)],
                    _ => [(0, theta.gamma), (2, 1.0 - theta.gamma)],
                };
                outs = outs
                    .into_iter()
                    .flat_map(|(y, q)| {
                        opts.iter().filter(|o| o.1 > 0.0).map(move |&(s, w)| {
                            let mut y = y.clone();
                            y.push(s);
                            (y, q * w)
                        })
                    })
                    .collect();
            }
            for (y, q) in outs {
                let mut h = hist.clone();
                h.push(counts(&y));
                next.push((y, h, q));
            }
        }
        paths = next;
    }
    let mut pmf = HashMap::new();
    for (_, h, p) in paths {
        *pmf.entry(h).or_insert(0.0) += p;
    }
    pmf
}

#[test]
fn exact_kl_matches_brute_force_for_a_mismatched_surrogate() {
    let config = LatticeConfig::new(2, 2).unwrap();
    let pair = TrainedPair::new(Family::LodeRnn, 4, 2, &mut RngStream::new(31)).unwrap();
    let iota = AbmIntervention::Init { v: ParamVector::new(0.6, 0.3, 0.2).unwrap(), a: 0.4 };
    let grid = EtaGrid { points: vec![(iota, 1.0)] };
    let report = abstraction_error_exact(&pair, &grid, &config).unwrap();
    let pmf = brute_force_pmf(2, &iota, 2);
    let ys: Vec<AggregateTrajectory> = pmf.keys().map(|h| traj(h)).collect();
    let refs: Vec<&AggregateTrajectory> = ys.iter().collect();
    let lq = pair.log_probs(&iota, &refs).unwrap();
    let kl: f64 = ys.iter().zip(&lq).map(|(y, q)| {
        let p = pmf[&y.counts];
        p * (p.ln() - q)
    }).sum();
    assert!(kl > 0.0);
    assert!((report.points[0].kl - kl).abs() < 1e-10, "{} vs {kl}", report.points[0].kl);
}

#[test]
fn bound_holds_for_a_random_pair() {
    let config = LatticeConfig::new(2, 2).unwrap();
    let grid = EtaGrid::new(&EtaDistribution::union(), &[0.0, 0.5, 1.0], 2).unwrap();
    for family in Family::ALL {
        let pair = TrainedPair::new(family, 4, 2, &mut RngStream::new(5)).unwrap();
        let report = markov_bound_check(&pair, &grid, &config, &[0.1, 0.5, 1.0, 2.0, 1e9]).unwrap();
        assert_eq!(report.grid_points, 81);
        assert!(report.max_decomposition_gap <= 1e-9);
        for row in &report.rows {
            assert!(row.probability <= row.bound && row.slack >= 0.0);
        }
        assert_eq!(report.rows.last().unwrap().probability, 0.0);
    }
}

#[test]
fn cross_entropy_is_smallest_for_the_true_distribution() {
    let config = LatticeConfig::new(2, 2).unwrap();
    let grid = EtaGrid::new(&EtaDistribution::UniformInit, &[0.25, 0.75], 2).unwrap();
    let exact = abstraction_error_exact(&LookupTableSurrogate::new(config), &grid, &config).unwrap();
    let pair = TrainedPair::new(Family::Lode, 4, 2, &mut RngStream::new(8)).unwrap();
    let other = abstraction_error_exact(&pair, &grid, &config).unwrap();
    for (p, q) in exact.points.iter().zip(&other.points) {
        assert!(p.cross_entropy <= q.cross_entropy);
        assert!((p.cross_entropy - p.entropy).abs() < 1e-12);
    }
}

#[test]
fn entropy_uses_the_exact_pmf() {
    let config = LatticeConfig::new(2, 1).unwrap();
    let iota = AbmIntervention::Init { v: ParamVector::new(0.0, 0.0, 0.0).unwrap(), a: 0.0 };
    let table = exact_pushforward(&config, &iota.apply_to_abm(1).unwrap()).unwrap();
    assert_eq!(table.entropy(), 0.0);
}

#[test]
fn counterfactual_without_transmission_shows_no_gap() {
    let config = LatticeConfig::new(4, 16).unwrap();
    let pair = TrainedPair::new(Family::LodeRnn, 16, 16, &mut RngStream::new(2)).unwrap();
    let v = ParamVector::new(0.0, 0.3, 0.1).unwrap();
    let cf = lockdown_counterfactual(&pair, &config, v, 0.3, 7, 50, 4).unwrap();
    assert_eq!(cf.abm_lock, cf.abm_nolock);
    assert_eq!(cf.abm_gap(), 0.0);
    assert_eq!(cf.abm_lock.len(), 17);
    let mut buf = Vec::new();
    cf.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 18);
}

#[test]
fn window_gap_averages_the_lockdown_steps() {
    let lock = vec![0.0; 20];
    let mut nolock = vec![0.0; 20];
    nolock[7..=12].fill(6.0);
    nolock[13] = 100.0;
    assert_eq!(window_gap(&lock, &nolock, 7), -6.0);
}
