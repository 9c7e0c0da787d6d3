mod common;

use std::collections::BTreeMap;

use common::*;
use rand::Rng as _;
use sparselab::dst::{
    drop_fraction, extract_lottery, make_scratch, prune_step, select_drop_grow, update_masks, DropSchedule,
    DstConfig, DstMethod, PruneConfig, PruneScope,
};
use sparselab::init::InitScheme;
use sparselab::rng::seeded;
use sparselab::schedule::LrSchedule;
use sparselab::{Mask, NetworkSpec};

/// Replays SET growth independently: uniform draws over all positions of
/// the layer, accepted when the position was inactive before the update
/// and not already taken.
fn set_oracle(mask: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    let n = mask.len();
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    let free = mask.iter().filter(|m| !**m).count();
    while out.len() < k.min(free) {
        let p: usize = rng.gen_range(0..n);
        if !mask[p] && !taken[p] {
            taken[p] = true;
            out.push(p);
        }
    }
    out
}

#[test]
fn set_growth_matches_rejection_sampling_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let mask: Vec<bool> = (0..100).map(|_| r.gen_bool(0.3)).collect();
        let w: Vec<f64> = (0..100).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = vec![0.0; 100];
        let active = mask.iter().filter(|m| **m).count();
        let k = (0.3 * active as f64).round() as usize;
        let (dropped, grown) = select_drop_grow(&w, &mask, &g, DstMethod::Set, k, &mut seeded(seed));
        assert_eq!(grown, set_oracle(&mask, k, seed));
        for p in &dropped {
            assert!(!grown.contains(p));
        }
    }
}

fn sparse_net(seed: u64) -> sparselab::MaskedNetwork {
    random_net(&NetworkSpec::mlp(&[30, 20, 10], true), 0.8, seed)
}

fn dense_grad(net: &sparselab::MaskedNetwork, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..net.param_count()).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn updates_conserve_counts_and_zero_grown_weights() {
    for method in [DstMethod::Set, DstMethod::Rigl, DstMethod::RiglInverted] {
        for seed in 0..5 {
            let mut net = sparse_net(seed);
            let before: Vec<usize> = net.weighted().map(|l| l.mask().active()).collect();
            let old_masks = net.masks();
            let g = dense_grad(&net, seed + 50);
            let rep = update_masks(&mut net, &g, method, 0.3, 100, &mut seeded(seed)).unwrap();
            let after: Vec<usize> = net.weighted().map(|l| l.mask().active()).collect();
            assert_eq!(before, after);
            assert_eq!(rep.n_dropped(), rep.n_grown());
            assert_eq!(rep.shortfall(), 0);
            for lu in &rep.layers {
                let layer = net.layer(lu.layer);
                for &p in &lu.grown {
                    assert!(!old_masks[lu.layer].get(p));
                    assert!(layer.mask().get(p));
                    assert_eq!(layer.weights().data()[p], 0.0);
                }
                for &p in &lu.dropped {
                    assert!(!layer.mask().get(p));
                    assert_eq!(layer.weights().data()[p], 0.0);
                }
            }
        }
    }
}

#[test]
fn updates_are_deterministic() {
    let run = |seed| {
        let mut net = sparse_net(3);
        let mut masks = Vec::new();
        for t in 1..=5 {
            let g = dense_grad(&net, t);
            update_masks(&mut net, &g, DstMethod::Set, 0.2, t, &mut seeded(seed + t)).unwrap();
            masks.push(net.masks());
        }
        masks
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn shortfall_when_pool_is_too_small() {
    let w = [0.4, 0.1, 0.2, 0.3, 0.0];
    let mask = [true, true, true, true, false];
    let g = [0.0; 5];
    let (d, gr) = select_drop_grow(&w, &mask, &g, DstMethod::Rigl, 3, &mut seeded(0));
    assert_eq!(d, vec![1, 2, 3]);
    assert_eq!(gr, vec![4]);
}

#[test]
fn rigl_ties_break_to_lowest_index() {
    let w = [0.5, 0.2, 0.2, 0.0, 0.0, 0.0];
    let mask = [true, true, true, false, false, false];
    let g = [0.0, 0.0, 0.0, -0.7, 0.7, 0.1];
    let (d, gr) = select_drop_grow(&w, &mask, &g, DstMethod::Rigl, 1, &mut seeded(0));
    assert_eq!((d, gr), (vec![1], vec![3]));
}

#[test]
fn drop_fraction_schedules() {
    let lr = LrSchedule::Cosine { lr0: 0.1, total_steps: 1000 };
    let mut cfg = DstConfig {
        method: DstMethod::Rigl,
        drop_fraction: 0.3,
        frequency: 10,
        end_step: 800,
        schedule: DropSchedule::Cosine,
    };
    assert_eq!(drop_fraction(&cfg, 0, &lr), 0.3);
    assert!(drop_fraction(&cfg, 800, &lr).abs() < 1e-15);
    assert!((drop_fraction(&cfg, 400, &lr) - 0.15).abs() < 1e-12);
    assert_eq!(drop_fraction(&cfg, 801, &lr), 0.0);
    cfg.schedule = DropSchedule::LrCoupled;
    assert_eq!(drop_fraction(&cfg, 0, &lr), 0.3);
    let want = 0.3 * lr.at(500) / 0.1;
    assert!((drop_fraction(&cfg, 500, &lr) - want).abs() < 1e-15);
    assert!(cfg.is_update_step(790) && !cfg.is_update_step(800) && !cfg.is_update_step(0));
}

#[test]
fn cubic_pruning_schedule() {
    let cfg = PruneConfig {
        target_sparsity: 0.9,
        start_step: 100,
        end_step: 300,
        frequency: 25,
        scope: PruneScope::PerLayer,
    };
    assert_eq!(cfg.sparsity_at(100), 0.0);
    assert!((cfg.sparsity_at(300) - 0.9).abs() < 1e-15);
    assert!((cfg.sparsity_at(200) - 0.875 * 0.9).abs() < 1e-12);
}

#[test]
fn pruning_is_monotone_and_reaches_target() {
    for scope in [PruneScope::PerLayer, PruneScope::Global] {
        let mut net = random_net(&NetworkSpec::mlp(&[40, 30, 10], true), 0.0, 4);
        let cfg = PruneConfig {
            target_sparsity: 0.95,
            start_step: 10,
            end_step: 95,
            frequency: 20,
            scope,
        };
        let mut prev = net.active_weights();
        let mut prev_masks = net.masks();
        for t in 0..120 {
            if cfg.is_prune_step(t) {
                prune_step(&mut net, &cfg, t);
            }
            let now = net.active_weights();
            assert!(now <= prev);
            for (a, b) in prev_masks.iter().zip(net.masks()) {
                assert!(a.bits().iter().zip(b.bits()).all(|(x, y)| *x || !*y), "regrowth");
            }
            prev = now;
            prev_masks = net.masks();
        }
        assert!((net.global_sparsity() - 0.95).abs() < 0.005);
        for l in net.weighted() {
            for (w, m) in l.weights().data().iter().zip(l.mask().bits()) {
                assert!(*m || *w == 0.0);
            }
        }
    }
}

#[test]
fn lottery_extraction_and_scratch() {
    let init = random_net(&NetworkSpec::mlp(&[20, 12, 4], true), 0.0, 1);
    let mut pruned = random_net(&NetworkSpec::mlp(&[20, 12, 4], true), 0.0, 2);
    let cfg = PruneConfig {
        target_sparsity: 0.9,
        start_step: 0,
        end_step: 1,
        frequency: 1,
        scope: PruneScope::PerLayer,
    };
    prune_step(&mut pruned, &cfg, 1);
    let snaps = BTreeMap::from([(0, init.clone())]);
    assert!(extract_lottery(&snaps, &pruned, 5).is_err());
    let lt = extract_lottery(&snaps, &pruned, 0).unwrap();
    assert_eq!(lt.masks, pruned.masks());
    for ((a, b), m) in lt.rewound.params().iter().zip(init.params()).zip(lt.rewound.param_mask()) {
        assert_eq!(*a, if m { b } else { 0.0 });
    }

    let (s1, _) = make_scratch(&init, &lt.masks, InitScheme::per_neuron(), &mut seeded(9)).unwrap();
    let (s2, _) = make_scratch(&init, &lt.masks, InitScheme::per_neuron(), &mut seeded(9)).unwrap();
    assert_eq!(s1.params(), s2.params());
    assert_eq!(s1.masks(), lt.masks);
    assert_ne!(s1.params(), lt.rewound.params());
}

#[test]
fn scratch_schemes_differ_on_heterogeneous_masks() {
    // Row 0 has fan-in 2, row 1 fan-in 40: per-neuron variances differ by
    // 20x, masked-dense ones are equal.
    let template = random_net(&NetworkSpec::mlp(&[50, 2], false), 0.0, 0);
    let mut bits = vec![false; 100];
    bits[0] = true;
    bits[1] = true;
    for b in bits.iter_mut().skip(50).take(40) {
        *b = true;
    }
    let masks = vec![Mask::from_bits(vec![2, 50], bits).unwrap()];
    let var_of = |scheme, row: usize| {
        let mut xs = Vec::new();
        for s in 0..2000 {
            let (n, _) = make_scratch(&template, &masks, scheme, &mut seeded(s)).unwrap();
            let w = n.layer(0).weights().data();
            xs.extend(w[row * 50..row * 50 + 50].iter().zip(&masks[0].bits()[row * 50..]).filter(|(_, m)| **m).map(|(x, _)| *x));
        }
        xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
    };
    let pn = (var_of(InitScheme::per_neuron(), 0), var_of(InitScheme::per_neuron(), 1));
    let md = (var_of(InitScheme::masked_dense(), 0), var_of(InitScheme::masked_dense(), 1));
    assert!(pn.0 / pn.1 > 10.0, "{pn:?}");
    assert!((md.0 / md.1 - 1.0).abs() < 0.15, "{md:?}");
}
