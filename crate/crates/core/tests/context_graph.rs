mod common;

use cag_core::graph::{
    adjacency, fuse, graph_attention, init_graph, iterate, message_passing, select_neighbors, step,
    update_nodes, GraphParams, ModeFlags, Variant,
};
use cag_core::init::uniform;
use cag_core::pass::{check_gradients, Pass};
use cag_core::tensor::{GradCheckConfig, ParamStore, Tensor};
use common::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    store: ParamStore,
    params: GraphParams,
    visual: Tensor,
    u: Tensor,
    commands: Vec<Tensor>,
    sentence: Tensor,
}

fn fixture(d: usize, d_w: usize, n: usize, steps: usize, variant: Variant, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = GraphParams::register(&mut store, d, d_w, variant, &mut rng).unwrap();
    Fixture {
        store,
        params,
        visual: uniform(&mut rng, &[d, n], 1.0).unwrap(),
        u: uniform(&mut rng, &[d, 1], 1.0).unwrap(),
        commands: (0..steps).map(|_| uniform(&mut rng, &[d_w, 1], 1.0).unwrap()).collect(),
        sentence: uniform(&mut rng, &[d, 1], 1.0).unwrap(),
    }
}

fn flags(k: usize, t: usize) -> ModeFlags {
    ModeFlags {
        k,
        t,
        ..ModeFlags::default()
    }
}

#[test]
fn init_graph_stacks_visual_and_context() {
    let f = fixture(3, 2, 1, 0, Variant::Cag, 1);
    let pass = Pass::eval(&f.store);
    let v = pass.tape.constant(f.visual.clone());
    let u = pass.tape.constant(f.u.clone());
    let g = init_graph(&pass, v, Some(u)).unwrap();
    let nodes = pass.tape.tensor(g.nodes);
    assert_eq!(nodes.shape(), &[6, 1]);
    assert_eq!(nodes.col_vec(0), concat(&f.visual.col_vec(0), f.u.data()));

    let f = fixture(3, 2, 4, 0, Variant::Cag, 2);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), None).unwrap();
    let nodes = pass.tape.tensor(g.nodes);
    assert_eq!(nodes.shape(), &[6, 4]);
    assert!(nodes.data()[12..].iter().all(|&x| x == 0.0));
}

#[test]
fn adjacency_matches_direct_evaluation() {
    let (d, d_w, n) = (3, 2, 4);
    let f = fixture(d, d_w, n, 1, Variant::Cag, 3);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let q = pass.tape.constant(f.commands[0].clone());
    let a = pass.tape.tensor(adjacency(&pass, g.nodes, q, &f.params, Variant::Cag).unwrap());
    let nodes = mat(&pass.tape.tensor(g.nodes));
    let (w1, w2, w3) = (
        mat(f.store.get(f.params.w1)),
        mat(f.store.get(f.params.w2)),
        mat(f.store.get(f.params.w3)),
    );
    let gate = matvec(&w3, f.commands[0].data());
    for i in 0..n {
        for j in 0..n {
            let left = matvec(&w1, &col(&nodes, i));
            let right = had(&matvec(&w2, &col(&nodes, j)), &gate);
            assert!((a.at(i, j) - dot(&left, &right)).abs() < 1e-14);
        }
    }
    // Directed: the matrix is not symmetric for random parameters.
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a.at(i, j) - a.at(j, i)).abs())
        .fold(0.0, f64::max);
    assert!(asym > 1e-6, "max |A - Aᵀ| = {asym}");
}

#[test]
fn adjacency_degenerate_cases() {
    let f = fixture(3, 2, 1, 1, Variant::Cag, 4);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let q = pass.tape.constant(f.commands[0].clone());
    assert_eq!(pass.tape.shape(adjacency(&pass, g.nodes, q, &f.params, Variant::Cag).unwrap()), vec![1, 1]);

    let f = fixture(3, 2, 5, 1, Variant::Cag, 5);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let zero = pass.tape.constant(Tensor::zeros(&[2, 1]).unwrap());
    let a = pass.tape.tensor(adjacency(&pass, g.nodes, zero, &f.params, Variant::Cag).unwrap());
    assert!(a.data().iter().all(|&x| x == 0.0));
}

#[test]
fn dual_gate_of_ones_reduces_to_single_gate() {
    let (d, d_w, n) = (4, 3, 5);
    let mut f = fixture(d, d_w, n, 1, Variant::DualQ, 6);
    // q_w = e_0 and a first column of ones make W_3' q_w the all-ones vector.
    let dual = f.params.w3_dual.unwrap();
    let t = f.store.get_mut(dual);
    for r in 0..d {
        for c in 0..d_w {
            t.set(r, c, if c == 0 { 1.0 } else { 0.37 * (r + c) as f64 });
        }
    }
    let mut e0 = vec![0.0; d_w];
    e0[0] = 1.0;
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let q = pass.tape.constant(Tensor::column(&e0).unwrap());
    let dual_a = pass.tape.tensor(adjacency(&pass, g.nodes, q, &f.params, Variant::DualQ).unwrap());
    let single = pass.tape.tensor(adjacency(&pass, g.nodes, q, &f.params, Variant::Cag).unwrap());
    assert!(dual_a.max_abs_diff(&single) < 1e-14);
    // And the dual form generally differs once the gate is not uniform.
    let q2 = pass.tape.constant(f.commands[0].clone());
    let a1 = pass.tape.tensor(adjacency(&pass, g.nodes, q2, &f.params, Variant::DualQ).unwrap());
    let a2 = pass.tape.tensor(adjacency(&pass, g.nodes, q2, &f.params, Variant::Cag).unwrap());
    assert!(a1.max_abs_diff(&a2) > 1e-6);
}

#[test]
fn neighbor_selection_examples() {
    let a = Tensor::from_rows(&[vec![0.9, 0.1, 0.5], vec![0.2, 0.3, 0.1], vec![0.0, 0.0, 1.0]]).unwrap();
    let s = select_neighbors(&a, 2);
    assert_eq!(s[0], vec![0, 2]);
    assert_eq!(s[1], vec![0, 1]);
    assert_eq!(select_neighbors(&a, 3), vec![vec![0, 1, 2]; 3]);
    // K larger than n is clamped.
    assert_eq!(select_neighbors(&a, 7), vec![vec![0, 1, 2]; 3]);
}

#[test]
fn neighbor_relation_is_not_symmetric() {
    // Exhibit j ∈ S_i with i ∉ S_j on a random 4x4 matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = uniform(&mut rng, &[4, 4], 1.0).unwrap();
    let s = select_neighbors(&a, 2);
    let witness = (0..4).flat_map(|i| s[i].iter().map(move |&j| (i, j))).find(|&(i, j)| !s[j].contains(&i));
    assert!(witness.is_some(), "{s:?}");
}

#[test]
fn message_passing_single_neighbor_and_oracle() {
    let (d, d_w, n) = (3, 2, 3);
    let f = fixture(d, d_w, n, 1, Variant::Cag, 8);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let q = pass.tape.constant(f.commands[0].clone());
    let a_var = adjacency(&pass, g.nodes, q, &f.params, Variant::Cag).unwrap();
    let a = pass.tape.tensor(a_var);
    let nodes = mat(&pass.tape.tensor(g.nodes));
    let w4 = mat(f.store.get(f.params.w4));
    let gate = matvec(&mat(f.store.get(f.params.w5)), f.commands[0].data());
    let msg = |j: usize| had(&matvec(&w4, &col(&nodes, j)), &gate);

    let s1 = select_neighbors(&a, 1);
    let (b, m) = message_passing(&pass, g.nodes, a_var, &s1, q, &f.params).unwrap();
    assert_eq!(pass.tape.value(b).data(), &[1.0, 1.0, 1.0]);
    let m = pass.tape.tensor(m);
    for i in 0..n {
        assert!(max_abs(&m.col_vec(i), &msg(s1[i][0])) < 1e-14);
    }

    let s2 = select_neighbors(&a, 2);
    let (b, m) = message_passing(&pass, g.nodes, a_var, &s2, q, &f.params).unwrap();
    let (b, m) = (pass.tape.tensor(b), pass.tape.tensor(m));
    for i in 0..n {
        let w = softmax(&s2[i].iter().map(|&j| a.at(i, j)).collect::<Vec<_>>());
        assert!((b.row_vec(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(max_abs(&b.row_vec(i), &w) < 1e-14);
        let expected = weighted_sum(&s2[i].iter().map(|&j| msg(j)).collect::<Vec<_>>(), &w);
        assert!(max_abs(&m.col_vec(i), &expected) < 1e-14);
    }
}

#[test]
fn full_neighborhood_equals_dense_attention() {
    for seed in 0..100 {
        let n = 2 + (seed as usize % 6);
        let f = fixture(4, 3, n, 1, Variant::Cag, 100 + seed);
        let pass = Pass::eval(&f.store);
        let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
        let q = pass.tape.constant(f.commands[0].clone());
        let a_var = adjacency(&pass, g.nodes, q, &f.params, Variant::Cag).unwrap();
        let a = pass.tape.tensor(a_var);
        let (_, m) = message_passing(&pass, g.nodes, a_var, &select_neighbors(&a, n), q, &f.params).unwrap();
        let m = pass.tape.tensor(m);
        let nodes = mat(&pass.tape.tensor(g.nodes));
        let w4 = mat(f.store.get(f.params.w4));
        let gate = matvec(&mat(f.store.get(f.params.w5)), f.commands[0].data());
        let msgs: Vec<Vec<f64>> = (0..n).map(|j| had(&matvec(&w4, &col(&nodes, j)), &gate)).collect();
        for i in 0..n {
            let dense = weighted_sum(&msgs, &softmax(&a.row_vec(i)));
            assert!(max_abs(&m.col_vec(i), &dense) < 1e-10, "seed {seed} node {i}");
        }
    }
}

#[test]
fn update_identity_block_keeps_context() {
    let (d, d_w, n) = (3, 2, 4);
    let mut f = fixture(d, d_w, n, 1, Variant::Cag, 9);
    let w6 = f.store.get_mut(f.params.w6);
    for r in 0..d {
        for c in 0..2 * d {
            w6.set(r, c, if r == c { 1.0 } else { 0.0 });
        }
    }
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let zero = pass.tape.constant(Tensor::zeros(&[d, n]).unwrap());
    let next = update_nodes(&pass, &g, zero, &f.params).unwrap();
    assert_eq!(pass.tape.tensor(next.nodes), pass.tape.tensor(g.nodes));
    assert_eq!(next.step, 2);
}

#[test]
fn update_matches_direct_evaluation() {
    let (d, d_w, n) = (3, 2, 4);
    let f = fixture(d, d_w, n, 1, Variant::Cag, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let msgs = uniform(&mut rng, &[d, n], 1.0).unwrap();
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let next = update_nodes(&pass, &g, pass.tape.constant(msgs.clone()), &f.params).unwrap();
    let nodes = pass.tape.tensor(next.nodes);
    let w6 = mat(f.store.get(f.params.w6));
    for i in 0..n {
        let c = matvec(&w6, &concat(f.u.data(), &msgs.col_vec(i)));
        let col_i = nodes.col_vec(i);
        assert_eq!(&col_i[..d], f.visual.col_vec(i).as_slice());
        assert!(max_abs(&col_i[d..], &c) < 1e-14);
    }
}

#[test]
fn zero_steps_leave_graph_untouched_and_steps_compose() {
    let (d, d_w, n) = (4, 3, 5);
    let f = fixture(d, d_w, n, 2, Variant::Cag, 12);
    let fl = flags(2, 2);
    let pass = Pass::eval(&f.store);
    let v = pass.tape.constant(f.visual.clone());
    let u = pass.tape.constant(f.u.clone());
    let cmds: Vec<_> = f.commands.iter().map(|c| pass.tape.constant(c.clone())).collect();
    let init = init_graph(&pass, v, Some(u)).unwrap();

    let (same, recs) = iterate(&pass, init, &[], &f.params, &fl).unwrap();
    assert!(recs.is_empty());
    assert_eq!(pass.tape.tensor(same.nodes), pass.tape.tensor(init.nodes));

    let (two, recs) = iterate(&pass, init, &cmds, &f.params, &fl).unwrap();
    assert_eq!(recs.len(), 2);
    let (one, _) = iterate(&pass, init, &cmds[..1], &f.params, &fl).unwrap();
    let (manual, rec) = step(&pass, &one, cmds[1], &f.params, &fl).unwrap();
    assert_eq!(pass.tape.tensor(manual.nodes).data(), pass.tape.tensor(two.nodes).data());
    assert_eq!(rec.neighbors, recs[1].neighbors);

    // One step by hand from its four parts.
    let a = adjacency(&pass, init.nodes, cmds[0], &f.params, Variant::Cag).unwrap();
    let s = select_neighbors(&pass.tape.value(a), 2);
    let (_, m) = message_passing(&pass, init.nodes, a, &s, cmds[0], &f.params).unwrap();
    let by_hand = update_nodes(&pass, &init, m, &f.params).unwrap();
    assert_eq!(pass.tape.tensor(by_hand.nodes).data(), pass.tape.tensor(one.nodes).data());

    // The visual block never moves.
    for state in [init, one, two] {
        let nodes = pass.tape.tensor(state.nodes);
        for i in 0..n {
            assert_eq!(&nodes.col_vec(i)[..d], f.visual.col_vec(i).as_slice());
        }
    }
}

#[test]
fn shared_message_weights_reach_every_step() {
    let (d, d_w, n) = (4, 3, 5);
    let f = fixture(d, d_w, n, 3, Variant::Cag, 13);
    let fl = flags(2, 3);
    let run = |store: &ParamStore| {
        let pass = Pass::eval(store);
        let v = pass.tape.constant(f.visual.clone());
        let u = pass.tape.constant(f.u.clone());
        let cmds: Vec<_> = f.commands.iter().map(|c| pass.tape.constant(c.clone())).collect();
        let init = init_graph(&pass, v, Some(u)).unwrap();
        let (_, recs) = iterate(&pass, init, &cmds, &f.params, &fl).unwrap();
        recs.iter().map(|r| pass.tape.tensor(r.messages)).collect::<Vec<_>>()
    };
    let base = run(&f.store);
    let mut perturbed = f.store.clone();
    perturbed.get_mut(f.params.w4).data_mut()[0] += 0.1;
    let after = run(&perturbed);
    for (t, (a, b)) in base.iter().zip(&after).enumerate() {
        assert!(a.max_abs_diff(b) > 0.0, "step {} messages unchanged", t + 1);
    }
    // One W_4 regardless of T.
    assert_eq!(f.store.iter().filter(|(_, name, _)| name.ends_with(".w4")).count(), 1);
}

#[test]
fn graph_attention_cases() {
    let (d, d_w) = (3, 2);
    let f = fixture(d, d_w, 1, 0, Variant::Cag, 14);
    let pass = Pass::eval(&f.store);
    let q = pass.tape.constant(f.sentence.clone());
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let att = graph_attention(&pass, g.nodes, q, &f.params, false).unwrap();
    assert_eq!(pass.tape.tensor(att.embedding), pass.tape.tensor(g.nodes));

    // Identical nodes: any convex combination is the node itself.
    let same = Tensor::from_rows(&[vec![0.3; 4], vec![-0.2; 4], vec![0.9; 4]]).unwrap();
    let g = init_graph(&pass, pass.tape.constant(same), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let att = graph_attention(&pass, g.nodes, q, &f.params, false).unwrap();
    let e = pass.tape.tensor(att.embedding).into_data();
    assert!(max_abs(&e, &pass.tape.tensor(g.nodes).col_vec(0)) < 1e-15);

    // Uniform pooling is the column mean.
    let f = fixture(d, d_w, 4, 0, Variant::Cag, 15);
    let pass = Pass::eval(&f.store);
    let g = init_graph(&pass, pass.tape.constant(f.visual.clone()), Some(pass.tape.constant(f.u.clone()))).unwrap();
    let q = pass.tape.constant(f.sentence.clone());
    let att = graph_attention(&pass, g.nodes, q, &f.params, true).unwrap();
    let nodes = pass.tape.tensor(g.nodes);
    let mean: Vec<f64> = (0..2 * d).map(|r| nodes.row_vec(r).iter().sum::<f64>() / 4.0).collect();
    assert!(max_abs(&pass.tape.tensor(att.embedding).into_data(), &mean) < 1e-15);

    // Attention weights follow the direct formula.
    let att = graph_attention(&pass, g.nodes, q, &f.params, false).unwrap();
    let nm = mat(&nodes);
    let qg = matvec(&mat(f.store.get(f.params.w_g1)), f.sentence.data());
    let w2 = mat(f.store.get(f.params.w_g2));
    let pg = f.store.get(f.params.p_g).data().to_vec();
    let scores: Vec<f64> = (0..4).map(|j| dot(&pg, &tanh(&add(&qg, &matvec(&w2, &col(&nm, j)))))).collect();
    assert!(max_abs(pass.tape.value(att.alpha).data(), &softmax(&scores)) < 1e-14);
}

#[test]
fn fusion_cases() {
    let (d, d_w) = (3, 2);
    let mut f = fixture(d, d_w, 4, 0, Variant::Cag, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let e_g = uniform(&mut rng, &[2 * d, 1], 3.0).unwrap();
    let expected = {
        let we = mat(f.store.get(f.params.w_e));
        let joint = concat(&concat(e_g.data(), f.u.data()), f.sentence.data());
        tanh(&matvec(&we, &joint))
    };
    {
        let pass = Pass::eval(&f.store);
        let t = &pass.tape;
        let e = fuse(&pass, t.constant(e_g.clone()), t.constant(f.u.clone()), t.constant(f.sentence.clone()), &f.params).unwrap();
        let e = t.tensor(e).into_data();
        assert!(max_abs(&e, &expected) < 1e-14);
        assert!(e.iter().all(|x| x.abs() < 1.0));
    }
    f.store.get_mut(f.params.w_e).data_mut().fill(0.0);
    let pass = Pass::eval(&f.store);
    let t = &pass.tape;
    let e = fuse(&pass, t.constant(e_g), t.constant(f.u.clone()), t.constant(f.sentence.clone()), &f.params).unwrap();
    assert!(t.value(e).data().iter().all(|&x| x == 0.0));
}

#[test]
fn graph_is_permutation_equivariant() {
    let (d, d_w, n) = (4, 3, 6);
    let fl = flags(3, 2);
    let mut checked = 0;
    for seed in 0..40u64 {
        let f = fixture(d, d_w, n, 2, Variant::Cag, 200 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut pv = Tensor::zeros(&[d, n]).unwrap();
        for i in 0..n {
            for r in 0..d {
                pv.set(r, perm[i], f.visual.at(r, i));
            }
        }
        let run = |v: &Tensor| {
            let pass = Pass::eval(&f.store);
            let t = &pass.tape;
            let cmds: Vec<_> = f.commands.iter().map(|c| t.constant(c.clone())).collect();
            let init = init_graph(&pass, t.constant(v.clone()), Some(t.constant(f.u.clone()))).unwrap();
            let (fin, recs) = iterate(&pass, init, &cmds, &f.params, &fl).unwrap();
            let q = t.constant(f.sentence.clone());
            let att = graph_attention(&pass, fin.nodes, q, &f.params, false).unwrap();
            let e = fuse(&pass, att.embedding, t.constant(f.u.clone()), q, &f.params).unwrap();
            let adj: Vec<Tensor> = recs.iter().map(|r| t.tensor(r.adjacency)).collect();
            let nb: Vec<Vec<Vec<usize>>> = recs.iter().map(|r| r.neighbors.clone()).collect();
            (adj, nb, t.tensor(e).into_data())
        };
        let (a, s, e) = run(&f.visual);
        // Distinct values keep top-K free of ties.
        let distinct = a.iter().all(|m| {
            let mut v = m.data().to_vec();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[1] - w[0] > 1e-9)
        });
        if !distinct {
            continue;
        }
        checked += 1;
        let (pa, ps, pe) = run(&pv);
        for t in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    assert!((pa[t].at(perm[i], perm[j]) - a[t].at(i, j)).abs() < 1e-9);
                }
                let mut mapped: Vec<usize> = s[t][i].iter().map(|&j| perm[j]).collect();
                mapped.sort_unstable();
                assert_eq!(ps[t][perm[i]], mapped);
            }
        }
        assert!(max_abs(&e, &pe) < 1e-9);
    }
    assert!(checked >= 30, "only {checked} instances had distinct adjacency values");
}

#[test]
fn graph_gradients_match_finite_differences() {
    let (d, d_w, n) = (4, 3, 5);
    for variant in [Variant::Cag, Variant::DualQ] {
        let f = fixture(d, d_w, n, 2, variant, 18);
        let fl = ModeFlags {
            variant,
            ..flags(2, 2)
        };
        let report = check_gradients(&f.store, &GradCheckConfig::default(), |pass| {
            let t = &pass.tape;
            let cmds: Vec<_> = f.commands.iter().map(|c| t.constant(c.clone())).collect();
            let init = init_graph(pass, t.constant(f.visual.clone()), Some(t.constant(f.u.clone())))?;
            let (fin, _) = iterate(pass, init, &cmds, &f.params, &fl)?;
            let q = t.constant(f.sentence.clone());
            let att = graph_attention(pass, fin.nodes, q, &f.params, false)?;
            let e = fuse(pass, att.embedding, t.constant(f.u.clone()), q, &f.params)?;
            Ok(t.sum_all(t.mul(e, e)?)?)
        })
        .unwrap();
        assert!(report.passed, "{variant:?}: {report:#?}");
    }
}
