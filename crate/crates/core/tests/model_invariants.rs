//! Structural properties of the dual-branch model checked against
//! independent hand evaluations.

use pointcon::geometry::{patchify, PatchSet, PointCloud};
use pointcon::model::{
    batch_rows, make_mask, Branch, Graph, MaskSpec, Model, ModelConfig, PatchBatch, Sharing,
};
use pointcon::numerics::{ParamStore, Tape, Tensor, Var};
use pointcon::synthdata::{generate_shape, ShapeClass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn set(store: &mut ParamStore<f64>, name: &str, shape: &[usize], data: Vec<f64>) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn small_config(dim: usize, n: usize, k: usize) -> ModelConfig {
    ModelConfig {
        depth: 1,
        dim,
        heads: 1,
        mlp_ratio: 2,
        n_patches: n,
        k,
        mask_ratio: 0.5,
        drop_path: 0.0,
        proj_hidden: dim,
        ..ModelConfig::micro()
    }
}

fn cloud(seed: u64) -> PointCloud {
    generate_shape(ShapeClass::ALL[seed as usize % 8], 128, seed).unwrap()
}

fn patch_sets(config: &ModelConfig, seeds: &[u64]) -> Vec<PatchSet> {
    seeds
        .iter()
        .map(|&s| patchify(&cloud(s), config.n_patches, config.k, 0).unwrap())
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn center_embedding_matches_hand_evaluated_mlp() {
    let config = small_config(4, 4, 2);
    let (model, mut store) = Model::init::<f64>(&config, 0).unwrap();
    let w1: Vec<f64> = (0..12).map(|i| 0.05 * (i as f64 - 5.0)).collect();
    let b1 = vec![0.01, -0.02, 0.03, 0.0];
    let w2: Vec<f64> = (0..16).map(|i| 0.03 * ((i * 7 % 11) as f64 - 5.0)).collect();
    let b2 = vec![0.0, 0.1, -0.1, 0.05];
    set(&mut store, "pos.fc1.w", &[3, 4], w1.clone());
    set(&mut store, "pos.fc1.b", &[4], b1.clone());
    set(&mut store, "pos.fc2.w", &[4, 4], w2.clone());
    set(&mut store, "pos.fc2.b", &[4], b2.clone());
    let centers = [[0.2, -0.4, 0.9], [-0.7, 0.1, 0.3]];

    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let x = g.tape.input(Tensor::from_rows(&centers.map(|c| c.to_vec())).unwrap());
    let e = model.embed_centers(&mut g, x).unwrap();
    let got = tape.value(e).clone();

    for (r, c) in centers.iter().enumerate() {
        let h: Vec<f64> = (0..4)
            .map(|j| gelu(b1[j] + (0..3).map(|i| c[i] * w1[i * 4 + j]).sum::<f64>()))
            .collect();
        for j in 0..4 {
            let want = b2[j] + (0..4).map(|i| h[i] * w2[i * 4 + j]).sum::<f64>();
            assert!((got.row(r)[j] - want).abs() < 1e-12, "row {r} col {j}: {} vs {want}", got.row(r)[j]);
        }
    }
}

#[test]
fn zero_weights_give_zero_embeddings() {
    let config = small_config(4, 4, 2);
    let (model, mut store) = Model::init::<f64>(&config, 0).unwrap();
    for name in ["pos.fc1.w", "pos.fc2.w", "patch.fc1.w", "patch.fc2.w", "patch.fc3.w", "patch.fc4.w"] {
        let id = store.id(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let c = g.tape.input(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
    let p = g.tape.input(Tensor::zeros(&[8, 3]));
    let e_c = model.embed_centers(&mut g, c).unwrap();
    let e_s = model.embed_patches(&mut g, p, 2).unwrap();
    assert!(tape.value(e_c).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(e_s).data().iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_centers_give_duplicated_rows() {
    let config = small_config(8, 4, 2);
    let (model, store) = Model::init::<f64>(&config, 3).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let c = g
        .tape
        .input(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.4], vec![0.1, 0.2, 0.3]]).unwrap());
    let e = model.embed_centers(&mut g, c).unwrap();
    let v = tape.value(e);
    assert_eq!(v.row(0), v.row(2));
    assert_ne!(v.row(0), v.row(1));
}

#[test]
fn patch_embedding_matches_hand_evaluated_pointnet() {
    // dim 4 gives a hidden width of 2; one patch of k = 2 points
    let config = small_config(4, 4, 2);
    let (model, mut store) = Model::init::<f64>(&config, 0).unwrap();
    let c1 = config.pointnet_hidden();
    assert_eq!(c1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.8..0.8)).collect() };
    let (w1, b1, w2, b2) = (draw(6), draw(2), draw(4), draw(2));
    let (w3, b3, w4, b4) = (draw(16), draw(4), draw(16), draw(4));
    set(&mut store, "patch.fc1.w", &[3, 2], w1.clone());
    set(&mut store, "patch.fc1.b", &[2], b1.clone());
    set(&mut store, "patch.fc2.w", &[2, 2], w2.clone());
    set(&mut store, "patch.fc2.b", &[2], b2.clone());
    set(&mut store, "patch.fc3.w", &[4, 4], w3.clone());
    set(&mut store, "patch.fc3.b", &[4], b3.clone());
    set(&mut store, "patch.fc4.w", &[4, 4], w4.clone());
    set(&mut store, "patch.fc4.b", &[4], b4.clone());
    let pts = [[0.3, -0.1, 0.2], [-0.2, 0.4, 0.0]];

    let affine = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out)
            .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
            .collect()
    };
    let local: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            let h: Vec<f64> = affine(p, &w1, &b1, 2).into_iter().map(gelu).collect();
            affine(&h, &w2, &b2, 2)
        })
        .collect();
    let pooled: Vec<f64> = (0..2).map(|j| local[0][j].max(local[1][j])).collect();
    let second: Vec<Vec<f64>> = local
        .iter()
        .map(|l| {
            let x = [pooled[0], pooled[1], l[0], l[1]];
            let h: Vec<f64> = affine(&x, &w3, &b3, 4).into_iter().map(gelu).collect();
            affine(&h, &w4, &b4, 4)
        })
        .collect();
    let want: Vec<f64> = (0..4).map(|j| second[0][j].max(second[1][j])).collect();

    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let p = g.tape.input(Tensor::from_rows(&pts.map(|p| p.to_vec())).unwrap());
    let e = model.embed_patches(&mut g, p, 2).unwrap();
    for j in 0..4 {
        assert!((tape.value(e).data()[j] - want[j]).abs() < 1e-12);
    }
}

#[test]
fn permuting_points_within_patches_leaves_patch_embeddings_bitwise_unchanged() {
    let config = ModelConfig {
        n_patches: 8,
        k: 8,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f32>(&config, 5).unwrap();
    let sets = patch_sets(&config, &[1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let permuted: Vec<PatchSet> = sets
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for i in 0..s.n {
                let mut p = s.patch(i).to_vec();
                for a in (1..p.len()).rev() {
                    p.swap(a, rng.random_range(0..=a));
                }
                s.patches[i * s.k..(i + 1) * s.k].copy_from_slice(&p);
            }
            s
        })
        .collect();
    let embed = |sets: &[PatchSet]| {
        let batch = PatchBatch::<f32>::from_patch_sets(sets).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let (_, e_s) = model.embed(&mut g, &batch).unwrap();
        tape.value(e_s).clone()
    };
    assert_eq!(embed(&sets), embed(&permuted));
}

#[test]
fn translation_moves_center_embeddings_only() {
    let config = ModelConfig {
        n_patches: 16,
        k: 8,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f32>(&config, 5).unwrap();
    let base = cloud(4);
    let shift = [0.25f32, -0.5, 0.125];
    let moved = PointCloud {
        points: base.points.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect(),
        label: base.label,
    };
    let embed = |c: &PointCloud| {
        let set = patchify(c, config.n_patches, config.k, 0).unwrap();
        let batch = PatchBatch::<f32>::from_patch_sets(&[set]).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let (e_c, e_s) = model.embed(&mut g, &batch).unwrap();
        (tape.value(e_c).clone(), tape.value(e_s).clone())
    };
    let (c0, s0) = embed(&base);
    let (c1, s1) = embed(&moved);
    let max_diff = s0.data().iter().zip(s1.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(max_diff <= 1e-5, "surrounding embeddings moved by {max_diff}");
    let c_diff = c0.data().iter().zip(c1.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(c_diff > 1e-3);
}

/// Element-wise oracle for the branch inputs of one sample.
fn branch_oracle(e_c: &[Vec<f64>], e_s: &[Vec<f64>], m_c: &[f64], m_s: &[f64], mask: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut z_c = Vec::new();
    let mut z_s = Vec::new();
    for i in 0..e_c.len() {
        let masked = mask.contains(&i);
        z_c.push((0..e_c[i].len()).map(|j| if masked { m_c[j] + e_s[i][j] } else { e_c[i][j] + e_s[i][j] }).collect());
        z_s.push((0..e_c[i].len()).map(|j| if masked { e_c[i][j] + m_s[j] } else { e_c[i][j] + e_s[i][j] }).collect());
    }
    (z_c, z_s)
}

fn branches(model: &Model, store: &ParamStore<f64>, e_c: &Tensor<f64>, e_s: &Tensor<f64>, flags: &[bool]) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, store);
    let a = g.tape.input(e_c.clone());
    let b = g.tape.input(e_s.clone());
    let (z_c, z_s) = model.build_branches(&mut g, a, b, flags).unwrap();
    (tape.value(z_c).clone(), tape.value(z_s).clone())
}

#[test]
fn branch_inputs_match_scripted_oracle() {
    let config = small_config(4, 4, 2);
    let (model, store) = Model::init::<f64>(&config, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e_c = random_tensor(&mut rng, &[4, 4]);
    let e_s = random_tensor(&mut rng, &[4, 4]);
    let mask = MaskSpec::from_indices(4, vec![3, 1]).unwrap();
    let (z_c, z_s) = branches(&model, &store, &e_c, &e_s, &mask.flags());
    let m_c = store.value(model.mask_c).data().to_vec();
    let m_s = store.value(model.mask_s).data().to_vec();
    let (oc, os) = branch_oracle(&rows(&e_c), &rows(&e_s), &m_c, &m_s, &mask.indices);
    assert_eq!(rows(&z_c), oc);
    assert_eq!(rows(&z_s), os);
}

#[test]
fn empty_mask_gives_plain_sum_in_both_branches() {
    let config = small_config(4, 4, 2);
    let (model, store) = Model::init::<f64>(&config, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e_c = random_tensor(&mut rng, &[4, 4]);
    let e_s = random_tensor(&mut rng, &[4, 4]);
    let (z_c, z_s) = branches(&model, &store, &e_c, &e_s, &[false; 4]);
    let sum: Vec<f64> = e_c.data().iter().zip(e_s.data()).map(|(a, b)| a + b).collect();
    assert_eq!(z_c.data(), &sum[..]);
    assert_eq!(z_s.data(), &sum[..]);
}

#[test]
fn zero_tokens_and_centers_expose_surroundings() {
    let config = small_config(4, 4, 2);
    let (model, mut store) = Model::init::<f64>(&config, 2).unwrap();
    set(&mut store, "mask.c", &[1, 4], vec![0.0; 4]);
    set(&mut store, "mask.s", &[1, 4], vec![0.0; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e_c = Tensor::zeros(&[4, 4]);
    let e_s = random_tensor(&mut rng, &[4, 4]);
    let flags = [true, false, false, true];
    let (z_c, z_s) = branches(&model, &store, &e_c, &e_s, &flags);
    assert_eq!(z_c.data(), e_s.data());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            assert!(z_s.row(i).iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(z_s.row(i), e_s.row(i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unmasked_rows_agree_exactly(seed in 0u64..1000, n in 2usize..12, ratio in 0.1f64..0.9) {
        let config = small_config(4, n, 2);
        let (model, store) = Model::init::<f64>(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e_c = random_tensor(&mut rng, &[n, 4]);
        let e_s = random_tensor(&mut rng, &[n, 4]);
        let ratio = ratio.clamp(0.5 / n as f64 + 1e-9, 1.0 - 0.5 / n as f64 - 1e-9);
        let mask = make_mask(n, ratio, &mut rng).unwrap();
        let flags = mask.flags();
        let (z_c, z_s) = branches(&model, &store, &e_c, &e_s, &flags);
        for (i, &f) in flags.iter().enumerate() {
            if !f {
                prop_assert_eq!(z_c.row(i), z_s.row(i));
            } else {
                prop_assert_ne!(z_c.row(i), z_s.row(i));
            }
        }
    }

    #[test]
    fn masked_slices_are_gathered_in_ascending_index_order(seed in 0u64..500) {
        let config = ModelConfig { n_patches: 8, k: 4, ..ModelConfig::micro() };
        let (model, store) = Model::init::<f64>(&config, seed).unwrap();
        let sets = patch_sets(&config, &[seed, seed + 1]);
        let batch = PatchBatch::<f64>::from_patch_sets(&sets).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<MaskSpec> = (0..2).map(|_| make_mask(8, 0.5, &mut rng).unwrap()).collect();
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let f = model.forward_dual(&mut g, &batch, &masks).unwrap();
        let (h_c, h_s) = (tape.value(f.h_c).clone(), tape.value(f.h_s).clone());
        let (v_c, v_s) = (tape.value(f.v_c).clone(), tape.value(f.v_s).clone());
        // oracle: walk each sample's sorted indices
        let mut r = 0;
        for (b, m) in masks.iter().enumerate() {
            for i in 0..8 {
                if m.indices.contains(&i) {
                    prop_assert_eq!(v_c.row(r), h_c.row(b * 8 + i));
                    prop_assert_eq!(v_s.row(r), h_s.row(b * 8 + i));
                    r += 1;
                }
            }
        }
        prop_assert_eq!(r, v_c.rows());
    }
}

#[test]
fn single_masked_index_extracts_that_row() {
    let config = ModelConfig {
        n_patches: 8,
        k: 4,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f64>(&config, 1).unwrap();
    let sets = patch_sets(&config, &[3]);
    let batch = PatchBatch::<f64>::from_patch_sets(&sets).unwrap();
    for indices in [vec![2], (0..8).filter(|&i| i != 5).collect::<Vec<_>>()] {
        let mask = MaskSpec::from_indices(8, indices.clone()).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let f = model.forward_dual(&mut g, &batch, &[mask]).unwrap();
        let v = tape.value(f.v_c);
        assert_eq!(v.rows(), indices.len());
        assert_eq!(v.row(0), tape.value(f.h_c).row(indices[0]));
    }
}

#[test]
fn positive_pairs_come_from_the_same_patch() {
    // Depth 0 with identity projector weights maps each row on its own, so a
    // per-patch tag in the first coordinate survives to the masked slices.
    let config = ModelConfig {
        depth: 0,
        dim: 4,
        heads: 1,
        n_patches: 6,
        k: 2,
        proj_hidden: 4,
        ..ModelConfig::micro()
    };
    let (model, mut store) = Model::init::<f64>(&config, 0).unwrap();
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    set(&mut store, "encoder.proj.fc1.w", &[4, 4], eye.clone());
    set(&mut store, "encoder.proj.fc2.w", &[4, 4], eye);
    set(&mut store, "mask.c", &[1, 4], vec![0.0; 4]);
    set(&mut store, "mask.s", &[1, 4], vec![0.0; 4]);
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    // tag = 1 + sample·N + patch in the first coordinate of both embeddings
    let tags: Vec<f64> = (0..12).map(|r| 1.0 + r as f64).collect();
    let e = Tensor::from_fn(&[12, 4], |i| if i % 4 == 0 { tags[i / 4] } else { 0.0 });
    let e_c = g.tape.input(e.clone());
    let e_s = g.tape.input(e);
    let masks = [
        MaskSpec::from_indices(6, vec![0, 4, 5]).unwrap(),
        MaskSpec::from_indices(6, vec![1, 2, 3]).unwrap(),
    ];
    let flags: Vec<bool> = masks.iter().flat_map(|m| m.flags()).collect();
    let (z_c, z_s) = model.build_branches(&mut g, e_c, e_s, &flags).unwrap();
    let (oc, os) = model.encode_pair(&mut g, z_c, z_s, 2).unwrap();
    let rows_idx = batch_rows(&masks);
    let v_c = g.tape.gather_rows(oc.h, &rows_idx).unwrap();
    let v_s = g.tape.gather_rows(os.h, &rows_idx).unwrap();
    for (r, &row) in rows_idx.iter().enumerate() {
        let want = gelu(tags[row]);
        assert!((tape.value(v_c).row(r)[0] - want).abs() < 1e-12);
        assert!((tape.value(v_s).row(r)[0] - want).abs() < 1e-12);
    }
}

#[test]
fn shared_encoder_gives_identical_branch_outputs() {
    let config = ModelConfig {
        n_patches: 8,
        k: 4,
        drop_path: 0.1,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f32>(&config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_fn(&[16, config.dim], |_| rng.random_range(-1.0f32..1.0));
    let run = |branch: Branch| {
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let x = g.tape.input(z.clone());
        let e = model.encode(&mut g, branch, x, 2).unwrap();
        tape.value(e.h).clone()
    };
    assert_eq!(run(Branch::Center), run(Branch::Surround));
    assert_eq!(run(Branch::Center), run(Branch::Center));

    let split = ModelConfig {
        sharing: Sharing::NonShared,
        ..config
    };
    let (model, store) = Model::init::<f32>(&split, 6).unwrap();
    let run = |branch: Branch| {
        let mut tape = Tape::new();
        let mut g = Graph::eval(&mut tape, &store);
        let x = g.tape.input(z.clone());
        let e = model.encode(&mut g, branch, x, 2).unwrap();
        tape.value(e.h).clone()
    };
    assert_ne!(run(Branch::Center), run(Branch::Surround));
}

#[test]
fn stacked_pair_encoding_matches_separate_passes() {
    let config = ModelConfig {
        n_patches: 8,
        k: 4,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f64>(&config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, &[16, config.dim]);
    let b = random_tensor(&mut rng, &[16, config.dim]);
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let (va, vb) = (g.tape.input(a.clone()), g.tape.input(b));
    let (ea, eb) = model.encode_pair(&mut g, va, vb, 2).unwrap();
    let sa = model.encode(&mut g, Branch::Center, va, 2).unwrap();
    let (ha, hb, hs) = (tape.value(ea.h).clone(), tape.value(eb.h).clone(), tape.value(sa.h).clone());
    for (x, y) in ha.data().iter().zip(hs.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_ne!(ha, hb);
}

#[test]
fn depth_zero_encoder_is_the_projector() {
    let config = ModelConfig {
        depth: 0,
        n_patches: 4,
        k: 2,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f64>(&config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random_tensor(&mut rng, &[4, config.dim]);
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let x = g.tape.input(z.clone());
    let e = model.encode(&mut g, Branch::Center, x, 1).unwrap();
    let enc = model.encoder(Branch::Center);
    let w1 = store.value(enc.proj1.w);
    let b1 = store.value(enc.proj1.b.unwrap());
    let w2 = store.value(enc.proj2.w);
    let b2 = store.value(enc.proj2.b.unwrap());
    let (d, hdim) = (config.dim, config.proj_hidden);
    for r in 0..4 {
        let h: Vec<f64> = (0..hdim)
            .map(|j| gelu(b1.data()[j] + (0..d).map(|i| z.row(r)[i] * w1.data()[i * hdim + j]).sum::<f64>()))
            .collect();
        for j in 0..d {
            let want = b2.data()[j] + (0..hdim).map(|i| h[i] * w2.data()[i * d + j]).sum::<f64>();
            assert!((tape.value(e.h).row(r)[j] - want).abs() < 1e-12);
        }
    }
    assert_eq!(tape.value(e.tokens).data(), z.data());
}

#[test]
fn attention_weights_match_hand_evaluated_softmax() {
    let config = small_config(4, 3, 2);
    let (model, mut store) = Model::init::<f64>(&config, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.9..0.9)).collect() };
    let (wq, bq, wk, bk) = (draw(16), draw(4), draw(16), draw(4));
    let (g1, b1) = (draw(4), draw(4));
    set(&mut store, "encoder.block0.attn.q.w", &[4, 4], wq.clone());
    set(&mut store, "encoder.block0.attn.q.b", &[4], bq.clone());
    set(&mut store, "encoder.block0.attn.k.w", &[4, 4], wk.clone());
    set(&mut store, "encoder.block0.attn.k.b", &[4], bk.clone());
    set(&mut store, "encoder.block0.ln1.g", &[4], g1.clone());
    set(&mut store, "encoder.block0.ln1.b", &[4], b1.clone());
    let z = Tensor::from_rows(&[
        vec![0.5, -1.0, 0.25, 2.0],
        vec![1.5, 0.0, -0.5, 0.3],
        vec![-0.7, 0.8, 0.1, -0.2],
    ])
    .unwrap();

    let ln = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        (0..4).map(|j| (x[j] - mean) / (var + 1e-5).sqrt() * g1[j] + b1[j]).collect()
    };
    let proj = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..4).map(|j| b[j] + (0..4).map(|i| x[i] * w[i * 4 + j]).sum::<f64>()).collect()
    };
    let normed: Vec<Vec<f64>> = (0..3).map(|i| ln(z.row(i))).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|x| proj(x, &wq, &bq)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| proj(x, &wk, &bk)).collect();

    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let x = g.tape.input(z);
    let e = model.encode(&mut g, Branch::Center, x, 1).unwrap();
    let attn = tape.value(e.attention[0]);
    assert_eq!(attn.shape(), &[1, 3, 3]);
    for i in 0..3 {
        let s: Vec<f64> = (0..3).map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0).collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..3 {
            let want = (s[j] - mx).exp() / denom;
            assert!((attn.data()[i * 3 + j] - want).abs() < 1e-6, "({i},{j}) {} vs {want}", attn.data()[i * 3 + j]);
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_training_forward_is_seeded() {
    let config = ModelConfig {
        n_patches: 8,
        k: 4,
        drop_path: 0.5,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f32>(&config, 6).unwrap();
    let sets = patch_sets(&config, &[0, 1, 2, 3]);
    let batch = PatchBatch::<f32>::from_patch_sets(&sets).unwrap();
    let run = |seed: Option<u64>| {
        let mut tape = Tape::new();
        let mut g = match seed {
            Some(s) => Graph::train(&mut tape, &store, s),
            None => Graph::eval(&mut tape, &store),
        };
        let t: Var = model.forward_tokens(&mut g, &batch).unwrap();
        tape.value(t).clone()
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some(1)), run(Some(1)));
    assert_ne!(run(Some(1)), run(None));
}

#[test]
fn global_features_are_mean_and_max_of_tokens() {
    let config = ModelConfig {
        n_patches: 8,
        k: 4,
        ..ModelConfig::micro()
    };
    let (model, store) = Model::init::<f64>(&config, 6).unwrap();
    let sets = patch_sets(&config, &[0, 1]);
    let batch = PatchBatch::<f64>::from_patch_sets(&sets).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::eval(&mut tape, &store);
    let tokens = model.forward_tokens(&mut g, &batch).unwrap();
    let feats = model.global_features(&mut g, &batch).unwrap();
    let (t, f) = (tape.value(tokens), tape.value(feats));
    let d = config.dim;
    assert_eq!(f.shape(), &[2, 2 * d]);
    for b in 0..2 {
        for j in 0..d {
            let col: Vec<f64> = (0..8).map(|i| t.row(b * 8 + i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((f.row(b)[j] - mean).abs() < 1e-12);
            assert_eq!(f.row(b)[d + j], max);
        }
    }
}
