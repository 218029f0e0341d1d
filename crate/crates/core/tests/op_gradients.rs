//! Finite-difference checks of every backward rule on random instances.

use pointcon::numerics::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use pointcon::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar read-out with random weights so no gradient vanishes by symmetry.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = tape.mul_const(y, w)?;
    tape.sum_all(z)
}

fn check<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("p{i}"), random(&mut rng, s), true).unwrap();
    }
    let opts = GradCheckOptions::default();
    let report = grad_check(
        &mut store,
        |tape, store| {
            let vars: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
            let y = f(tape, &vars)?;
            readout(tape, y, seed)
        },
        &opts,
    )
    .unwrap();
    assert_eq!(
        report.within_tol, report.checked,
        "max relative error {} at {:?}",
        report.max_rel_error, report.worst
    );
}

#[test]
fn sum_of_matmul_wrt_a_matches_finite_differences() {
    // d/dA sum(A B) with no read-out weights: rows of B summed
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        store.add("a", random(&mut rng, &[4, 5]), true).unwrap();
        let b = random(&mut rng, &[5, 3]);
        let report = grad_check(
            &mut store,
            |tape, store| {
                let a = tape.param(store, store.id("a").unwrap());
                let b = tape.input(b.clone());
                let c = tape.matmul(a, b)?;
                tape.sum_all(c)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[5, 4] } else { &[4, 5] };
        let sb: &[usize] = if tb { &[3, 5] } else { &[5, 3] };
        check(&[sa, sb], 1, |t, v| t.matmul_t(v[0], v[1], ta, tb));
    }
}

#[test]
fn batched_matmul() {
    check(&[&[2, 3, 4], &[2, 4, 5]], 2, |t, v| t.matmul(v[0], v[1]));
    check(&[&[2, 3, 4], &[2, 5, 4]], 3, |t, v| t.matmul_t(v[0], v[1], false, true));
    check(&[&[2, 3, 4], &[4, 5]], 4, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn linear_with_bias() {
    check(&[&[6, 4], &[4, 3], &[3]], 5, |t, v| t.linear(v[0], v[1], Some(v[2])));
    check(&[&[2, 3, 4], &[4, 3], &[3]], 6, |t, v| t.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], 7, |t, v| t.add(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], 8, |t, v| t.mul(v[0], v[1]));
    check(&[&[3, 4]], 9, |t, v| Ok(t.scale(v[0], -2.5)));
    check(&[&[3, 4]], 10, |t, v| t.row_scale(v[0], vec![0.0, 2.0, 1.5]));
    check(&[&[3, 4]], 11, |t, v| Ok(t.gelu(v[0])));
    check(&[&[3, 4]], 12, |t, v| Ok(t.relu(v[0])));
}

#[test]
fn layout_ops() {
    check(&[&[2, 3, 4]], 13, |t, v| t.reshape(v[0], &[6, 4]));
    check(&[&[2, 3, 4, 5]], 14, |t, v| t.permute(v[0], &[0, 2, 1, 3]));
    check(&[&[3, 4]], 15, |t, v| t.transpose(v[0]));
    check(&[&[5, 3]], 16, |t, v| t.gather_rows(v[0], &[4, 0, 0, 2]));
    check(&[&[2, 3, 4], &[2, 3, 2]], 17, |t, v| t.concat(v[0], v[1], 2));
    check(&[&[2, 3], &[4, 3]], 18, |t, v| t.concat(v[0], v[1], 0));
    check(&[&[4, 3], &[3]], 19, |t, v| t.replace_rows(v[0], v[1], &[false, true, true, false]));
}

#[test]
fn normalisations() {
    check(&[&[3, 6]], 20, |t, v| Ok(t.softmax(v[0])));
    check(&[&[3, 6], &[6], &[6]], 21, |t, v| t.layer_norm(v[0], v[1], v[2]));
    check(&[&[3, 6]], 22, |t, v| Ok(t.l2_normalize(v[0])));
}

#[test]
fn reductions() {
    check(&[&[2, 5, 3]], 23, |t, v| t.reduce_max(v[0], 1));
    check(&[&[2, 5, 3]], 24, |t, v| t.reduce_mean(v[0], 1));
    check(&[&[2, 5, 3]], 25, |t, v| t.reduce_sum(v[0], 2));
    check(&[&[4, 3]], 26, |t, v| t.mean_all(v[0]));
}

#[test]
fn cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut store = ParamStore::<f64>::new();
    store.add("logits", random(&mut rng, &[4, 5]), true).unwrap();
    let report = grad_check(
        &mut store,
        |tape, store| {
            let l = tape.param(store, store.id("logits").unwrap());
            tape.cross_entropy(l, &[0, 4, 2, 2])
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn composition_follows_chain_rule() {
    check(&[&[4, 6], &[6, 6], &[6], &[6]], 28, |t, v| {
        let h = t.linear(v[0], v[1], None)?;
        let h = t.layer_norm(h, v[2], v[3])?;
        let h = t.gelu(h);
        let s = t.matmul_t(h, h, false, true)?;
        Ok(t.softmax(s))
    });
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::from_fn(&[16, 32], |_| rng.random_range(-3.0..3.0)));
    let g = tape.input(Tensor::full(&[32], 1.0));
    let b = tape.input(Tensor::zeros(&[32]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).data().chunks(32) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-5, "{var}");
    }
}
