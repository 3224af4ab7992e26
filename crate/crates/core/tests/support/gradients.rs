use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semppl_core::ndgrad::{finite_diff_check, BatchNormState, Mode, Tape, Tensor};
use semppl_core::objective::{aggregate_views_frozen, draw_loss_inputs, FrozenForward, LossConfig};
use semppl_core::Result;

use super::{random_rows, seeded_bank};

const STEP: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>(),
    )
    .unwrap()
}

/// Weighted sum so every output coordinate reaches the scalar loss.
fn reduce(tape: &Tape<f64>, t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(), -1.0, 1.0);
    tape.sum(&tape.mul(t, &w)?)
}

/// Max relative error of reverse-mode vs central differences, per op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let pos = rand_tensor(&mut rng, &[4, 3], 0.5, 2.0);
    let other = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let row = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let cands = rand_tensor(&mut rng, &[4, 5, 3], -1.0, 1.0);
    // keep relu inputs away from the kink
    let relu_in = Tensor::new(
        vec![4, 3],
        x.data()
            .iter()
            .map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v })
            .collect::<Vec<_>>(),
    )
    .unwrap();

    let mut out = Vec::new();
    let mut check =
        |name: &'static str,
         input: &Tensor<f64>,
         f: &dyn Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>| {
            let err = finite_diff_check(|t, v| f(t, v), input, STEP).unwrap();
            out.push((name, err));
        };
    check("matmul_lhs", &x, &|t, v| reduce(t, &t.matmul(v, &w)?, 1));
    check("matmul_rhs", &w, &|t, v| reduce(t, &t.matmul(&x, v)?, 1));
    check("add", &x, &|t, v| reduce(t, &t.add(v, &other)?, 2));
    check("sub", &x, &|t, v| reduce(t, &t.sub(&other, v)?, 3));
    check("mul", &x, &|t, v| reduce(t, &t.mul(v, v)?, 4));
    check("add_row", &row, &|t, v| reduce(t, &t.add_row(&x, v)?, 5));
    check("mul_scalar", &x, &|t, v| {
        reduce(t, &t.mul_scalar(v, -2.5)?, 6)
    });
    check("relu", &relu_in, &|t, v| reduce(t, &t.relu(v)?, 7));
    check("exp", &x, &|t, v| reduce(t, &t.exp(v)?, 8));
    check("log", &pos, &|t, v| reduce(t, &t.log(v)?, 9));
    check("dot_rows", &x, &|t, v| {
        reduce(t, &t.dot_rows(v, &other)?, 10)
    });
    check("sum", &x, &|t, v| t.sum(&t.mul(v, v)?));
    check("mean", &x, &|t, v| t.mean(&t.mul(v, v)?));
    check("l2_normalize", &x, &|t, v| {
        reduce(t, &t.l2_normalize(v)?, 11)
    });
    check("batch_norm_input", &x, &|t, v| {
        let (y, _) = t.batch_norm(v, &gamma, &beta, &BatchNormState::new(3), Mode::Train)?;
        reduce(t, &y, 12)
    });
    check("batch_norm_scale", &gamma, &|t, v| {
        let (y, _) = t.batch_norm(&x, v, &beta, &BatchNormState::new(3), Mode::Train)?;
        reduce(t, &y, 13)
    });
    check("candidate_scores", &x, &|t, v| {
        reduce(t, &t.candidate_scores(v, &cands)?, 14)
    });
    check("candidate_scores_rhs", &cands, &|t, v| {
        reduce(t, &t.candidate_scores(&x, v)?, 15)
    });
    check("log_softmax", &x, &|t, v| reduce(t, &t.log_softmax(v)?, 16));
    check("select_column", &x, &|t, v| {
        reduce(t, &t.select_column(v, 1)?, 17)
    });
    out
}

/// Full multi-view loss as a function of a `B x d` input, each view a fixed
/// random projection followed by normalization. The invariance forward side
/// is frozen at the unperturbed point.
pub fn full_loss_error(batch: usize, dim: usize, semantic: usize) -> f64 {
    let config = LossConfig {
        num_semantic_positives: semantic,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[batch, dim], -1.0, 1.0);
    let views = config.num_large + config.num_small;
    let proj: Vec<Tensor<f64>> = (0..views)
        .map(|_| rand_tensor(&mut rng, &[dim, dim], -1.0, 1.0))
        .collect();
    let targets: Vec<Tensor<f64>> = (0..config.num_large)
        .map(|_| Tensor::from_rows(&random_rows(&mut rng, batch, dim)).unwrap())
        .collect();
    let bank = seeded_bank(config.num_large, 12, dim, 5);
    let labels: Vec<usize> = (0..batch).map(|m| m % 4).collect();
    let inputs = draw_loss_inputs(
        &bank,
        &labels,
        &targets,
        &config,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();

    let loss = |tape: &Tape<f64>, v: &Tensor<f64>, frozen: Option<&FrozenForward<f64>>| {
        let online: Vec<Tensor<f64>> = proj
            .iter()
            .map(|p| tape.l2_normalize(&tape.matmul(v, p)?))
            .collect::<Result<_>>()?;
        let (large, small) = online.split_at(config.num_large);
        aggregate_views_frozen(tape, large, small, &targets, &inputs, &config, frozen)
    };
    let frozen = loss(&Tape::new(), &x, None).unwrap().forward;
    finite_diff_check(|t, v| Ok(loss(t, v, Some(&frozen))?.total), &x, STEP).unwrap()
}
