use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uma_core::ctc::{ctc_loss_var, TokenSequence};
use uma_core::model::{Dropout, Model, ModelConfig};
use uma_core::numcore::{grad_check, grad_check_at, Coord};
use uma_core::traineval::{total_loss_on, LossWeights};
use uma_core::uma::{aggregate_var, detect_valleys, AggregationWeights};
use uma_core::{Array64, Graph, Result, VarId};

pub const POINTS: u64 = 10;
pub const STEP: f64 = 1e-6;
/// Larger step for the model loss: many partials are ~1e-7, where round-off
/// in `f` swamps a smaller step; the fourth-order stencil keeps truncation
/// error negligible at this size.
pub const MODEL_STEP: f64 = 1e-4;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array64 {
    let n = shape.iter().product();
    Array64::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `Σ out ⊙ probe` for a fixed random probe so every output element matters.
fn probe(g: &mut Graph<f64>, out: VarId, seed: u64) -> Result<VarId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let p = g.constant(random(&mut rng, &shape, 1.0));
    let m = g.mul(out, p)?;
    Ok(g.sum(m))
}

/// Worst relative error of `op` over [`POINTS`] random points.
pub fn op_error<F>(shapes: &[&[usize]], op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point: Vec<Array64> = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
        let f = |g: &mut Graph<f64>, ids: &[VarId]| {
            let out = op(g, ids)?;
            probe(g, out, seed)
        };
        worst = worst.max(grad_check(f, &point, STEP).unwrap().max_rel_error);
    }
    worst
}

/// Every differentiable graph operation with its worst relative error.
pub fn all_op_errors() -> Vec<(&'static str, f64)> {
    let mask = Array64::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.5, 1.0, 1.0]]).unwrap();
    vec![
        ("matmul", op_error(&[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]))),
        ("matmul_transposed", op_error(&[&[3, 4], &[5, 4]], |g, x| g.matmul_transposed(x[0], x[1]))),
        ("add", op_error(&[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]))),
        ("add scalar", op_error(&[&[3, 4], &[1]], |g, x| g.add(x[0], x[1]))),
        ("add_row", op_error(&[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1]))),
        ("mul", op_error(&[&[2, 5], &[2, 5]], |g, x| g.mul(x[0], x[1]))),
        ("mul scalar", op_error(&[&[2, 5], &[1]], |g, x| g.mul(x[0], x[1]))),
        ("scale", op_error(&[&[6]], |g, x| Ok(g.scale(x[0], -0.7)))),
        ("sigmoid", op_error(&[&[3, 3]], |g, x| Ok(g.sigmoid(x[0])))),
        ("gelu", op_error(&[&[3, 3]], |g, x| Ok(g.gelu(x[0])))),
        ("tanh", op_error(&[&[3, 3]], |g, x| Ok(g.tanh(x[0])))),
        ("softmax", op_error(&[&[3, 5]], |g, x| Ok(g.softmax(x[0])))),
        ("log_softmax", op_error(&[&[3, 5]], |g, x| Ok(g.log_softmax(x[0])))),
        ("layer_norm", op_error(&[&[4, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5))),
        ("gather_rows", op_error(&[&[4, 3]], |g, x| g.gather_rows(x[0], &[2, 0, 2, 3]))),
        ("concat rows", op_error(&[&[2, 3], &[1, 3]], |g, x| g.concat(&[x[0], x[1]], 0))),
        ("concat cols", op_error(&[&[2, 3], &[2, 2]], |g, x| g.concat(&[x[0], x[1]], 1))),
        (
            "masked_weighted_sum",
            op_error(&[&[4, 3], &[4]], move |g, x| g.masked_weighted_sum(x[0], x[1], mask.clone())),
        ),
        (
            "sum",
            op_error(&[&[2, 3, 2]], |g, x| {
                let s = g.sum(x[0]);
                g.mul(s, s)
            }),
        ),
    ]
}

/// Worst relative error of the CTC loss over 20 random feasible instances.
pub fn ctc_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=4);
        let u = rng.random_range(1..=4);
        let target: Vec<usize> = (0..u).map(|_| rng.random_range(0..k)).collect();
        let target = TokenSequence::new(target, k).unwrap();
        let len = target.min_ctc_length() + rng.random_range(0..5);
        let logits = random(&mut rng, &[len, k + 1], 3.0);
        let f = |g: &mut Graph<f64>, ids: &[VarId]| ctc_loss_var(g, ids[0], &target);
        worst = worst.max(grad_check(f, &[logits], STEP).unwrap().max_rel_error);
    }
    worst
}

/// Worst relative error of aggregation with respect to both `h` and `α`.
pub fn aggregation_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let frames = rng.random_range(1..=12);
        let h = random(&mut rng, &[frames, 3], 2.0);
        let alpha: Vec<f64> = (0..frames).map(|_| rng.random_range(0.05..0.95)).collect();
        let seg = detect_valleys(&AggregationWeights::new(alpha.clone()).unwrap());
        let alpha = Array64::new(&[frames, 1], alpha).unwrap();
        let f = |g: &mut Graph<f64>, ids: &[VarId]| {
            let c = aggregate_var(g, ids[0], ids[1], &seg)?;
            probe(g, c, seed)
        };
        worst = worst.max(grad_check(f, &[h, alpha], STEP).unwrap().max_rel_error);
    }
    worst
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        model_dim: 8,
        heads: 2,
        encoder_blocks: 2,
        decoder_blocks: 2,
        ff_dim: 10,
        subsample: 2,
        vocab_size: 3,
        encoder_condition: vec![1],
        decoder_condition: vec![1],
        ..Default::default()
    }
}

/// Composite loss over the parameters with the segmentation frozen at the
/// base point, so finite differences do not cross a valley change. With
/// `coords`, only that many sampled parameter coordinates are checked.
pub fn model_error(cfg: ModelConfig, frames: usize, coords: Option<usize>) -> f64 {
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[frames, cfg.input_dim], 1.0);
    let seg = model.forward(&x).unwrap().segmentation;
    let target = TokenSequence::new(vec![1; 1], cfg.vocab_size).unwrap();
    let point = model.param_arrays();
    let f = |g: &mut Graph<f64>, ids: &[VarId]| {
        let p = model.bind_ids(ids)?;
        let tr = model.forward_with(g, &p, &x, &mut Dropout::Off, Some(&seg))?;
        Ok(total_loss_on(g, &tr, &target, LossWeights::default())?.0)
    };
    let r = match coords {
        None => grad_check(f, &point, MODEL_STEP).unwrap(),
        Some(n) => {
            let coords: Vec<Coord> = (0..n)
                .map(|_| {
                    let input = rng.random_range(0..point.len());
                    Coord {
                        input,
                        element: rng.random_range(0..point[input].len()),
                    }
                })
                .collect();
            grad_check_at(f, &point, MODEL_STEP, &coords).unwrap()
        }
    };
    if let Some(w) = r.worst {
        let name = model.params().names().nth(w.input).unwrap().to_string();
        eprintln!(
            "worst {name}[{}] rel {:e} taped {} numeric {}",
            w.element, r.max_rel_error, r.taped_at_worst, r.numeric_at_worst
        );
    }
    r.max_rel_error
}
