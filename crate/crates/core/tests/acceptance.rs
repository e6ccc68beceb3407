//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmixer::checkpoint::Checkpoint;
use stmixer::config::{Phase, TrainConfig};
use stmixer::decoder::Detection;
use stmixer::eval::{average_precision, frame_map};
use stmixer::featspace::{build_space, FeatureSpace4D};
use stmixer::geometry::{
    apply_box_deltas, box_to_pquery, boxes_from_pqueries, giou, init_queries, iou, pqueries_to_tensor,
    pquery_to_box, BBox, PositionalQuery,
};
use stmixer::hungarian::hungarian;
use stmixer::losses::{giou_loss, total_loss};
use stmixer::model::StMixer;
use stmixer::nn::MultiHeadAttention;
use stmixer::params::{Binding, Init, ParamStore};
use stmixer::sampler::{decode_points, sample, Propagation};
use stmixer::synthdata::{DatasetSpec, GroundTruth, NUM_CLASSES, REAPPEARING};
use stmixer::trainer::{mean_loss, train};
use stmixer_tensor::{grad_check, grad_check_sampled, Conv3dGeometry, Tape, Tensor, Var, LAYERNORM_EPS};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Uniform draws whose magnitude stays above `gap`, away from kinks at 0.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> stmixer_tensor::Result<Var<'t>> {
    let w = tape.constant(Tensor::from_fn(y.shape(), |i| ((i * 7 % 11) as f64 - 5.0) / 3.0));
    Ok(y.mul(w)?.sum_all())
}

// ---------------------------------------------------------------- 1

type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> stmixer_tensor::Result<Var<'t>>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    let a = random(&[3, 4], rng, -1.0, 1.0);
    let b = random(&[3, 4], rng, -1.0, 1.0);
    let pos = random(&[3, 4], rng, 0.5, 2.0);
    let kinked = away_from_zero(&[3, 4], rng, 0.05);
    let bias = random(&[4], rng, -1.0, 1.0);
    macro_rules! case {
        ($name:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            cases.push(($name, Box::new(move |$t: &Tape, $v: &[Var]| weighted_sum($t, $body)), $inputs));
        };
    }
    case!("add", vec![a.clone(), b.clone()], |t, v| v[0].add(v[1])?);
    case!("sub", vec![a.clone(), b.clone()], |t, v| v[0].sub(v[1])?);
    case!("mul", vec![a.clone(), b.clone()], |t, v| v[0].mul(v[1])?);
    case!("div", vec![a.clone(), pos.clone()], |t, v| v[0].div(v[1])?);
    case!("minimum", vec![a.clone(), a.map(|x| x + 0.3 * (x * 17.0).sin())], |t, v| v[0].minimum(v[1])?);
    case!("maximum", vec![a.clone(), a.map(|x| x - 0.3 * (x * 13.0).cos())], |t, v| v[0].maximum(v[1])?);
    case!("add_bias", vec![a.clone(), bias.clone()], |t, v| v[0].add_bias(v[1])?);
    case!("mul_bias", vec![a.clone(), bias.clone()], |t, v| v[0].mul_bias(v[1])?);
    case!("scale", vec![a.clone()], |t, v| v[0].scale(-2.5));
    case!("add_scalar", vec![a.clone()], |t, v| v[0].add_scalar(0.7).square());
    case!("neg", vec![a.clone()], |t, v| v[0].neg());
    case!("relu", vec![kinked.clone()], |t, v| v[0].relu());
    case!("sigmoid", vec![a.clone()], |t, v| v[0].sigmoid());
    case!("exp", vec![a.clone()], |t, v| v[0].exp());
    case!("exp2", vec![a.clone()], |t, v| v[0].exp2());
    case!("ln", vec![pos.clone()], |t, v| v[0].ln());
    case!("softplus", vec![a.clone()], |t, v| v[0].softplus());
    case!("abs", vec![kinked.clone()], |t, v| v[0].abs());
    case!("square", vec![a.clone()], |t, v| v[0].square());
    case!("clamp", vec![kinked.map(|x| 2.0 * x)], |t, v| v[0].clamp(-0.9, 1.1));
    case!("matmul", vec![a.clone(), random(&[4, 5], rng, -1.0, 1.0)], |t, v| v[0].matmul(v[1])?);
    case!(
        "bmm",
        vec![random(&[2, 3, 4], rng, -1.0, 1.0), random(&[2, 4, 2], rng, -1.0, 1.0)],
        |t, v| v[0].bmm(v[1])?
    );
    case!(
        "linear",
        vec![a.clone(), random(&[4, 2], rng, -1.0, 1.0), random(&[2], rng, -1.0, 1.0)],
        |t, v| v[0].linear(v[1], Some(v[2]))?
    );
    case!("reshape", vec![a.clone()], |t, v| v[0].reshape(&[2, 6])?.exp());
    case!("permute", vec![random(&[2, 3, 4], rng, -1.0, 1.0)], |t, v| v[0].permute(&[2, 0, 1])?.exp());
    case!("transpose", vec![a.clone()], |t, v| v[0].transpose(0, 1)?.exp());
    case!("concat", vec![a.clone(), b.clone()], |t, v| Var::concat(&[v[0], v[1].square()], 0)?);
    case!("narrow", vec![a.clone()], |t, v| v[0].narrow(1, 1, 2)?.exp());
    case!("index_select", vec![a.clone()], |t, v| v[0].index_select(&[2, 0, 2])?.exp());
    case!("repeat_leading", vec![a.clone()], |t, v| v[0].repeat_leading(3).exp());
    case!("sum_all", vec![a.clone()], |t, v| v[0].exp().sum_all());
    case!("mean_all", vec![a.clone()], |t, v| v[0].exp().mean_all());
    case!("sum_axis", vec![a.clone()], |t, v| v[0].sum_axis(0)?.exp());
    case!("mean_axis", vec![a.clone()], |t, v| v[0].mean_axis(1)?.exp());
    case!(
        "layernorm",
        vec![a.clone(), random(&[4], rng, 0.5, 1.5), bias.clone()],
        |t, v| v[0].layernorm(v[1], v[2], LAYERNORM_EPS)?
    );
    case!("softmax", vec![a.clone()], |t, v| v[0].softmax()?);
    case!("masked_softmax", vec![a.clone()], |t, v| v[0].masked_softmax(Some(&[true, false, true, true]))?);
    case!("log_softmax", vec![a.clone()], |t, v| v[0].log_softmax()?);
    for (name, stride) in [("conv3d/s1", 1usize), ("conv3d/s2", 2), ("conv3d/s4", 4)] {
        case!(
            name,
            vec![random(&[2, 2, 8, 8], rng, -1.0, 1.0), random(&[3, 2, 1, 3, 3], rng, -1.0, 1.0), random(&[3], rng, -1.0, 1.0)],
            |t, v| v[0].conv3d(v[1], Some(v[2]), Conv3dGeometry::new(stride, 1))?.square()
        );
    }
    case!(
        "conv_transpose3d",
        vec![random(&[2, 2, 3, 3], rng, -1.0, 1.0), random(&[2, 3, 1, 2, 2], rng, -1.0, 1.0), random(&[3], rng, -1.0, 1.0)],
        |t, v| v[0].conv_transpose3d(v[1], Some(v[2]), 2)?.square()
    );
    case!("upsample_nearest", vec![random(&[2, 1, 2, 3], rng, -1.0, 1.0)], |t, v| v[0].upsample_nearest(2)?.square());

    // model-level differentiable operations
    let volume = random(&[4, 2, 4, 6, 6], rng, -1.0, 1.0);
    let points = Tensor::from_fn([3, 2, 2, 3, 3], |i| match i % 3 {
        2 => rng.random_range(2.1..4.9),
        _ => rng.random_range(1.0..23.0),
    });
    case!("sample(volume, points)", vec![volume.clone(), points], |t, v| {
        sample(&FeatureSpace4D::new(v[0]).map_err(stmixer_tensor::TensorError::from)?, v[1])?
    });
    let qp = pqueries_to_tensor(&[
        box_to_pquery(&BBox::new(4.0, 6.0, 20.0, 18.0)).unwrap(),
        box_to_pquery(&BBox::new(10.0, 2.0, 15.0, 22.0)).unwrap(),
    ]);
    let offsets = random(&[2, 2, 3, 3], rng, -0.5, 0.5);
    case!("decode_points/copy", vec![qp.clone(), offsets.clone()], |t, v| {
        decode_points(v[0], v[1], 3, Propagation::Copy)?
    });
    case!(
        "decode_points/move",
        vec![qp.clone(), offsets.clone(), random(&[2, 3, 2], rng, -0.3, 0.3)],
        |t, v| decode_points(v[0], v[1], 3, Propagation::Move(v[2]))?
    );
    case!("boxes_from_pqueries", vec![qp.clone()], |t, v| boxes_from_pqueries(v[0])?);
    case!(
        "apply_box_deltas",
        vec![qp.clone(), random(&[2, 4], rng, -0.3, 0.3)],
        |t, v| apply_box_deltas(v[0], v[1])?
    );
    case!(
        "giou_loss",
        vec![Tensor::new([2, 4], vec![1.0, 2.0, 6.0, 7.5, 3.0, 0.5, 9.0, 4.0]).unwrap()],
        |t, v| {
            let target = t.constant(Tensor::new([2, 4], vec![2.0, 1.0, 7.0, 6.0, 10.0, 8.0, 12.0, 11.0]).unwrap());
            giou_loss(v[0], target)?
        }
    );
    case!(
        "build_space",
        vec![
            random(&[2, 2, 4, 4], rng, -1.0, 1.0),
            random(&[2, 2, 2, 2], rng, -1.0, 1.0),
            random(&[2, 2, 1, 1], rng, -1.0, 1.0),
        ],
        |t, v| {
            let maps = stmixer::backbone::PyramidMaps { maps: vec![v[0], v[1], v[2]] };
            build_space(&maps, |_, x| Ok(x.square()))
                .map_err(stmixer_tensor::TensorError::from)?
                .volume
        }
    );
    cases
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.dim = 8;
    c.model.queries = 3;
    c.model.stages = 2;
    c.model.groups = 2;
    c.model.points = 2;
    c.model.out_points = 4;
    c.model.out_frames = 4;
    c.model.attention_heads = 2;
    c.model.ffn_hidden = 8;
    c.model.backbone_width = 4;
    c.data.frames = 2;
    c.data.height = 32;
    c.data.width = 32;
    c.data.min_size = 8.0;
    c.data.max_size = 14.0;
    c.data.max_actors = 2;
    c
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let cases = op_cases(&mut rng);
    let count = cases.len();
    for (name, f, inputs) in cases {
        let r = grad_check(f, &inputs).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_error >= 1e-4 {
            failures.push(format!("{name} {:.2e}", r.max_rel_error));
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
    }

    // multi-head attention with a key mask
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(5);
    let mha = MultiHeadAttention::new(&mut Init::new(&mut store, &mut init_rng), "a", 4, 2).unwrap();
    let mut inputs: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    let np = inputs.len();
    inputs.push(random(&[3, 4], &mut rng, -1.0, 1.0));
    inputs.push(random(&[5, 4], &mut rng, -1.0, 1.0));
    let valid = [true, false, true, true, true];
    let r = grad_check(
        |t, v| {
            let p = Binding::from_vars(v[..np].to_vec());
            let (out, _) = mha.forward(&p, v[np], v[np + 1], Some(&valid))?;
            weighted_sum(t, out)
        },
        &inputs,
    )
    .map_err(|e| e.to_string())?;
    if r.max_rel_error >= 1e-4 {
        failures.push(format!("attention {:.2e}", r.max_rel_error));
    }
    if r.max_rel_error > worst.0 {
        worst = (r.max_rel_error, "attention");
    }

    // tiny full model: every parameter, loss through matching and all heads
    let cfg = tiny_config();
    let model = StMixer::new(&cfg).unwrap();
    let clip = DatasetSpec::clips(4, 1, cfg.data.clone()).generate().unwrap().remove(0).remove(0);
    // Fresh queries are interchangeable, so matching ties make the loss
    // non-smooth at initialization; a small jitter breaks the ties.
    let params: Vec<Tensor> = model
        .store
        .iter()
        .map(|p| {
            let mut v = p.value.clone();
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.01..0.01));
            v
        })
        .collect();
    let frame = (cfg.data.width, cfg.data.height);
    let r = grad_check_sampled(
        |t, v| {
            let p = Binding::from_vars(v.to_vec());
            let trace = model.forward(t, &p, &clip.video, None)?;
            Ok(total_loss(&trace, &clip.gt, frame, &cfg.loss)?.total)
        },
        &params,
        8,
    )
    .map_err(|e| e.to_string())?;
    if r.max_rel_error >= 1e-4 {
        let name = model.store.iter().nth(r.worst.0).map(|p| p.name.clone()).unwrap_or_default();
        failures.push(format!("tiny model {:.2e} at {name}[{}]", r.max_rel_error, r.worst.1));
    }
    if r.max_rel_error > worst.0 {
        worst = (r.max_rel_error, "tiny model");
    }
    let elapsed = start.elapsed();
    check(failures.is_empty(), || format!("errors ≥ 1e-4: {}", failures.join(", ")))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} op checks + attention + tiny model ({} tensors), worst {:.2e} ({}), {:.1?}",
        count,
        params.len(),
        worst.0,
        worst.1,
        elapsed
    ))
}

// ---------------------------------------------------------------- 2

fn neighbor_oracle(vol: &Tensor, c: usize, t: usize, pt: [f64; 3]) -> f64 {
    let s = vol.shape();
    let gx = pt[0] / 4.0 - 0.5;
    let gy = pt[1] / 4.0 - 0.5;
    let gz = pt[2].clamp(2.0, 5.0) - 2.0;
    let (x0, y0, z0) = (gx.floor(), gy.floor(), gz.floor());
    let (fx, fy, fz) = (gx - x0, gy - y0, gz - z0);
    let mut acc = 0.0;
    for (zi, wz) in [(z0, 1.0 - fz), (z0 + 1.0, fz)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
            for (xi, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                let inside = zi >= 0.0
                    && yi >= 0.0
                    && xi >= 0.0
                    && (zi as usize) < s[2]
                    && (yi as usize) < s[3]
                    && (xi as usize) < s[4];
                if inside {
                    acc += wz * wy * wx * vol.at(&[c, t, zi as usize, yi as usize, xi as usize]);
                }
            }
        }
    }
    acc
}

fn criterion_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for pair in 0..1000 {
        let tape = Tape::new();
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let vol = random(&[2, 2, 4, h, w], &mut rng, -1.0, 1.0);
        let space = FeatureSpace4D::new(tape.constant(vol.clone())).unwrap();
        let pt = [
            rng.random_range(-6.0..(4 * w) as f64 + 6.0),
            rng.random_range(-6.0..(4 * h) as f64 + 6.0),
            rng.random_range(1.5..5.5),
        ];
        let pts = Tensor::new([1, 1, 2, 1, 3], [pt, pt].concat()).unwrap();
        let out = sample(&space, tape.constant(pts)).unwrap().value();
        for t in 0..2 {
            for c in 0..2 {
                let (got, want) = (out.data()[t * 2 + c], neighbor_oracle(&vol, c, t, pt));
                check(got == want, || format!("pair {pair}: {got} != oracle {want}"))?;
            }
        }
    }

    // constant space, zero offsets around random boxes
    let tape = Tape::new();
    let space = FeatureSpace4D::new(tape.constant(Tensor::full([4, 2, 4, 16, 16], 0.625))).unwrap();
    let boxes: Vec<PositionalQuery> = (0..50)
        .map(|_| {
            let (x, y) = (rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
            box_to_pquery(&BBox::new(x - 3.0, y - 3.0, x + 3.0, y + 4.0)).unwrap()
        })
        .collect();
    let qp = tape.constant(pqueries_to_tensor(&boxes));
    let zero = tape.constant(Tensor::zeros([50, 2, 3, 3]));
    let pts = decode_points(qp, zero, 2, Propagation::Copy).unwrap();
    let out = sample(&space, pts).unwrap().value();
    let dev = out.data().iter().map(|v| (v - 0.625).abs()).fold(0.0, f64::max);
    check(dev < 1e-12, || format!("constant space deviates by {dev:e}"))?;

    // out of bounds in x or y
    let far = Tensor::from_fn([4, 1, 2, 1, 3], |i| match (i / 6, i % 3) {
        (0, 0) => -9.0,
        (1, 0) => 80.0,
        (2, 1) => -20.0,
        (3, 1) => 70.0,
        (_, 2) => 3.3,
        _ => 30.0,
    });
    let out = sample(&space, tape.constant(far)).unwrap().value();
    check(out.data().iter().all(|&v| v == 0.0), || "out-of-bounds point sampled non-zero".into())?;
    Ok("1000 oracle pairs exact, constant space within 1e-12, out-of-bounds = 0".into())
}

// ---------------------------------------------------------------- 3

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (p, g) = (cost.len(), cost[0].len());
    // matched predictions, taken in ground-truth order when g ≤ p
    fn rec(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>, rows_are_preds: bool, acc: f64, best: &mut f64) {
        let (outer, inner) = if rows_are_preds {
            (cost[0].len(), cost.len())
        } else {
            (cost.len(), cost[0].len())
        };
        if col == outer {
            *best = best.min(acc);
            return;
        }
        for r in 0..inner {
            if !used[r] {
                used[r] = true;
                let c = if rows_are_preds { cost[r][col] } else { cost[col][r] };
                rec(cost, col + 1, used, rows_are_preds, acc + c, best);
                used[r] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let rows_are_preds = g <= p;
    let inner = if rows_are_preds { p } else { g };
    rec(cost, 0, &mut vec![false; inner], rows_are_preds, 0.0, &mut best);
    best
}

fn criterion_hungarian() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for m in 0..200 {
        let (p, g) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = hungarian(&cost).map_err(|e| e.to_string())?;
        check(a.pairs.len() == p.min(g), || format!("matrix {m}: {} pairs", a.pairs.len()))?;
        let (got, want) = if g <= p {
            (a.total(&cost), brute_force(&cost))
        } else {
            // brute force accumulates in prediction order here
            let mut by_pred = a.pairs.clone();
            by_pred.sort();
            (by_pred.iter().map(|&(pi, gi)| cost[pi][gi]).sum(), brute_force(&cost))
        };
        check(got == want, || format!("matrix {m} ({p}x{g}): {got} vs brute force {want}"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("200 matrices up to 7x7 equal the brute-force minimum, {elapsed:.1?}"))
}

// ---------------------------------------------------------------- 4

fn criterion_box_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (x1, y1) = (rng.random_range(-50.0..200.0), rng.random_range(-50.0..200.0));
        let b = BBox::new(x1, y1, x1 + rng.random_range(0.5..150.0), y1 + rng.random_range(0.5..150.0));
        let back = pquery_to_box(&box_to_pquery(&b).map_err(|e| e.to_string())?);
        for (u, v) in b.to_array().iter().zip(back.to_array()) {
            worst = worst.max((u - v).abs());
        }
    }
    check(worst < 1e-9, || format!("roundtrip error {worst:e}"))?;
    for (w, h) in [(64usize, 64usize), (32, 64), (128, 256)] {
        let qs = init_queries(5, 8, (w, h), 3).map_err(|e| e.to_string())?;
        for b in qs.boxes() {
            check(b == BBox::new(0.0, 0.0, w as f64, h as f64), || format!("init query decodes to {b:?} for {w}x{h}"))?;
        }
    }
    Ok(format!("1000 roundtrips, max error {worst:.1e}; init queries decode to the full frame exactly"))
}

// ---------------------------------------------------------------- 5

fn raster(a: &BBox, b: &BBox, step: f64) -> (f64, f64) {
    let hull = BBox::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2));
    let (mut inter, mut uni) = (0usize, 0usize);
    let nx = (hull.width() / step).ceil() as usize;
    let ny = (hull.height() / step).ceil() as usize;
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2;
    for j in 0..ny {
        let y = hull.y1 + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = hull.x1 + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
    }
    let cell = step * step;
    let (inter, uni) = (inter as f64 * cell, uni as f64 * cell);
    let iou = inter / uni;
    (iou, iou - (hull.area() - uni) / hull.area())
}

fn criterion_giou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
    check(giou(&unit, &unit) == 1.0 && iou(&unit, &unit) == 1.0, || "identity is not 1".into())?;
    let touching = BBox::new(1.0, 0.0, 2.0, 1.0);
    check(giou(&unit, &touching) == 0.0 && iou(&unit, &touching) == 0.0, || {
        format!("touching squares: giou {}", giou(&unit, &touching))
    })?;
    let mut worst: f64 = 0.0;
    for k in 0..500 {
        let mut bx = || {
            let (x, y) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
            BBox::new(x, y, x + rng.random_range(0.5..4.0), y + rng.random_range(0.5..4.0))
        };
        let (a, b) = (bx(), bx());
        let (ri, rg) = raster(&a, &b, 0.01);
        let (ai, ag) = (iou(&a, &b), giou(&a, &b));
        worst = worst.max((ri - ai).abs()).max((rg - ag).abs());
        check(ag <= ai, || format!("pair {k}: giou {ag} > iou {ai}"))?;
    }
    check(worst < 1e-2, || format!("raster disagreement {worst}"))?;
    Ok(format!("identity 1, touching 0, 500 raster pairs within {worst:.1e}, giou ≤ iou"))
}

// ---------------------------------------------------------------- 6

fn criterion_ap() -> Outcome {
    let ap = average_precision(&[true, false, true], 2);
    check((ap - 0.8333).abs() < 1e-4 && (ap - 5.0 / 6.0).abs() < 1e-6, || format!("fixture AP {ap}"))?;
    let det = |b: [f64; 4], s: f64| Detection {
        query: 0,
        bbox: BBox::from_array(b),
        human_prob: 1.0,
        action_scores: vec![s],
    };
    let gt = |b: [f64; 4]| GroundTruth {
        bbox: BBox::from_array(b),
        labels: vec![0],
    };
    let report = frame_map(
        &[vec![det([0.0, 0.0, 10.0, 10.0], 0.9), det([40.0, 40.0, 50.0, 50.0], 0.8), det([20.0, 20.0, 30.0, 30.0], 0.7)]],
        &[vec![gt([0.0, 0.0, 10.0, 10.0]), gt([20.0, 20.0, 30.0, 30.0])]],
        1,
        0.5,
    );
    check((report.map - 5.0 / 6.0).abs() < 1e-6, || format!("fixture via frame_map {}", report.map))?;

    let clips = DatasetSpec::clips(61, 12, Default::default()).generate().map_err(|e| e.to_string())?;
    let gts: Vec<Vec<GroundTruth>> = clips.iter().flatten().map(|c| c.gt.clone()).collect();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|f| {
            f.iter()
                .map(|g| Detection {
                    query: 0,
                    bbox: g.bbox,
                    human_prob: 1.0,
                    action_scores: (0..NUM_CLASSES).map(|c| if g.labels.contains(&c) { 1.0 } else { 0.0 }).collect(),
                })
                .collect()
        })
        .collect();
    let perfect = frame_map(&dets, &gts, NUM_CLASSES, 0.5);
    check(perfect.map == 1.0, || format!("perfect predictions give {}", perfect.map))?;
    Ok(format!("fixture AP {ap:.6}, perfect mAP {}", perfect.map))
}

// ---------------------------------------------------------------- 7

fn criterion_overfit() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::desk();
    let videos = cfg.train_spec().generate().map_err(|e| e.to_string())?;
    check(videos.len() == 16, || "desk set is not 16 clips".into())?;
    let initial = mean_loss(&StMixer::new(&cfg).map_err(|e| e.to_string())?, &videos, None).map_err(|e| e.to_string())?;
    let out = train(&cfg, &videos, None, None).map_err(|e| e.to_string())?;
    let final_loss = mean_loss(&out.model, &videos, None).map_err(|e| e.to_string())?;
    let map = out.model.evaluate(&videos, None).map_err(|e| e.to_string())?.map;
    let elapsed = start.elapsed();
    let detail = format!(
        "{} steps: train mAP {map:.3}, loss {initial:.2} → {final_loss:.2} ({:.1}%), {elapsed:.0?}",
        cfg.steps,
        100.0 * final_loss / initial
    );
    check(cfg.steps <= 500, || format!("{} steps", cfg.steps))?;
    check(map >= 0.9, || detail.clone())?;
    check(final_loss < 0.1 * initial, || detail.clone())?;
    check(elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_ablation() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let base = TrainConfig::ablation(seed);
        let train_set = base.train_spec().generate().map_err(|e| e.to_string())?;
        let held_out = base.eval_spec().generate().map_err(|e| e.to_string())?;
        let mut maps = Vec::new();
        for mode in ["adaptive", "fixed_grid"] {
            let mut cfg = base.clone();
            cfg.set("model.sampling", mode).map_err(|e| e.to_string())?;
            let out = train(&cfg, &train_set, None, None).map_err(|e| e.to_string())?;
            maps.push(out.model.evaluate(&held_out, None).map_err(|e| e.to_string())?.map);
        }
        wins += (maps[0] >= maps[1]) as usize;
        lines.push(format!("seed {seed}: adaptive {:.3} vs fixed {:.3}", maps[0], maps[1]));
    }
    let detail = format!("{} ({wins}/3)", lines.join("; "));
    check(wins >= 2, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn criterion_long_term() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let short_cfg = TrainConfig::long_probe(seed);
        let train_set = short_cfg.train_spec().generate().map_err(|e| e.to_string())?;
        let held_out = short_cfg.eval_spec().generate().map_err(|e| e.to_string())?;
        let short = train(&short_cfg, &train_set, None, None).map_err(|e| e.to_string())?.model;
        let train_bank = short.build_bank(&train_set).map_err(|e| e.to_string())?;
        let eval_bank = short.build_bank(&held_out).map_err(|e| e.to_string())?;

        let mut long_cfg = short_cfg.clone();
        long_cfg.phase = Phase::Long;
        let long = train(&long_cfg, &train_set, Some(&train_bank), None).map_err(|e| e.to_string())?.model;
        let (w, k) = (long_cfg.model.long_window, long_cfg.model.long_k);
        for t in 0..held_out[0].len() {
            let (rows, valid) = long.window_for(Some(&eval_bank), 0, t).map_err(|e| e.to_string())?.unwrap();
            check(rows.shape() == [w * k, 2 * long_cfg.model.dim] && valid.len() == w * k, || {
                format!("window shape {:?}, expected [{}, {}]", rows.shape(), w * k, 2 * long_cfg.model.dim)
            })?;
        }
        let ap_short = short.evaluate(&held_out, None).map_err(|e| e.to_string())?.per_class[REAPPEARING].ap;
        let ap_long = long.evaluate(&held_out, Some(&eval_bank)).map_err(|e| e.to_string())?.per_class[REAPPEARING].ap;
        let (s, l) = (ap_short.unwrap_or(0.0), ap_long.unwrap_or(0.0));
        wins += (l > s) as usize;
        lines.push(format!("seed {seed}: long {l:.3} vs short {s:.3}"));
    }
    let detail = format!("reappearing AP {} ({wins}/3); K = w·k verified", lines.join("; "));
    check(wins >= 2, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn criterion_determinism() -> Outcome {
    let mut cfg = TrainConfig::desk();
    cfg.steps = 10;
    cfg.eval_every = 0;
    let videos = cfg.train_spec().generate().map_err(|e| e.to_string())?;
    let a = train(&cfg, &videos, None, None).map_err(|e| e.to_string())?;
    let b = train(&cfg, &videos, None, None).map_err(|e| e.to_string())?;
    let (la, lb) = (a.losses(), b.losses());
    check(la.len() == 10 && la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        format!("loss series differ: {la:?} vs {lb:?}")
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&a.model, None).save(&path).map_err(|e| e.to_string())?;
    let (loaded, _) = Checkpoint::load(&path)
        .and_then(Checkpoint::into_model)
        .map_err(|e| e.to_string())?;
    let outputs = |m: &StMixer| -> Vec<std::rc::Rc<Tensor>> {
        let tape = Tape::new();
        let p = m.store.bind_frozen(&tape);
        let trace = m.forward(&tape, &p, &videos[0][0].video, None).unwrap();
        trace
            .iter()
            .flat_map(|s| [s.human_logits.value(), s.action_logits.value(), s.state.positional.value()])
            .collect()
    };
    let same = outputs(&a.model).iter().zip(outputs(&loaded)).all(|(x, y)| x.bitwise_eq(&y));
    check(same, || "forward output changed after checkpoint roundtrip".into())?;
    Ok("10-step loss series bitwise identical; checkpoint roundtrip forward bitwise identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient integrity", criterion_gradients),
        ("sampling oracle", criterion_sampling),
        ("hungarian oracle", criterion_hungarian),
        ("box codec", criterion_box_codec),
        ("giou/iou", criterion_giou),
        ("evaluator fixture", criterion_ap),
        ("overfit run", criterion_overfit),
        ("ablation echo", criterion_ablation),
        ("long-term probe", criterion_long_term),
        ("determinism and persistence", criterion_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|x| x == &id || name.contains(x.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
