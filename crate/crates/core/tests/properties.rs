//! Randomized invariants of the geometry, matching, metric and file-format
//! layers.

use proptest::prelude::*;
use stmixer::checkpoint::Checkpoint;
use stmixer::config::TrainConfig;
use stmixer::eval::average_precision;
use stmixer::geometry::{box_to_pquery, giou, iou, pquery_to_box, BBox};
use stmixer::hungarian::hungarian;
use stmixer::synthdata::{generate_long_video, GeneratorConfig, REAPPEARING};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..6usize, 1..6usize).prop_flat_map(|(p, g)| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, g), p))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for i in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(i, n - 1);
            out.push(v);
        }
    }
    out
}

/// Cheapest cost of matching every row of the smaller side.
fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (p, g) = (cost.len(), cost[0].len());
    let big = p.max(g);
    permutations(big)
        .into_iter()
        .map(|perm| {
            (0..p.min(g))
                .map(|i| if p >= g { cost[perm[i]][i] } else { cost[i][perm[i]] })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn box_codec_roundtrip(b in bbox()) {
        let back = pquery_to_box(&box_to_pquery(&b).unwrap());
        for (x, y) in b.to_array().iter().zip(back.to_array()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn giou_bounds_and_symmetry(a in bbox(), b in bbox()) {
        let (g, i) = (giou(&a, &b), iou(&a, &b));
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(g <= i + 1e-12);
        prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_optimal(cost in cost_matrix()) {
        let a = hungarian(&cost).unwrap();
        let (p, g) = (cost.len(), cost[0].len());
        prop_assert_eq!(a.pairs.len(), p.min(g));
        prop_assert_eq!(a.pairs.len() + a.unmatched.len(), p);
        prop_assert!((a.total(&cost) - brute_force(&cost)).abs() < 1e-9);
    }

    #[test]
    fn average_precision_in_unit_interval(hits in prop::collection::vec(any::<bool>(), 0..30), extra in 0..5usize) {
        let positives = hits.iter().filter(|&&h| h).count() + extra;
        let ap = average_precision(&hits, positives);
        prop_assert!((0.0..=1.0).contains(&ap));
        if extra == 0 && positives > 0 && hits.iter().take(positives).all(|&h| h) {
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn first_clip_of_a_video_never_reappears() {
    let cfg = GeneratorConfig::default();
    for seed in 0..10 {
        let clips = generate_long_video(seed, 5, &cfg).unwrap();
        assert!(clips[0].gt.iter().all(|g| !g.labels.contains(&REAPPEARING)));
        let later: usize = clips[1..]
            .iter()
            .map(|c| c.gt.iter().filter(|g| g.labels.contains(&REAPPEARING)).count())
            .sum();
        assert!(later > 0, "seed {seed}: identities never recur");
    }
}

#[test]
fn config_text_survives_a_checkpoint() {
    let mut cfg = TrainConfig::desk();
    cfg.lr = 0.1 + 0.2;
    cfg.model.sampling = "fixed_grid".parse().unwrap();
    let model = stmixer::model::StMixer::new(&cfg).unwrap();
    let back = Checkpoint::decode(&Checkpoint::from_model(&model, None).encode()).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.config.lr.to_bits(), cfg.lr.to_bits());
}
