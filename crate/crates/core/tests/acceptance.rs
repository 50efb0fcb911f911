//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its elapsed time. Run with `cargo test --test acceptance -- --nocapture`.
//!
//! Every tolerance is pinned in code. Oracles here are written from the
//! definitions (naive loops, exhaustive search, finite differences) and stay
//! independent of the library's implementation path.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwm_core::calibration::{split_partitions, CalibTuple, TupleSet};
use uwm_core::encoder::{
    default_target_layers, forward, init_encoder, layer_gradient, Embedding, EncoderConfig,
    LayerId, LayerKind, Modality, ModelPair,
};
use uwm_core::flowscore::{flow_scores, Prior, ScoreTable, SCORE_EPS};
use uwm_core::gradbase::{batch_loss, LossSpec};
use uwm_core::mat::{Mat, Mat64};
use uwm_core::safeground::{
    preference_bits, recall_from_sim_matrix, retrieval_recall_from_embeddings, tuple_scores,
    zeroshot_accuracy, RetrievalTask, SimQuad, TupleEmbeddings,
};
use uwm_core::surgeon::{
    adaptive_select, apply_edit, apply_edit_pair, diff_weights, EditPlan, SelectionMask, Selector,
};
use uwm_core::synthbench::{eval_localization, gen_world, random_mask_like, WorldConfig};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

// ---------------------------------------------------------------------------
// Criterion 1: flow pipeline vs naive triple-loop reference, 1e-5 relative.
// ---------------------------------------------------------------------------

/// Literal per-sample saliency: nested loops over the printed formula.
#[allow(clippy::needless_range_loop)]
fn naive_phi(w: &Mat, norms: &[f64]) -> Mat64 {
    let (n, m) = (w.rows(), w.cols());
    let mut phi = Mat64::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut emits = 0.0;
            for jp in 0..m {
                emits += (w.get(i, jp) as f64).abs();
            }
            emits = norms[i] * emits / m as f64;
            let mut receives = 0.0;
            for ip in 0..n {
                receives += norms[ip] * (w.get(ip, j) as f64).abs();
            }
            receives /= n as f64;
            phi.set(i, j, emits * receives);
        }
    }
    phi
}

/// Naive partition score: per-sample phi over std (population, pooled over
/// (sample, token) observations), averaged in order.
#[allow(clippy::needless_range_loop)]
fn naive_partition_scores(w: &Mat, traces: &[Mat64]) -> Mat64 {
    let n = w.rows();
    let mut obs: Vec<Vec<f64>> = vec![Vec::new(); n];
    for z in traces {
        for t in 0..z.rows() {
            for (i, o) in obs.iter_mut().enumerate() {
                o.push(z.get(t, i));
            }
        }
    }
    let std: Vec<f64> = obs
        .iter()
        .map(|o| {
            let mean = o.iter().sum::<f64>() / o.len() as f64;
            (o.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / o.len() as f64).sqrt()
        })
        .collect();
    let mut acc = Mat64::zeros(w.rows(), w.cols());
    for z in traces {
        let norms: Vec<f64> = (0..n)
            .map(|i| (0..z.rows()).map(|t| z.get(t, i) * z.get(t, i)).sum::<f64>().sqrt())
            .collect();
        let phi = naive_phi(w, &norms);
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                acc.set(i, j, acc.get(i, j) + phi.get(i, j) / (std[i] + SCORE_EPS));
            }
        }
    }
    for v in acc.as_mut_slice() {
        *v /= traces.len() as f64;
    }
    acc
}

#[test]
fn criterion_1_flow_pipeline_matches_naive_reference() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    for case in 0..50 {
        let model_dim = rng.random_range(2..=8);
        let cfg = EncoderConfig {
            vocab_size: 24,
            seq_len: rng.random_range(2..=5),
            model_dim,
            ff_dim: model_dim.max(rng.random_range(2..=8)),
            num_blocks: 1,
            embed_dim: 4,
        };
        let model = ModelPair {
            text: init_encoder(&cfg, Modality::Text, case).unwrap(),
            image: init_encoder(&cfg, Modality::Image, case + 1000).unwrap(),
        };
        let n = rng.random_range(1..=8);
        let tuples: Vec<CalibTuple> = (0..n)
            .map(|i| {
                let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
                    (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
                };
                CalibTuple {
                    id: i,
                    concept: "c".into(),
                    t_s: seq(&mut rng),
                    t_u: seq(&mut rng),
                    v_s: seq(&mut rng),
                    v_u: seq(&mut rng),
                }
            })
            .collect();
        let set = TupleSet::new(tuples, vec!["c".into()]).unwrap();
        let prior = if case % 2 == 0 { Prior::None } else { Prior::TextMagnitude };
        let layers: Vec<LayerId> = vec![
            LayerId::new(Modality::Text, 0, LayerKind::Out),
            LayerId::new(Modality::Image, 0, LayerKind::Fc2),
        ];
        let got = flow_scores(&model, &set, &layers, prior, 1).unwrap();

        // Oracle: materialize traces through the public forward, then run
        // the naive reference per partition and take the ratio.
        let (safe, unsafe_) = split_partitions(&set);
        for &layer in &layers {
            let enc = model.encoder(layer.modality);
            let w = enc.weight(layer).unwrap();
            let traces_of = |pairs: &[uwm_core::calibration::Pair]| -> Vec<Mat64> {
                pairs
                    .iter()
                    .map(|p| {
                        let (_, tr) = forward(enc, p.tokens(layer.modality), &[layer]).unwrap();
                        tr.get(layer).unwrap().clone()
                    })
                    .collect()
            };
            let sf = naive_partition_scores(w, &traces_of(&safe));
            let uns = naive_partition_scores(w, &traces_of(&unsafe_));
            let table = got.get(layer).unwrap();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let mut want = uns.get(i, j) / (sf.get(i, j) + SCORE_EPS);
                    if prior == Prior::TextMagnitude && layer.modality == Modality::Text {
                        want *= (w.get(i, j) as f64).abs();
                    }
                    let have = table.get(i, j) as f64;
                    assert!(
                        rel_err(have, want) <= 1e-5,
                        "case {case} {layer} ({i},{j}): {have} vs {want}"
                    );
                    checked += 1;
                }
            }
        }
    }
    println!(
        "PASS: criterion 1 - flow pipeline matches naive reference on 50 instances ({checked} entries, 1e-5 rel) in {:.2?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: adaptive selection vs exhaustive minimal-prefix search.
// ---------------------------------------------------------------------------

fn exhaustive_minimal_prefix(table: &Mat, tau: f64) -> BTreeSet<(usize, usize)> {
    // Independent re-derivation: sort by (score desc, coord asc), then try
    // every prefix length and keep the shortest reaching tau * total.
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    for i in 0..table.rows() {
        for j in 0..table.cols() {
            entries.push((table.get(i, j), i, j));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let total: f64 = entries.iter().map(|e| e.0 as f64).sum();
    if total <= 0.0 {
        return BTreeSet::new();
    }
    for k in 0..=entries.len() {
        let sum: f64 = entries[..k].iter().map(|e| e.0 as f64).sum();
        if sum >= tau * total {
            return entries[..k].iter().map(|&(_, i, j)| (i, j)).collect();
        }
    }
    entries.iter().map(|&(_, i, j)| (i, j)).collect()
}

#[test]
fn criterion_2_selection_matches_exhaustive_search_and_is_monotone() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let layer = LayerId::new(Modality::Text, 0, LayerKind::Out);
    for case in 0..100 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=3);
        let values: Vec<f32> = (0..rows * cols)
            .map(|_| {
                if rng.random_range(0..5) == 0 {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        assert!(rows * cols <= 12);
        let mut scores = ScoreTable::new();
        scores.insert(layer, Mat::from_vec(rows, cols, values)).unwrap();
        for tau in [0.02f32, 0.1, 0.5, 0.9] {
            let got = adaptive_select(&scores, tau).unwrap();
            let want = exhaustive_minimal_prefix(scores.get(layer).unwrap(), tau as f64);
            assert_eq!(got.get(layer).unwrap(), &want, "case {case} tau {tau}");
        }
    }
    for _ in 0..100 {
        let values: Vec<f32> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut scores = ScoreTable::new();
        scores.insert(layer, Mat::from_vec(3, 4, values)).unwrap();
        let mut taus = [rng.random_range(0.01..0.99f32), rng.random_range(0.01..0.99)];
        taus.sort_by(f32::total_cmp);
        let small = adaptive_select(&scores, taus[0]).unwrap();
        let large = adaptive_select(&scores, taus[1]).unwrap();
        assert!(small.is_subset_of(&large), "tau {taus:?} not monotone");
    }
    println!(
        "PASS: criterion 2 - adaptive selection matches exhaustive prefix search (100 tables x 4 taus) and is tau-monotone (100 tables) in {:.2?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: edit algebra on 50 random plans.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_edit_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = EncoderConfig {
        vocab_size: 16,
        seq_len: 3,
        model_dim: 4,
        ff_dim: 6,
        num_blocks: 2,
        embed_dim: 3,
    };
    for case in 0..50u64 {
        let weights = init_encoder(&cfg, Modality::Text, case).unwrap();
        // Random mask over random layers of this encoder.
        let mut mask = SelectionMask::new();
        for id in weights.layer_ids() {
            if rng.random_range(0..2) == 0 {
                continue;
            }
            let w = weights.weight(id).unwrap();
            let mut coords = BTreeSet::new();
            for _ in 0..rng.random_range(1..=4) {
                coords.insert((
                    rng.random_range(0..w.rows()),
                    rng.random_range(0..w.cols()),
                ));
            }
            mask.insert(id, coords);
        }
        if mask.total() == 0 {
            let id = LayerId::new(Modality::Text, 0, LayerKind::Out);
            mask.insert(id, BTreeSet::from([(0, 0)]));
        }

        let plan = |alpha: f32| EditPlan {
            mask: mask.clone(),
            alpha,
            selector: Selector::Tau(0.02),
            provenance: String::new(),
        };

        // alpha = 1: bit-identical.
        let same = apply_edit(&weights, &plan(1.0)).unwrap();
        assert!(weights.bits_eq(&same), "case {case}: alpha=1 changed bits");

        // alpha = 0: zeroes exactly the mask, neighbors untouched.
        let pruned = apply_edit(&weights, &plan(0.0)).unwrap();
        for (&id, coords) in mask.iter() {
            let w = pruned.weight(id).unwrap();
            let orig = weights.weight(id).unwrap();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    if coords.contains(&(i, j)) {
                        assert_eq!(w.get(i, j), 0.0);
                    } else {
                        assert_eq!(w.get(i, j).to_bits(), orig.get(i, j).to_bits());
                    }
                }
            }
        }

        // diff reports exactly the mask for a sign flip.
        let flipped = apply_edit(&weights, &plan(-1.0)).unwrap();
        let diffs = diff_weights(&flipped, &weights).unwrap();
        for id in weights.layer_ids() {
            let expected: BTreeSet<(usize, usize)> =
                mask.get(id).cloned().unwrap_or_default();
            let d = &diffs[&id];
            let got: BTreeSet<(usize, usize)> = d.coords.iter().copied().collect();
            assert_eq!(d.count, expected.len(), "case {case} {id}");
            assert_eq!(got, expected, "case {case} {id}");
            assert_eq!(d.overflow, 0);
        }
    }
    println!(
        "PASS: criterion 3 - edit algebra (alpha=1 identity, alpha=0 pruning, diff == mask) on 50 plans in {:.2?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: gradients vs central finite differences (h = 1e-3, 1e-4 rel).
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = EncoderConfig {
        vocab_size: 32,
        seq_len: 4,
        model_dim: 6,
        ff_dim: 8,
        num_blocks: 2,
        embed_dim: 4,
    };
    let frozen = ModelPair {
        text: init_encoder(&cfg, Modality::Text, 71).unwrap(),
        image: init_encoder(&cfg, Modality::Image, 72).unwrap(),
    };
    let live = ModelPair {
        text: init_encoder(&cfg, Modality::Text, 73).unwrap(),
        image: init_encoder(&cfg, Modality::Image, 74).unwrap(),
    };
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
    };
    let batch: Vec<CalibTuple> = (0..3)
        .map(|i| CalibTuple {
            id: i,
            concept: "c".into(),
            t_s: seq(&mut rng),
            t_u: seq(&mut rng),
            v_s: seq(&mut rng),
            v_u: seq(&mut rng),
        })
        .collect();

    let specs = [
        LossSpec::g_unsafe(Modality::Text),
        LossSpec::g_unsafe(Modality::Image),
        LossSpec::g_safeclip(Modality::Text, 0.07),
        LossSpec::g_safeclip(Modality::Image, 0.07),
    ];
    let h = 1e-3f32;
    let mut per_kind = [0usize; 4];
    for spec in &specs {
        let enc = live.encoder(spec.modality);
        let layers: Vec<LayerId> = enc.layer_ids();
        let grads = layer_gradient(enc, &frozen, spec, &batch, &layers).unwrap();
        for (k, kind) in LayerKind::ALL.into_iter().enumerate() {
            // 10 coordinates per kind per spec modality -> >= 20 per kind
            // across the two spec variants of each loss.
            for _ in 0..10 {
                let block = rng.random_range(0..cfg.num_blocks);
                let id = LayerId::new(spec.modality, block, kind);
                let g = &grads[&id];
                let i = rng.random_range(0..g.rows());
                let j = rng.random_range(0..g.cols());
                let base = enc.weight(id).unwrap().get(i, j);
                let mut plus = enc.clone();
                plus.weight_mut(id).unwrap().set(i, j, base + h);
                let mut minus = enc.clone();
                minus.weight_mut(id).unwrap().set(i, j, base - h);
                let step =
                    (plus.weight(id).unwrap().get(i, j) - minus.weight(id).unwrap().get(i, j)) as f64;
                let lp = batch_loss(&plus, &frozen, spec, &batch).unwrap();
                let lm = batch_loss(&minus, &frozen, spec, &batch).unwrap();
                let fd = (lp - lm) / step;
                let an = g.get(i, j);
                let rel = (an - fd).abs() / fd.abs().max(1e-8);
                assert!(
                    rel <= 1e-4,
                    "{:?} {id} ({i},{j}): analytic {an} vs fd {fd} (rel {rel:.2e})",
                    spec.kind
                );
                per_kind[k] += 1;
            }
        }
    }
    assert!(per_kind.iter().all(|&n| n >= 20), "coords per kind: {per_kind:?}");
    println!(
        "PASS: criterion 4 - analytic gradients match central differences (h=1e-3, rel<=1e-4, {:?} coords per layer kind, both losses) in {:.2?}",
        per_kind,
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: metric algebra, monotone invariance, retrieval brute force.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_metric_algebra_and_retrieval_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    // Per-tuple product algebra over 10k random quads.
    for _ in 0..10_000 {
        let q = SimQuad {
            ss: rng.random_range(-1.0..1.0),
            us: rng.random_range(-1.0..1.0),
            su: rng.random_range(-1.0..1.0),
            uu: rng.random_range(-1.0..1.0),
        };
        let s = tuple_scores(&preference_bits(&q));
        assert_eq!(s.gs, s.txt && s.img);
        assert_eq!(s.gs, s.ps && s.pu);

        // Monotone transform invariance of the bits under x -> x^3 + x.
        let f = |x: f32| x * x * x + x;
        let tq = SimQuad { ss: f(q.ss), us: f(q.us), su: f(q.su), uu: f(q.uu) };
        assert_eq!(preference_bits(&q), preference_bits(&tq));
    }

    // Retrieval equals a brute-force argmax oracle on 20 random 16-tuple
    // sets of unit embeddings; monotone transforms leave hits unchanged.
    let unit = |rng: &mut ChaCha8Rng, d: usize| -> Embedding {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        Embedding(v.into_iter().map(|x| x / n).collect())
    };
    for case in 0..20 {
        let n = 16;
        let e = TupleEmbeddings {
            vs: (0..n).map(|_| unit(&mut rng, 8)).collect(),
            vu: (0..n).map(|_| unit(&mut rng, 8)).collect(),
            ts: (0..n).map(|_| unit(&mut rng, 8)).collect(),
            tu: (0..n).map(|_| unit(&mut rng, 8)).collect(),
        };
        let dot = |a: &Embedding, b: &Embedding| uwm_core::encoder::similarity(a, b);
        // Independent oracle over the full similarity matrix.
        let oracle = |queries: &[Embedding], db: &[Embedding], target_of: &dyn Fn(usize) -> usize| {
            let mut hits = 0;
            for (i, q) in queries.iter().enumerate() {
                let sims: Vec<f32> = db.iter().map(|d| dot(q, d)).collect();
                let best = sims.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let winners: Vec<usize> = (0..sims.len()).filter(|&k| sims[k] == best).collect();
                if winners.len() == 1 && winners[0] == target_of(i) {
                    hits += 1;
                }
            }
            100.0 * hits as f64 / queries.len() as f64
        };
        let all_images: Vec<Embedding> = e.vs.iter().chain(e.vu.iter()).cloned().collect();
        let all_texts: Vec<Embedding> = e.ts.iter().chain(e.tu.iter()).cloned().collect();
        let cases = [
            (RetrievalTask::TsVs, oracle(&e.ts, &e.vs, &|i| i)),
            (RetrievalTask::VsTs, oracle(&e.vs, &e.ts, &|i| i)),
            (RetrievalTask::TuVus, oracle(&e.tu, &all_images, &|i| i)),
            (RetrievalTask::VuTus, oracle(&e.vu, &all_texts, &|i| i)),
        ];
        for (task, want) in cases {
            let got = retrieval_recall_from_embeddings(&e, task).unwrap();
            assert_eq!(got, want, "case {case} {task:?}");
        }
    }

    // Zero-shot agrees with the same argmax oracle, and a monotone transform
    // of the similarity matrix never changes recall.
    for _ in 0..5 {
        let images: Vec<Embedding> = (0..12).map(|_| unit(&mut rng, 6)).collect();
        let protos: Vec<Embedding> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let acc = zeroshot_accuracy(&images, &labels, &protos).unwrap();
        let mut sims = Mat::zeros(12, 4);
        for (i, im) in images.iter().enumerate() {
            for (j, p) in protos.iter().enumerate() {
                sims.set(i, j, uwm_core::encoder::similarity(im, p));
            }
        }
        assert_eq!(acc, recall_from_sim_matrix(&sims, &labels));
        let mut transformed = sims.clone();
        for v in transformed.as_mut_slice() {
            *v = *v * *v * *v + *v;
        }
        assert_eq!(
            recall_from_sim_matrix(&sims, &labels),
            recall_from_sim_matrix(&transformed, &labels)
        );
    }

    println!(
        "PASS: criterion 5 - metric algebra on 10k quads, monotone-transform invariance, retrieval equals brute force on 20 sets in {:.2?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: localization signal vs Monte-Carlo random baseline.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_localization_signal() {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let config = WorldConfig { seed, ..WorldConfig::default() };
        let world = gen_world(&config).unwrap();
        let layers = default_target_layers(&config.encoder);
        let scores =
            flow_scores(&world.model, &world.train, &layers, Prior::TextMagnitude, 2).unwrap();
        let mask = adaptive_select(&scores, 0.02).unwrap();
        let loc = eval_localization(&mask, &world.truth).unwrap();
        let precision = loc.micro_precision.expect("non-empty selection");

        // Monte-Carlo oracle: expected precision of a random equal-size mask.
        let shapes = uwm_core::safeground::weight_shapes(&world.model);
        let mut baseline = 0.0;
        let draws = 100;
        for s in 0..draws {
            let rm = random_mask_like(&world.truth, &shapes, 60_000 + s).unwrap();
            baseline += eval_localization(&rm, &world.truth)
                .unwrap()
                .micro_precision
                .unwrap();
        }
        baseline /= draws as f64;
        let ratio = precision / baseline;
        println!(
            "  seed {seed}: precision {precision:.3} vs random {baseline:.4} ({ratio:.1}x)"
        );
        assert!(
            ratio >= 3.0,
            "seed {seed}: precision {precision:.3} under 3x the random baseline {baseline:.4}"
        );
        ratios.push(ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean >= 5.0, "seed-averaged ratio {mean:.2} under 5x");
    println!(
        "PASS: criterion 6 - localization precision {mean:.1}x the random baseline on average (all seeds >= 3x) in {:.2?}",
        start.elapsed()
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: directional safety/knowledge trade-off on the default world.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_directional_tradeoff() {
    let start = Instant::now();
    let config = WorldConfig::default();
    let world = gen_world(&config).unwrap();
    let layers = default_target_layers(&config.encoder);
    let scores =
        flow_scores(&world.model, &world.train, &layers, Prior::TextMagnitude, 2).unwrap();
    let base =
        uwm_core::safeground::evaluate_model(&world.model, &world.test, &world.knowledge, 2)
            .unwrap();

    let mut gs_curve = Vec::new();
    let mut zs_curve = Vec::new();
    let mut at_default = None;
    for tau in [0.005f32, 0.01, 0.02, 0.05] {
        let mask = adaptive_select(&scores, tau).unwrap();
        let plan = EditPlan {
            mask,
            alpha: -1.0,
            selector: Selector::Tau(tau),
            provenance: String::new(),
        };
        let edited = apply_edit_pair(&world.model, &plan).unwrap();
        let m = uwm_core::safeground::evaluate_model(&edited, &world.test, &world.knowledge, 2)
            .unwrap();
        gs_curve.push(m.gs);
        zs_curve.push(m.zeroshot);
        if tau == 0.02 {
            at_default = Some(m);
        }
    }
    let m = at_default.expect("tau 0.02 in the grid");
    println!(
        "  base Put {:.3} Puv {:.3} zs {:.3}; tau=0.02 Put {:.3} Puv {:.3} zs {:.3}",
        base.put, base.puv, base.zeroshot, m.put, m.puv, m.zeroshot
    );
    println!("  GS over tau grid: {gs_curve:?}");
    println!("  zero-shot over tau grid: {zs_curve:?}");
    assert!(m.put > base.put, "P_t_u did not strictly increase");
    assert!(m.puv > base.puv, "P_v_u did not strictly increase");
    assert!(
        base.zeroshot - m.zeroshot < 0.15,
        "zero-shot dropped by {:.3}",
        base.zeroshot - m.zeroshot
    );
    assert!(
        gs_curve.windows(2).all(|w| w[1] >= w[0]),
        "GS not monotone over the tau sweep: {gs_curve:?}"
    );
    assert!(
        zs_curve.windows(2).all(|w| w[1] <= w[0]),
        "zero-shot not non-increasing over the tau sweep: {zs_curve:?}"
    );
    println!(
        "PASS: criterion 7 - edit strictly improves unsafe-input preferences, keeps zero-shot within budget, and the tau sweep is monotone in {:.2?}",
        start.elapsed()
    );
}
