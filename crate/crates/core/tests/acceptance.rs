//! Acceptance criteria 1-9. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout (bypassing libtest capture) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use kamir_core::awareness::{awareness_from_trace, extract_documents, ExtractOptions};
use kamir_core::classifier::{
    evaluate, loss_and_gradient, train_classifier, AwarenessClassifier, ClassifierConfig,
    LabeledVector,
};
use kamir_core::gradcheck::{central_difference, GradCheckReport};
use kamir_core::lm::{
    encode, forward_with_trace, pretrain, HiddenStateTrace, PositionKind, PretrainConfig,
};
use kamir_core::lora::lora_param_count;
use kamir_core::pipeline::{self, ExtractSource, PipelineConfig};
use kamir_core::report::{group_profiles, summary_text, GroupedVector};
use kamir_core::selection::{make_splits, to_jsonl, Group, Prediction};
use kamir_core::sft::{
    adapted_logits, document_metrics, example_gradient, group_dynamics, sft_train, summary_csv,
    LoraConfig, SftConfig, SftExample,
};
use kamir_core::{
    synth, DenseMatrix, Label, LmConfig, LoraTarget, MiniLmModel, SeededRng, TraceAnchor,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn trace(states: Vec<Vec<f32>>) -> HiddenStateTrace {
    HiddenStateTrace::new("t", states, PositionKind::FinalGeneratedToken).unwrap()
}

/// Cosine against the last state, accumulated in f64 from the raw f32s.
fn oracle_awareness(states: &[Vec<f32>]) -> Vec<f64> {
    let last = states.last().unwrap();
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    states[..states.len() - 1]
        .iter()
        .map(|h| {
            let dot: f64 = h.iter().zip(last).map(|(&a, &b)| a as f64 * b as f64).sum();
            dot / (norm(h) * norm(last))
        })
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_awareness_formula() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut lengths_ok = true;
    let mut rng = SeededRng::new(101);
    let mut cases: Vec<Vec<Vec<f32>>> = vec![
        vec![vec![1.0, 0.0], vec![1.0, 1.0]],
        vec![vec![3.0, 4.0, 0.0], vec![0.0, 1.0, 0.0], vec![-2.0, 0.5, 7.0], vec![1.0, 2.0, 2.0]],
    ];
    for n in [2usize, 4, 8] {
        for d in [1usize, 3, 16, 64] {
            for _ in 0..5 {
                cases.push(
                    (0..n)
                        .map(|_| (0..d).map(|_| (rng.normal() * 3.0) as f32).collect())
                        .collect(),
                );
            }
        }
    }
    for states in cases {
        let n = states.len();
        let v = awareness_from_trace(&trace(states.clone())).unwrap();
        lengths_ok &= v.values.len() == n - 1;
        worst = worst.max(max_abs_diff(&v.values, &oracle_awareness(&states)));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && lengths_ok && elapsed < Duration::from_secs(1);
    verdict(
        1,
        pass,
        &format!("max |error| {worst:.2e} (<= 1e-6), lengths N-1 {lengths_ok}, {:.3} s (< 1 s)", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_identity_and_boundaries() {
    let mut rng = SeededRng::new(202);
    let h: Vec<f32> = (0..16).map(|_| rng.normal() as f32).collect();
    let ones = awareness_from_trace(&trace(vec![h.clone(); 5])).unwrap();
    let identity_err = ones.values.iter().map(|&v| (v as f64 - 1.0).abs()).fold(0.0, f64::max);

    let neg: Vec<f32> = h.iter().map(|&x| -2.5 * x).collect();
    let anti = awareness_from_trace(&trace(vec![neg, h.clone()])).unwrap();
    let anti_err = (anti.values[0] as f64 + 1.0).abs();

    let mut scale_err = 0.0f64;
    for _ in 0..20 {
        let states: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..16).map(|_| rng.normal() as f32).collect())
            .collect();
        let base = awareness_from_trace(&trace(states.clone())).unwrap();
        for a in 0..states.len() {
            let c = (0.01 + rng.next_f64() * 100.0) as f32;
            let mut scaled = states.clone();
            scaled[a].iter_mut().for_each(|x| *x *= c);
            let v = awareness_from_trace(&trace(scaled)).unwrap();
            for (x, y) in v.values.iter().zip(&base.values) {
                scale_err = scale_err.max((x - y).abs() as f64);
            }
        }
    }
    let pass = identity_err <= 1e-6 && anti_err <= 1e-6 && scale_err <= 1e-6;
    verdict(
        2,
        pass,
        &format!("identical {identity_err:.2e}, antiparallel {anti_err:.2e}, scaling {scale_err:.2e} (all <= 1e-6)"),
    );
    assert!(pass);
}

/// BCE-with-logits of an MLP evaluated entirely in f64 from the classifier
/// weights; shares no code with the library's forward pass.
fn oracle_bce(layers: &[(Vec<f64>, Vec<f64>, usize, usize)], data: &[LabeledVector]) -> f64 {
    let mut total = 0.0;
    for ex in data {
        let mut x: Vec<f64> = ex.vector.values.iter().map(|&v| v as f64).collect();
        for (li, (w, b, rows, cols)) in layers.iter().enumerate() {
            let mut y = vec![0.0; *rows];
            for r in 0..*rows {
                y[r] = b[r] + (0..*cols).map(|c| w[r * cols + c] * x[c]).sum::<f64>();
                if li + 1 < layers.len() {
                    y[r] = y[r].max(0.0);
                }
            }
            x = y;
        }
        let z = x[0];
        let t = if ex.label == Label::Unfamiliar { 1.0 } else { 0.0 };
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    total / data.len() as f64
}

fn classifier_gradcheck(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = SeededRng::new(seed);
    let dim = 2 + rng.below(5);
    let mut clf = AwarenessClassifier::new(dim, &[5, 4], 0.5, seed).unwrap();
    // Zero biases put a unit fed only by dead ReLUs exactly on the kink,
    // where no derivative exists; random biases keep the instance generic.
    for l in &mut clf.layers {
        l.bias.iter_mut().for_each(|b| *b = (rng.normal() * 0.1) as f32);
    }
    let data: Vec<LabeledVector> = (0..8)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Familiar } else { Label::Unfamiliar };
            LabeledVector::new(format!("x{i}"), (0..dim).map(|_| rng.normal() as f32).collect(), label)
        })
        .collect();
    let refs: Vec<&LabeledVector> = data.iter().collect();
    let (_, grads) = loss_and_gradient(&clf, &refs).unwrap();
    let mut layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)> = clf
        .layers
        .iter()
        .map(|l| {
            (
                l.weight.as_slice().iter().map(|&v| v as f64).collect(),
                l.bias.iter().map(|&v| v as f64).collect(),
                l.weight.rows(),
                l.weight.cols(),
            )
        })
        .collect();
    let h = 1e-6;
    let mut pairs = Vec::new();
    for (li, g) in grads.layers.iter().enumerate() {
        for (i, &a) in g.weight.as_slice().iter().enumerate() {
            let x0 = layers[li].0[i];
            layers[li].0[i] = x0 + h;
            let plus = oracle_bce(&layers, &data);
            layers[li].0[i] = x0 - h;
            let minus = oracle_bce(&layers, &data);
            layers[li].0[i] = x0;
            pairs.push((a as f64, (plus - minus) / (2.0 * h)));
        }
        for (i, &a) in g.bias.iter().enumerate() {
            let x0 = layers[li].1[i];
            layers[li].1[i] = x0 + h;
            let plus = oracle_bce(&layers, &data);
            layers[li].1[i] = x0 - h;
            let minus = oracle_bce(&layers, &data);
            layers[li].1[i] = x0;
            pairs.push((a as f64, (plus - minus) / (2.0 * h)));
        }
    }
    pairs
}

fn small_lm(seed: u64) -> MiniLmModel {
    MiniLmModel::new(LmConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ffn_dim: 32,
        max_seq_len: 64,
        seed,
        ..LmConfig::default()
    })
    .unwrap()
}

fn lora_gradcheck(seed: u64) -> Vec<(f64, f64)> {
    let cfg = LoraConfig { targets: LoraTarget::ALL.to_vec(), seed, ..LoraConfig::default() };
    let mut a = cfg.attach(small_lm(seed)).unwrap();
    let mut rng = SeededRng::new(seed + 1000);
    for p in a.adapter_mut().unwrap().params_mut() {
        p.iter_mut().for_each(|v| *v = (rng.normal() * 0.1) as f32);
    }
    let ex = SftExample::from_text("g", "Q: which way?\nA: north", 64).unwrap();
    let (_, grads) = example_gradient(&a, &ex).unwrap();
    let sizes: Vec<usize> = grads.params().iter().map(|p| p.len()).collect();
    let flat: Vec<f32> = grads.params().concat();
    let mut pairs = Vec::new();
    for _ in 0..150 {
        let k = rng.below(flat.len());
        let (mut t, mut i) = (0, k);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let x0 = a.adapter().unwrap().params()[t][i];
        let num = central_difference(
            |x| {
                a.adapter_mut().unwrap().params_mut()[t][i] = x;
                example_gradient(&a, &ex).unwrap().0.loss
            },
            x0,
            1e-2,
        );
        a.adapter_mut().unwrap().params_mut()[t][i] = x0;
        pairs.push((flat[k] as f64, num));
    }
    pairs
}

#[test]
fn criterion_3_gradient_oracles() {
    let start = Instant::now();
    let clf_pairs: Vec<_> = (0..5).flat_map(classifier_gradcheck).collect();
    let lora_pairs: Vec<_> = (0..3).flat_map(lora_gradcheck).collect();
    let clf = GradCheckReport::from_pairs(&clf_pairs, 1e-3, 1e-2);
    let lora = GradCheckReport::from_pairs(&lora_pairs, 1e-3, 1e-2);
    let elapsed = start.elapsed();
    let pass = clf.fraction_within >= 0.99
        && lora.fraction_within >= 0.99
        && elapsed < Duration::from_secs(30);
    verdict(
        3,
        pass,
        &format!(
            "classifier {:.4} of {} coords, LoRA {:.4} of {} coords within 1e-2 (>= 0.99), {:.1} s (< 30 s)",
            clf.fraction_within,
            clf.coordinates,
            lora.fraction_within,
            lora.coordinates,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Pretrained default model plus held-out awareness vectors, built once on a
/// single-thread pool and shared by criteria 4, 5 and 8.
struct DeskFixture {
    model: MiniLmModel,
    familiar_texts: Vec<String>,
    unfamiliar_texts: Vec<String>,
    data: Vec<LabeledVector>,
    test_auc: Option<f64>,
    elapsed: Duration,
}

const DESK_PRETRAIN_STEPS: usize = 2000;

fn desk() -> &'static DeskFixture {
    static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        pool.install(|| {
            let start = Instant::now();
            let train = synth::corpus_a(400, 1, (200, 500));
            let held = synth::corpus_a(100, 2, (200, 500));
            let other = synth::corpus_b(100, 3, (200, 500));
            let mut model = MiniLmModel::new(LmConfig::default()).unwrap();
            let docs: Vec<Vec<u8>> = train.iter().map(|d| encode(&d.text)).collect();
            let pcfg = PretrainConfig { steps: DESK_PRETRAIN_STEPS, ..PretrainConfig::default() };
            pretrain(&mut model, &docs, &pcfg, &mut SeededRng::new(0)).unwrap();

            let inputs: Vec<(String, Vec<u8>)> = held
                .iter()
                .chain(&other)
                .map(|d| (d.id.clone(), encode(&d.text)))
                .collect();
            let vectors = extract_documents(&model, &inputs, &ExtractOptions::default());
            let data: Vec<LabeledVector> = vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| LabeledVector {
                    vector: v.unwrap(),
                    label: if i < held.len() { Label::Familiar } else { Label::Unfamiliar },
                })
                .collect();
            let (train_set, test_set) = pipeline::stratified_split(&data, 0.3, 0);
            let cfg = ClassifierConfig { lr: 1e-2, epochs: 500, ..ClassifierConfig::default() };
            let (clf, _) = train_classifier(&train_set, &cfg).unwrap();
            let test_auc = evaluate(&clf, &test_set).unwrap().auc;
            DeskFixture {
                model,
                familiar_texts: held.into_iter().map(|d| d.text).collect(),
                unfamiliar_texts: other.into_iter().map(|d| d.text).collect(),
                data,
                test_auc,
                elapsed: start.elapsed(),
            }
        })
    })
}

#[test]
fn criterion_4_desk_separability() {
    let f = desk();
    let auc = f.test_auc.unwrap_or(f64::NAN);
    let pass = auc >= 0.80 && f.elapsed <= Duration::from_secs(300);
    verdict(
        4,
        pass,
        &format!(
            "test AUC {auc:.4} (>= 0.80) on 100+100 held-out documents, {DESK_PRETRAIN_STEPS} pretraining steps, {:.1} s on one thread (<= 300 s)",
            f.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_5_group_profiles() {
    let f = desk();
    let grouped: Vec<GroupedVector> = f
        .data
        .iter()
        .map(|d| GroupedVector {
            doc_id: d.vector.doc_id.clone(),
            group: d.label.to_string(),
            values: d.vector.values.clone(),
        })
        .collect();
    let profiles = group_profiles(&grouped).unwrap();
    let fam = profiles.iter().find(|p| p.group == "familiar").unwrap();
    let unf = profiles.iter().find(|p| p.group == "unfamiliar").unwrap();

    // Independent per-layer moments straight from the vectors.
    let column = |label: Label, k: usize| -> Vec<f64> {
        f.data.iter().filter(|d| d.label == label).map(|d| d.vector.values[k] as f64).collect()
    };
    let mut best = (0usize, 0.0f64);
    for k in 0..fam.mean.len() {
        let (xa, xb) = (column(Label::Familiar, k), column(Label::Unfamiliar, k));
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64]| {
            let m = mean(x);
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
        };
        assert!((mean(&xa) - fam.mean[k]).abs() < 1e-9);
        assert!((var(&xb).sqrt() - unf.std[k]).abs() < 1e-9);
        let se = (var(&xa) / xa.len() as f64 + var(&xb) / xb.len() as f64).sqrt();
        let z = (mean(&xa) - mean(&xb)).abs() / se;
        if z > best.1 {
            best = (k + 1, z);
        }
    }
    let r = pearson(&fam.mean, &unf.mean);
    let pass = best.1 >= 3.0;
    verdict(
        5,
        pass,
        &format!(
            "largest gap {:.2} pooled standard errors at layer {} (>= 3); profile correlation {r:.3} (reported, expect >= 0.5: {})",
            best.1,
            best.0,
            r >= 0.5
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_split_contract() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 50, ..PropConfig::default() });
    let strategy = (
        prop::collection::vec((any::<bool>(), 0.0f64..1.0), 2..120),
        any::<u64>(),
        0usize..4,
    );
    let result = runner.run(&strategy, |(docs, seed, skip)| {
        let all_ids: Vec<String> = (0..docs.len()).map(|i| format!("doc-{i:03}")).collect();
        let mut preds: Vec<Prediction> = docs
            .iter()
            .enumerate()
            .map(|(i, &(unf, p))| Prediction {
                id: all_ids[i].clone(),
                label: if unf { Label::Unfamiliar } else { Label::Familiar },
                probability: p,
                values: vec![0.5],
            })
            .collect();
        preds[0].label = Label::Familiar;
        preds[1].label = Label::Unfamiliar;
        // Documents that failed extraction have no prediction.
        let kept: Vec<Prediction> =
            preds.into_iter().enumerate().filter(|(i, _)| *i < 2 || i % 7 != skip).map(|(_, p)| p).collect();
        let m = make_splits(&all_ids, &kept, "c", "k", seed, None).unwrap();
        let again = make_splits(&all_ids, &kept, "c", "k", seed, None).unwrap();
        prop_assert_eq!(&m, &again);

        let fam: BTreeSet<&String> = m.familiar_ids.iter().collect();
        let unf: BTreeSet<&String> = m.unfamiliar_ids.iter().collect();
        prop_assert!(fam.is_disjoint(&unf));
        let labeled: BTreeSet<&String> = kept.iter().map(|p| &p.id).collect();
        prop_assert_eq!(fam.union(&unf).copied().collect::<BTreeSet<_>>(), labeled);
        for p in &kept {
            let in_fam = fam.contains(&p.id);
            prop_assert_eq!(in_fam, p.label == Label::Familiar);
        }

        let rnd: BTreeSet<&String> = m.random_ids.iter().collect();
        prop_assert_eq!(rnd.len(), m.random_ids.len());
        prop_assert_eq!(m.random_ids.len(), fam.len().min(unf.len()));
        prop_assert!(m.random_ids.iter().all(|id| all_ids.contains(id)));
        Ok(())
    });
    let elapsed = start.elapsed();
    let pass = result.is_ok() && elapsed < Duration::from_secs(10);
    verdict(
        6,
        pass,
        &format!(
            "partition, equal-size control and determinism on 50 randomized corpora: {}, {:.2} s (< 10 s)",
            match &result {
                Ok(()) => "held".to_string(),
                Err(e) => format!("violated ({e})"),
            },
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_lora_contracts() {
    let start = Instant::now();
    let model = small_lm(7);
    let cfg = model.config().clone();
    let digest = model.weight_digest();

    // Closed form from the layer shapes, written out independently.
    let (d, ffn, r) = (cfg.hidden_dim, cfg.ffn_dim, 4usize);
    let shape = |t: LoraTarget| match t {
        LoraTarget::FfnIn => (d, ffn),
        LoraTarget::FfnOut => (ffn, d),
        _ => (d, d),
    };
    let mut count_ok = true;
    for targets in [vec![LoraTarget::QProj, LoraTarget::VProj], LoraTarget::ALL.to_vec()] {
        let expected: usize =
            cfg.n_layers * targets.iter().map(|&t| r * (shape(t).0 + shape(t).1)).sum::<usize>();
        let a = LoraConfig { rank: r, targets: targets.clone(), ..LoraConfig::default() }
            .attach(model.clone())
            .unwrap();
        count_ok &= a.adapter().unwrap().param_count() == expected;
        count_ok &= lora_param_count(&model, r, &targets) == expected;
    }

    let probes: Vec<Vec<u8>> = ["Q: x\nA: y", "the quiet fox", "zz"]
        .iter()
        .map(|s| encode(s))
        .collect();
    let fresh = LoraConfig { targets: LoraTarget::ALL.to_vec(), ..LoraConfig::default() }
        .attach(model.clone())
        .unwrap();
    let zero_init_exact = probes.iter().all(|t| {
        let (base, _) = forward_with_trace(&model, t, TraceAnchor::PreFinalNorm).unwrap();
        adapted_logits(&fresh, t).unwrap() == base
    });

    let mut adapted = LoraConfig::default().attach(model.clone()).unwrap();
    let examples: Vec<SftExample> = ["Q: sky?\nA: blue", "Q: grass?\nA: green", "Q: snow?\nA: white"]
        .iter()
        .enumerate()
        .map(|(i, t)| SftExample::from_text(&format!("e{i}"), t, 64).unwrap())
        .collect();
    let scfg = SftConfig { steps: 30, lr: 1e-2, batch_size: 2, seed: 1 };
    sft_train(&mut adapted, &examples, &scfg, Group::Familiar).unwrap();
    let frozen = adapted.base().weight_digest() == digest;
    let trained: Vec<DenseMatrix> = probes.iter().map(|t| adapted_logits(&adapted, t).unwrap()).collect();
    let moved = trained.iter().zip(&probes).any(|(l, t)| {
        l != &forward_with_trace(&model, t, TraceAnchor::PreFinalNorm).unwrap().0
    });
    let merged = adapted.merge().unwrap();
    let mut merge_diff = 0.0f32;
    for (t, l) in probes.iter().zip(&trained) {
        let (m, _) = forward_with_trace(&merged, t, TraceAnchor::PreFinalNorm).unwrap();
        for (x, y) in m.as_slice().iter().zip(l.as_slice()) {
            merge_diff = merge_diff.max((x - y).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = frozen
        && count_ok
        && zero_init_exact
        && moved
        && merge_diff <= 1e-4
        && elapsed < Duration::from_secs(30);
    verdict(
        7,
        pass,
        &format!(
            "frozen base {frozen}, closed-form count {count_ok}, zero-init bit-exact {zero_init_exact}, merge max logit diff {merge_diff:.2e} (<= 1e-4), {:.2} s (< 30 s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Loss and entropy over the scored positions, from logits in f64.
fn oracle_doc_stats(logits: &DenseMatrix, targets: &[Option<u8>]) -> (f64, f64) {
    let (mut loss, mut ent, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let row: Vec<f64> = logits.row(p).iter().map(|&v| v as f64).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[*t as usize];
        ent -= row.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>();
        n += 1;
    }
    (loss / n as f64, ent / n as f64)
}

#[test]
fn criterion_8_dynamics_metrics() {
    // Uniform next-token distribution.
    let mut flat = small_lm(8);
    let d = flat.config().hidden_dim;
    flat.lm_head.weight = DenseMatrix::zeros(256, d);
    flat.lm_head.bias = vec![0.0; 256];
    let uniform = LoraConfig::default().attach(flat).unwrap();
    let ex = vec![SftExample::from_text("u", "Q: any?\nA: thing at all", 64).unwrap()];
    let h = document_metrics(&uniform, &ex).unwrap()[0].entropy;
    let uniform_err = (h - 256f64.ln()).abs();

    // Group summaries against per-document brute force.
    let f = desk();
    let max_len = f.model.config().max_seq_len;
    let mut adapted = LoraConfig::default().attach(f.model.clone()).unwrap();
    let mut rng = SeededRng::new(99);
    for p in adapted.adapter_mut().unwrap().params_mut() {
        p.iter_mut().for_each(|v| *v += (rng.normal() * 0.02) as f32);
    }
    let mk = |prefix: &str, texts: &[String]| -> Vec<SftExample> {
        texts
            .iter()
            .take(12)
            .enumerate()
            .map(|(i, t)| SftExample::from_text(&format!("{prefix}{i}"), t, max_len).unwrap())
            .collect()
    };
    let familiar = mk("f", &f.familiar_texts);
    let unfamiliar = mk("u", &f.unfamiliar_texts);
    let random: Vec<SftExample> = {
        let pool: Vec<&SftExample> = familiar.iter().chain(&unfamiliar).collect();
        let mut idx = rng.sample_without_replacement(pool.len(), 12);
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    let groups = vec![
        (Group::Familiar, familiar),
        (Group::Unfamiliar, unfamiliar),
        (Group::Random, random),
    ];
    let summaries = group_dynamics(&adapted, &groups).unwrap();
    let mut brute_err = 0.0f64;
    for ((_, exs), s) in groups.iter().zip(&summaries) {
        let (mut l, mut e, mut g) = (0.0, 0.0, 0.0);
        for ex in exs {
            let (dl, de) = oracle_doc_stats(&adapted_logits(&adapted, &ex.input).unwrap(), &ex.targets);
            let (_, grads) = example_gradient(&adapted, ex).unwrap();
            let sq: f64 = grads.params().iter().flat_map(|p| p.iter()).map(|&v| (v as f64).powi(2)).sum();
            l += dl;
            e += de;
            g += sq.sqrt();
        }
        let n = exs.len() as f64;
        for (got, want) in [(s.mean_loss, l / n), (s.mean_entropy, e / n), (s.mean_grad_norm, g / n)] {
            brute_err = brute_err.max((got - want).abs());
        }
    }

    let csv = String::from_utf8(summary_csv(&summaries).unwrap()).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    let layout_ok = rows.len() == 4
        && rows[0] == "group,mean_loss,mean_entropy,mean_grad_norm"
        && rows[1].starts_with("familiar,")
        && rows[2].starts_with("unfamiliar,")
        && rows[3].starts_with("random,");

    let grouped: Vec<GroupedVector> = f
        .data
        .iter()
        .map(|d| GroupedVector {
            doc_id: d.vector.doc_id.clone(),
            group: d.label.to_string(),
            values: d.vector.values.clone(),
        })
        .collect();
    let text = summary_text(&group_profiles(&grouped).unwrap(), None, Some(&summaries));
    let rendered = text.contains("Directional findings");
    let by: BTreeMap<Group, _> = summaries.iter().map(|s| (s.group, s)).collect();
    let (fa, un) = (by[&Group::Familiar], by[&Group::Unfamiliar]);

    let pass = uniform_err <= 1e-4 && brute_err <= 1e-5 && layout_ok && rendered;
    verdict(
        8,
        pass,
        &format!(
            "uniform entropy error {uniform_err:.2e} (<= 1e-4), summary vs brute force {brute_err:.2e} (<= 1e-5), CSV layout {layout_ok}, direction rendered {rendered}; soft: unfamiliar entropy higher {} ({:.3} vs {:.3}), grad norm higher {} ({:.3} vs {:.3})",
            un.mean_entropy > fa.mean_entropy,
            un.mean_entropy,
            fa.mean_entropy,
            un.mean_grad_norm > fa.mean_grad_norm,
            un.mean_grad_norm,
            fa.mean_grad_norm
        ),
    );
    assert!(pass);
}

fn tiny_pipeline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model = LmConfig {
        n_layers: 3,
        hidden_dim: 32,
        n_heads: 2,
        ffn_dim: 64,
        max_seq_len: 128,
        ..LmConfig::default()
    };
    cfg.pretrain.train.steps = 600;
    cfg.pretrain.train.seq_len = 48;
    cfg.extract.chunk_len = 64;
    cfg.extract.max_output = 8;
    cfg.classifier.train.hidden = vec![8];
    cfg.classifier.train.epochs = 300;
    cfg.classifier.train.lr = 0.01;
    cfg.sft.steps = 3;
    cfg.sft.batch_size = 2;
    cfg
}

fn write_corpora(dir: &Path) {
    let range = (60, 90);
    let mut labeled = synth::corpus_a(10, 2, range);
    labeled.iter_mut().for_each(|d| {
        d.id = format!("held-{}", d.id);
        d.label = Some(Label::Familiar);
    });
    let mut b = synth::corpus_b(10, 3, range);
    b.iter_mut().for_each(|d| d.label = Some(Label::Unfamiliar));
    labeled.extend(b);
    let mut target = synth::qa_documents("qa-a", 5, 4, true);
    target.extend(synth::qa_documents("qa-b", 5, 5, false));
    std::fs::create_dir_all(dir).unwrap();
    for (name, docs) in [
        ("pretrain.jsonl", synth::corpus_a(20, 1, range)),
        ("labeled.jsonl", labeled),
        ("target.jsonl", target),
    ] {
        std::fs::write(dir.join(name), to_jsonl(&docs).unwrap()).unwrap();
    }
}

/// Runs every stage, reading stage inputs from `src` and writing to `out`.
fn run_stages(cfg: &PipelineConfig, data: &Path, src: &Path, out: &Path) {
    let model = src.join("pretrain").join(pipeline::MODEL_FILE);
    let clf = src.join("clf").join(pipeline::CLASSIFIER_FILE);
    let labeled_csv = src.join("extract").join(pipeline::AWARENESS_FILE);
    pipeline::pretrain_stage(cfg, &data.join("pretrain.jsonl"), &out.join("pretrain")).unwrap();
    let source = ExtractSource::Corpus { model: model.clone(), corpus: data.join("labeled.jsonl") };
    pipeline::extract_stage(cfg, &source, None, &out.join("extract")).unwrap();
    pipeline::train_clf_stage(cfg, std::slice::from_ref(&labeled_csv), &out.join("clf")).unwrap();
    pipeline::classify_stage(cfg, &model, &clf, &data.join("target.jsonl"), &out.join("classify")).unwrap();
    pipeline::select_stage(cfg, &model, &clf, &data.join("target.jsonl"), &out.join("select")).unwrap();
    let manifest = src.join("select").join(pipeline::MANIFEST_FILE);
    pipeline::sft_stage(cfg, &model, &manifest, Group::Unfamiliar, None, &out.join("sft")).unwrap();
    let summary = src.join("sft").join(pipeline::SUMMARY_FILE);
    pipeline::report_stage(&[labeled_csv], Some(&summary), &out.join("report")).unwrap();
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_corpora(&data);
    let cfg = tiny_pipeline_config();
    let reference = tmp.path().join("ref");
    let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    pool(1).install(|| run_stages(&cfg, &data, &reference, &reference));
    let want = tree(&reference);
    let mut mismatches = Vec::new();
    for (name, threads) in [("rerun-1", 1), ("threads-4", 4), ("threads-4b", 4)] {
        let out = tmp.path().join(name);
        pool(threads).install(|| run_stages(&cfg, &data, &reference, &out));
        let got = tree(&out);
        if got.keys().ne(want.keys()) {
            mismatches.push(format!("{name}: different file set"));
        }
        for (path, bytes) in &want {
            if got.get(path) != Some(bytes) {
                mismatches.push(format!("{name}: {}", path.display()));
            }
        }
    }
    let pass = mismatches.is_empty() && want.len() >= 15;
    verdict(
        9,
        pass,
        &format!(
            "{} stage outputs byte-identical across a rerun and --threads 4 (mismatches: {:?})",
            want.len(),
            mismatches
        ),
    );
    assert!(pass);
}
