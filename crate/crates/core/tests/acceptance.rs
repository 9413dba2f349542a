//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fail.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use granary::dataset::{pack_sequences, render_chat_template, tokenize_and_mask, TokenizedExample};
use granary::distiller::{distill_corpus, BackendError, ChatRequest, DistillConfig, EntryStatus, QtsaEntry, RejectReason};
use granary::evalharness::{extract_answer, grade, load_quiz};
use granary::jsonl::write_jsonl;
use granary::tinylm::gradcheck::{check_coordinates, sample_coordinates, DEFAULT_STEP};
use granary::tinylm::{freeze_reference, ByteTokenizer, ModelConfig, Parameters, TokenId, EOS, VOCAB_SIZE};
use granary::trainer::{
    kl_term, lr_at, mean_kl, objective, objective_with_grad, save_run, train, TrainConfig, TrainMode, TrainOutcome,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// One sample per fixture node, untruncated.
fn descent_fixture() -> Vec<TokenizedExample> {
    let entries: Vec<QtsaEntry> = common::fixture_entries()
        .into_iter()
        .filter(|e| e.sample_idx == 0)
        .collect();
    to_examples(&entries)
}

fn held_out_fixture() -> Vec<TokenizedExample> {
    let entries: Vec<QtsaEntry> = common::fixture_entries()
        .into_iter()
        .filter(|e| e.sample_idx == 1)
        .collect();
    to_examples(&entries)
}

fn to_examples(entries: &[QtsaEntry]) -> Vec<TokenizedExample> {
    let tok = ByteTokenizer;
    entries
        .iter()
        .map(|e| tokenize_and_mask(&render_chat_template(e, "").unwrap(), &tok))
        .collect()
}

fn random_example(rng: &mut ChaCha8Rng, len: usize) -> TokenizedExample {
    let input_ids = (0..len).map(|_| rng.random_range(0..256)).collect();
    let mut loss_mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
    loss_mask[len - 1] = true;
    TokenizedExample { input_ids, loss_mask }
}

// 1
fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_heads = rng.random_range(1..=3);
        let cfg = ModelConfig {
            d_model: n_heads * rng.random_range(2..=6),
            n_layers: rng.random_range(1..=3),
            n_heads,
            context_window: rng.random_range(8..=24),
            init_std: rng.random_range(0.1..0.5),
            seed,
            ..Default::default()
        };
        let params = Parameters::init(&cfg).unwrap();
        let reference = Parameters::init(&ModelConfig { seed: seed + 100, ..cfg }).unwrap();
        let data: Vec<TokenizedExample> = (0..2)
            .map(|_| {
                let len = rng.random_range(cfg.context_window / 2..=cfg.context_window + 6);
                random_example(&mut rng, len)
            })
            .collect();
        let (_, grad) = objective_with_grad(&params, &data, Some((&reference, 0.1))).unwrap();
        let coords = sample_coordinates(params.len(), 200, seed);
        let report = check_coordinates(&params, &grad, &coords, DEFAULT_STEP, 1e-4, |p| {
            Ok(objective(p, &data, Some((&reference, 0.1))).unwrap().total)
        })
        .unwrap();
        worst = worst.max(report.max_rel_err);
        lines.push(format!("seed {seed}: {} params, max rel err {:.2e}", params.len(), report.max_rel_err));
    }
    check(worst <= 1e-4, format!("{} (tol 1e-4)", lines.join("; ")))
}

// 2
fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = Normal::<f64>::new(0.0, 3.0).unwrap();
    let mut max_dev: f64 = 0.0;
    let mut max_self: f64 = 0.0;
    for _ in 0..100 {
        let probs = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..VOCAB_SIZE).map(|_| normal.sample(rng).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p = probs(&mut rng);
        let q = probs(&mut rng);
        let oracle: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let got = kl_term(&lp, &lq, VOCAB_SIZE, &[true]).unwrap();
        max_dev = max_dev.max((got - oracle).abs());
        max_self = max_self.max(kl_term(&lp, &lp, VOCAB_SIZE, &[true]).unwrap().abs());
    }
    let one_hot = [0.0, f64::NEG_INFINITY];
    let half = [0.5f64.ln(), 0.5f64.ln()];
    let ln2_dev = (kl_term(&one_hot, &half, 2, &[true]).unwrap() - std::f64::consts::LN_2).abs();
    check(
        max_dev <= 1e-10 && max_self <= 1e-12 && ln2_dev <= 1e-12,
        format!("max |kl - oracle| {max_dev:.2e}, max kl(p,p) {max_self:.2e}, |one-hot - ln2| {ln2_dev:.2e}"),
    )
}

// 3
fn reduction_identity() -> Outcome {
    let data = descent_fixture();
    let init = Parameters::init(&ModelConfig::default()).unwrap();
    let reference = freeze_reference(&init);
    let base = TrainConfig {
        lr_max: 1e-2,
        total_steps: 30,
        ..Default::default()
    };
    let sft = TrainConfig {
        mode: TrainMode::Sft,
        ..base.clone()
    };
    let nsc = TrainConfig {
        mode: TrainMode::NscSft,
        lambda: 0.0,
        ..base
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (name, cfg) in [("sft", &sft), ("nsc", &nsc)] {
        let mut out: TrainOutcome = train(cfg, &data, init.clone(), Some(&reference)).unwrap();
        let run = dir.path().join(name);
        save_run(&run, &mut out).unwrap();
        let read = |f: &str| std::fs::read(run.join(f)).unwrap();
        files.push((read("model.ckpt"), read("train_report.jsonl"), read("train_summary.json")));
    }
    let same = files[0] == files[1];
    check(
        same,
        format!("30-step runs: checkpoint, per-step report and summary {}", if same { "byte-identical" } else { "differ" }),
    )
}

// 4
fn descent_property() -> Outcome {
    let data = descent_fixture();
    let init = Parameters::init(&ModelConfig::default()).unwrap();
    let mut lines = Vec::new();
    let mut any = false;
    for lr in [1e-2, 1e-3, 1e-4] {
        let cfg = TrainConfig {
            lr_max: lr,
            total_steps: 200,
            ..Default::default()
        };
        let s = train(&cfg, &data, init.clone(), None).unwrap().report.summary.unwrap();
        let ratio = s.final_loss / s.initial_loss;
        let ok = s.non_increasing_fraction >= 0.95 && s.final_loss <= 0.8 * s.initial_loss;
        any |= ok;
        lines.push(format!(
            "lr {lr:.0e}: non-increasing {:.1}%, final/initial {ratio:.3}{}",
            100.0 * s.non_increasing_fraction,
            if ok { " *" } else { "" }
        ));
    }
    check(any, lines.join("; "))
}

// 5
fn nsc_effect() -> Outcome {
    let data = descent_fixture();
    let held = held_out_fixture();
    let init = Parameters::init(&ModelConfig::default()).unwrap();
    let reference = freeze_reference(&init);
    let before = reference.fingerprint();
    let mut kls = Vec::new();
    for lambda in [0.0, 0.1] {
        let cfg = TrainConfig {
            mode: TrainMode::NscSft,
            lambda,
            lr_max: 1e-2,
            total_steps: 200,
            ..Default::default()
        };
        let out = train(&cfg, &data, init.clone(), Some(&reference)).unwrap();
        kls.push(mean_kl(&out.params, &reference, &held).unwrap());
    }
    let unchanged = reference.fingerprint() == before;
    check(
        kls[1] < kls[0] && unchanged,
        format!(
            "held-out KL λ=0: {:.4e}, λ=0.1: {:.4e}; reference hash {}",
            kls[0],
            kls[1],
            if unchanged { "unchanged" } else { "CHANGED" }
        ),
    )
}

// 6
fn distill_determinism() -> Outcome {
    let nodes = common::fixture_nodes();
    let dir = tempfile::tempdir().unwrap();
    let full = distill_corpus(&nodes, &common::distill_cfg(), &common::faulty_mock()).unwrap();
    let s = &full.stats;
    let missing = full
        .entries
        .iter()
        .filter(|e| e.status == EntryStatus::Rejected(RejectReason::MissingAnswer))
        .count();
    let counts_ok = nodes.len() == 6 && s.attempted == 30 && s.kept == 27 && s.rejected == 3 && missing == 3;
    let uninterrupted = dir.path().join("full.jsonl");
    write_jsonl(&uninterrupted, &full.entries).unwrap();

    // "kill" after 13 tasks, tear the last journal line, then resume
    let journal = dir.path().join("journal.jsonl");
    let partial_cfg = DistillConfig {
        journal_path: Some(journal.clone()),
        max_new_tasks: Some(13),
        ..common::distill_cfg()
    };
    let first = distill_corpus(&nodes, &partial_cfg, &common::faulty_mock()).unwrap();
    let mut j = std::fs::OpenOptions::new().append(true).open(&journal).unwrap();
    std::io::Write::write_all(&mut j, b"{\"node_id\":\"dead").unwrap();
    drop(j);
    let resume_cfg = DistillConfig {
        max_new_tasks: None,
        ..partial_cfg
    };
    let backend = common::faulty_mock();
    let resumed = distill_corpus(&nodes, &resume_cfg, &backend).unwrap();
    let resumed_path = dir.path().join("resumed.jsonl");
    write_jsonl(&resumed_path, &resumed.entries).unwrap();
    let identical = std::fs::read(&uninterrupted).unwrap() == std::fs::read(&resumed_path).unwrap();
    let requeried = resumed.stats.newly_processed;
    check(
        counts_ok && identical && first.stats.newly_processed == 13 && requeried == 17,
        format!(
            "{} nodes: attempted {}, kept {}, rejected {} ({missing} missing_answer); resume after 13 tasks ran {requeried} more, output {}",
            nodes.len(),
            s.attempted,
            s.kept,
            s.rejected,
            if identical { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

// 7
fn packing_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let examples: Vec<TokenizedExample> = (0..1000)
        .map(|_| {
            let len = rng.random_range(1..=8192);
            TokenizedExample {
                input_ids: (0..len).map(|_| rng.random_range(0..VOCAB_SIZE as TokenId)).collect(),
                loss_mask: (0..len).map(|_| rng.random_bool(0.5)).collect(),
            }
        })
        .collect();
    let packs = pack_sequences(&examples, 8192).unwrap();
    let longest = packs.iter().map(|p| p.len()).max().unwrap_or(0);

    let mut before: BTreeMap<(TokenId, bool), usize> = BTreeMap::new();
    for e in &examples {
        for (&id, &m) in e.input_ids.iter().zip(&e.loss_mask) {
            *before.entry((id, m)).or_default() += 1;
        }
    }
    let mut after: BTreeMap<(TokenId, bool), usize> = BTreeMap::new();
    for p in &packs {
        for (&id, &m) in p.ids.iter().zip(&p.mask) {
            *after.entry((id, m)).or_default() += 1;
        }
    }
    let unpacked: Vec<TokenizedExample> = packs
        .iter()
        .flat_map(|p| (0..p.segments.len()).map(|i| p.segment(i)).collect::<Vec<_>>())
        .collect();
    let contiguous = packs.iter().all(|p| {
        let mut at = 0;
        p.segments.iter().all(|s| {
            let ok = s.offset == at;
            at += s.length;
            ok
        }) && at == p.len()
    });
    check(
        before == after && longest <= 8192 && unpacked == examples && contiguous,
        format!(
            "1000 examples -> {} packs, longest {longest}, multiset {}, order {}",
            packs.len(),
            if before == after { "preserved" } else { "CHANGED" },
            if unpacked == examples { "preserved" } else { "CHANGED" }
        ),
    )
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '\n', '<', '>', '/', 'é', 'Ω', '→', '𝛌', '\t', '|', '.'];
    let len = rng.random_range(1..=max);
    (0..len).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
}

// 8
fn masking_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tok = ByteTokenizer;
    let mut bad = 0;
    for i in 0..100 {
        let entry = QtsaEntry {
            entry_id: format!("e{i}"),
            node_id: "n".into(),
            sample_idx: 0,
            question: random_text(&mut rng, 80),
            thinking: random_text(&mut rng, 200),
            solution: random_text(&mut rng, 200),
            answer: random_text(&mut rng, 10),
            status: EntryStatus::Kept,
        };
        let system = if rng.random_bool(0.5) { random_text(&mut rng, 40) } else { String::new() };
        let ex = render_chat_template(&entry, &system).unwrap();
        let t = tokenize_and_mask(&ex, &tok);
        let masked: Vec<TokenId> = t
            .input_ids
            .iter()
            .zip(&t.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect();
        let mut expected = tok.encode_str(&ex.assistant);
        expected.push(EOS);
        let text_ok = masked.last() == Some(&EOS) && tok.decode(&masked[..masked.len() - 1]) == ex.assistant.as_bytes();
        if masked != expected || !text_ok {
            bad += 1;
        }
    }
    check(bad == 0, format!("100 random entries, {bad} with a mask/decode mismatch"))
}

// 9
fn eval_harness() -> Outcome {
    let items = load_quiz(&common::fixtures().join("quiz.jsonl")).unwrap();
    let has_noise_item = items.iter().any(|i| i.stem.contains("g_m3/g_m1"));
    // right on every item except the thevenin one
    let scripted = |req: &ChatRequest| -> Result<String, BackendError> {
        let user = req.last_user().unwrap_or("");
        let letter = if user.contains("Kirchhoff") {
            "B"
        } else if user.contains("Thevenin") {
            "A"
        } else if user.contains("common-source") {
            "C"
        } else {
            "B"
        };
        Ok(format!("<think>\nworking\n</think>\n\n<answer>{letter}</answer>"))
    };
    let report = grade(&items, &scripted, 2).unwrap();

    let crafted: [(&str, Option<&str>); 10] = [
        ("…reasoning…<answer>C</answer>", Some("C")),
        ("The answer is B.", Some("B")),
        ("no letter here", None),
        ("<answer> D </answer>", Some("D")),
        ("<answer>A</answer> on reflection <answer>C</answer>", Some("C")),
        ("Answer: C", Some("C")),
        ("<answer>C<answer>", None),
        ("<answer>maybe B</answer> so the answer is (A)", Some("A")),
        ("answer - D", Some("D")),
        ("<think>the answer is B</think> final answer: C", Some("C")),
    ];
    let mismatches: Vec<&str> = crafted
        .iter()
        .filter(|(text, want)| extract_answer(text).as_deref() != *want)
        .map(|(text, _)| *text)
        .collect();
    check(
        items.len() == 4 && has_noise_item && report.accuracy == 0.75 && mismatches.is_empty(),
        format!(
            "4-item quiz accuracy {:.2}; crafted extraction strings {}/10 correct",
            report.accuracy,
            10 - mismatches.len()
        ),
    )
}

// 10
fn schedule_shape() -> Outcome {
    let lr_max = 1e-3;
    let mut worst: f64 = 0.0;
    for t in [20usize, 200, 1000] {
        let wc = (0.1 * t as f64).round() as usize;
        worst = worst.max((lr_at(wc - 1, lr_max, 0.1, t) - lr_max).abs());
        assert_eq!((t - wc) % 2, 0);
        let mid = wc + (t - wc) / 2;
        worst = worst.max((lr_at(mid, lr_max, 0.1, t) - lr_max / 2.0).abs());
    }
    check(worst <= 1e-12, format!("T in {{20, 200, 1000}}: max deviation {worst:.2e}"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness (NSC-SFT, 3 random configs)", gradient_correctness),
        ("KL oracle", kl_oracle),
        ("reduction identity (λ=0 vs SFT)", reduction_identity),
        ("descent property", descent_property),
        ("NSC directional effect", nsc_effect),
        ("distillation determinism and resume", distill_determinism),
        ("packing conservation", packing_conservation),
        ("masking soundness", masking_soundness),
        ("eval harness", eval_harness),
        ("schedule shape", schedule_shape),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
