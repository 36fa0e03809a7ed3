//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use exin::effect::{effect_scan_exhaustive, EffectOptions, EiScore, ScanMode};
use exin::engine::explain_sentence;
use exin::importance::{mark_importance, skip_importance};
use exin::perturbation::{build_gram_matrix, run_batch, sequential_oracle};
use exin::report::{render_ansi, render_html};
use exin::{
    explain, Counting, EffectLabel, ExplainConfig, ExplanationReport, LinearModel, LossKind,
    PhraseEffect, Record, RecordId, Span, Task, TokenizedSentence, Vocabulary,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

// Pinned tolerances and budgets.
const C1_TOLERANCE: f64 = 0.0;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_BUDGET: Duration = Duration::from_secs(10);
const C3_TOLERANCE: f64 = 1e-9;
const C6_BUDGET: Duration = Duration::from_secs(60);
const C6_EXHAUSTIVE_ROWS: u64 = 12_502_500;
const C7_TOLERANCE: f64 = 1e-9;

const VOCAB_SIZE: u32 = 200;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_coefficients(rng: &mut StdRng, vocab: u32) -> Vec<(u32, f64)> {
    let mut out = Vec::new();
    for i in 1..=vocab {
        if rng.gen_bool(0.9) {
            out.push((i, rng.gen_range(-2.0..2.0)));
        }
    }
    out
}

fn random_regression(rng: &mut StdRng) -> LinearModel {
    let bias = rng.gen_range(-1.0..1.0);
    LinearModel::regression(bias, random_coefficients(rng, VOCAB_SIZE))
}

fn random_classifier(rng: &mut StdRng, classes: usize) -> LinearModel {
    let biases = (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coefficients = (0..classes)
        .map(|_| random_coefficients(rng, VOCAB_SIZE).into_iter().collect())
        .collect();
    LinearModel::classification(biases, coefficients).unwrap()
}

/// Token indices in 1..=VOCAB_SIZE + 1; the last one has no coefficient and
/// plays the out-of-vocabulary token.
fn random_sentence(rng: &mut StdRng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(1..=VOCAB_SIZE + 1)).collect()
}

fn c1_batch_equals_sequential() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(1);
    let start = Instant::now();
    let mut matrices = 0;
    for i in 0..200 {
        let model = match i % 3 {
            0 => random_classifier(&mut rng, 2 + i % 4),
            _ => random_regression(&mut rng),
        };
        let n = rng.gen_range(1..=50);
        let row = random_sentence(&mut rng, n);
        for g in 1..=n {
            let m = build_gram_matrix(&row, g).map_err(|e| e.to_string())?;
            let batched = run_batch(&m, &model).map_err(|e| e.to_string())?;
            let sequential = sequential_oracle(&m, &model).map_err(|e| e.to_string())?;
            for r in 0..m.len() {
                let (a, b) = (batched.get(r), sequential.get(r));
                let classes = a.num_classes().map_or(vec![None], |q| (0..q).map(Some).collect());
                for c in classes {
                    let diff = (a.value(c) - b.value(c)).abs();
                    ensure(diff <= C1_TOLERANCE, || {
                        format!("sentence {i}, g={g}, row {r}: {a:?} vs {b:?}")
                    })?;
                }
            }
            matrices += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < C1_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{matrices} matrices identical, {elapsed:.2?}"))
}

fn c2_loss_monotonicity() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(2);
    let start = Instant::now();
    let mut masked = 0;
    for i in 0..500 {
        let model = random_regression(&mut rng);
        let n = rng.gen_range(1..=40);
        let row = random_sentence(&mut rng, n);
        let target = rng.gen_range(-5.0..5.0);
        for kind in [LossKind::Mae, LossKind::Mse] {
            let mask = mark_importance(&row, target, &model, kind).map_err(|e| e.to_string())?;
            let losses = mask.losses.ok_or("no loss summary")?;
            // Recompute both losses from scratch.
            let loss = |y: f64| match kind {
                LossKind::Mae => (y - target).abs(),
                LossKind::Mse => (y - target) * (y - target),
            };
            let all = loss(model.predict_row(&row).value(None));
            let imp = loss(model.predict_row(&mask.masked_row).value(None));
            ensure(all == losses.loss_all && imp == losses.loss_imp, || {
                format!("triple {i} ({kind}): reported {losses:?}, recomputed {all} / {imp}")
            })?;
            ensure(imp <= all, || {
                format!("triple {i} ({kind}): loss_imp {imp} > loss_all {all}")
            })?;
            if mask.masked_row != row {
                masked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < C2_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 scans (500 triples x MAE/MSE), {masked} masked something, {elapsed:.2?}"
    ))
}

fn sign(x: f64, tol: f64) -> i8 {
    if x > tol {
        1
    } else if x < -tol {
        -1
    } else {
        0
    }
}

fn c3_linear_sign_fidelity() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(3);
    let config = ExplainConfig {
        mode: Some(ScanMode::Exhaustive),
        ..Default::default()
    };
    let mut cases = 0;
    let mut attempts = 0;
    while cases < 1000 {
        attempts += 1;
        ensure(attempts < 100_000, || format!("only {cases} cases found"))?;
        // A large bias keeps most baselines positive; the rest are filtered.
        let model = LinearModel::regression(
            rng.gen_range(2.0..8.0),
            (1..=VOCAB_SIZE).map(|i| {
                let magnitude = rng.gen_range(0.01..1.5);
                (i, if rng.gen_bool(0.5) { magnitude } else { -magnitude })
            }),
        );
        let n = rng.gen_range(1..=12);
        let sentence = TokenizedSentence::from_indices(random_sentence(&mut rng, n));
        let target = rng.gen_range(0.0..10.0);
        let out = explain_sentence(&sentence, Some(target), &model, &config)
            .map_err(|e| e.to_string())?;
        let baseline = out.scan.baseline.value(None);
        if baseline <= 0.0 {
            continue;
        }
        for e in &out.scan.effects {
            if e.span.len() != 1 || !out.mask.is_important(e.span.start) || cases == 1000 {
                continue;
            }
            let token = sentence.indices[e.span.start];
            let coefficient = model.coefficient(token, None);
            let ei = e.ei.ok_or_else(|| format!("important span {} unscored", e.span))?;
            ensure(sign(ei, C3_TOLERANCE) == sign(coefficient, C3_TOLERANCE), || {
                format!("token {token}: coefficient {coefficient}, EI {ei}")
            })?;
            // Linear oracle: removing one token changes the output by its coefficient.
            let expected = coefficient / baseline * 100.0;
            ensure((ei - expected).abs() <= C3_TOLERANCE * expected.abs().max(1.0), || {
                format!("token {token}: EI {ei}, oracle {expected}")
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} single-token cases agree ({attempts} sentences)"))
}

fn c4_invocation_complexity() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst = Vec::new();
    for n in [5usize, 20, 50] {
        let expected_rows: u64 = (1..=n).map(|g| (n - g + 1) as u64).sum();
        let mut most = 0;
        for trial in 0..25 {
            let model = random_regression(&mut rng);
            let row = random_sentence(&mut rng, n);
            let target = rng.gen_range(-5.0..5.0);

            let part1 = Counting::new(&model);
            let mask = mark_importance(&row, target, &part1, LossKind::Mae).map_err(|e| e.to_string())?;
            let part2 = Counting::new(&model);
            effect_scan_exhaustive(&mask, &part2, EffectOptions::default())
                .map_err(|e| e.to_string())?;
            let (c1, c2) = (part1.counts(), part2.counts());
            let total = c1.batch_invocations + c2.batch_invocations;
            ensure(total <= 2 * n as u64, || {
                format!("n={n} trial {trial}: {total} invocations")
            })?;
            ensure(c2.rows_predicted == expected_rows, || {
                format!("n={n} trial {trial}: part 2 predicted {} rows", c2.rows_predicted)
            })?;

            // The same run through the record-level entry point.
            let vocab_words: Vec<String> = (1..=VOCAB_SIZE).map(|i| format!("w{i}")).collect();
            let vocab = Vocabulary::from_tokens(&vocab_words);
            let text: Vec<String> = row
                .iter()
                .map(|&i| vocab_words.get(i as usize - 1).cloned().unwrap_or("zzz".into()))
                .collect();
            let record = Record {
                id: RecordId::Int(trial),
                text: text.join(" "),
                label: Some(target),
            };
            let report = explain(&record, &vocab, &model, &ExplainConfig::default());
            ensure(report.accounting.batch_invocations == total, || {
                format!("n={n}: report counts {} invocations, expected {total}", report.accounting.batch_invocations)
            })?;
            most = most.max(total);
        }
        worst.push(format!("n={n}: max {most} <= {}", 2 * n));
    }
    Ok(format!("{}; part 2 rows = n(n+1)/2", worst.join(", ")))
}

fn c5_matrix_shape() -> Result<String, String> {
    let mut matrices = 0;
    for n in 1..=64usize {
        let base: Vec<u32> = (1..=n as u32).collect();
        for g in 1..=n {
            let m = build_gram_matrix(&base, g).map_err(|e| e.to_string())?;
            ensure(m.len() == n - g + 1, || format!("n={n} g={g}: {} rows", m.len()))?;
            for (r, row) in m.rows().iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let want = if (r..r + g).contains(&j) { 0 } else { base[j] };
                    ensure(v == want && row.len() == n, || {
                        format!("n={n} g={g}: row {r} = {row:?}")
                    })?;
                }
            }
            matrices += 1;
        }
        ensure(build_gram_matrix(&base, 0).is_err() && build_gram_matrix(&base, n + 1).is_err(), || {
            format!("n={n}: out-of-range gram accepted")
        })?;
    }
    Ok(format!("{matrices} matrices checked"))
}

fn c6_early_stop_at_scale() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(6);
    let n = 5000;
    let model = LinearModel::regression(
        rng.gen_range(-1.0..1.0),
        (1..=2000u32).map(|i| (i, rng.gen_range(-1.0..1.0))),
    );
    let indices: Vec<u32> = (0..n).map(|_| rng.gen_range(1..=2000)).collect();
    let sentence = TokenizedSentence::from_indices(indices);
    let config = ExplainConfig {
        mode: Some(ScanMode::EarlyStop),
        ..Default::default()
    };
    let counting = Counting::new(&model);
    let start = Instant::now();
    let out = explain_sentence(&sentence, Some(3.0), &counting, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let counts = counting.counts();

    ensure(elapsed < C6_BUDGET, || format!("took {elapsed:?}"))?;
    let mut end = 0;
    for e in &out.scan.effects {
        ensure(e.span.start == end && !e.span.is_empty(), || {
            format!("span {} does not continue from {end}", e.span)
        })?;
        end = e.span.end;
    }
    ensure(end == n, || format!("spans stop at {end}"))?;
    ensure(counts.rows_predicted < C6_EXHAUSTIVE_ROWS, || {
        format!("{} rows predicted", counts.rows_predicted)
    })?;
    let scored = out.scan.effects.iter().filter(|e| e.ei.is_some()).count();
    Ok(format!(
        "{} spans ({scored} scored) tile [0, {n}), {} rows ({:.0}x fewer), {} invocations, longest span {}, {elapsed:.2?}",
        out.scan.effects.len(),
        counts.rows_predicted,
        C6_EXHAUSTIVE_ROWS as f64 / counts.rows_predicted as f64,
        counts.batch_invocations,
        out.scan.max_span_len
    ))
}

fn c7_antisymmetry() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(7);
    let mut both = 0;
    for i in 0..200 {
        let model = random_classifier(&mut rng, 2);
        let n = rng.gen_range(1..=20);
        let row = random_sentence(&mut rng, n);
        let start = rng.gen_range(0..n);
        let span = Span::new(start, rng.gen_range(start + 1..=n));
        let scan = effect_scan_exhaustive(&skip_importance(&row), &model, EffectOptions::default())
            .map_err(|e| e.to_string())?;
        let effect = scan
            .effects
            .iter()
            .find(|e| e.span == span)
            .ok_or_else(|| format!("phrase {i}: span {span} missing"))?;
        let [c0, c1] = match effect.scores.as_slice() {
            [a, b] => [a.value, b.value],
            other => return Err(format!("phrase {i}: {} scores", other.len())),
        };
        if c0.abs() > C7_TOLERANCE && c1.abs() > C7_TOLERANCE {
            ensure(c0.signum() != c1.signum(), || {
                format!("phrase {i} {span}: EI(c0) {c0}, EI(c1) {c1}")
            })?;
            both += 1;
        }
    }
    Ok(format!("200 phrases, {both} with both scores non-negligible, all opposite"))
}

fn write_cli_fixture(dir: &std::path::Path) {
    let mut rng = StdRng::seed_from_u64(8);
    let words: Vec<String> = (0..60).map(|i| format!("word{i}")).collect();
    let vocab = Vocabulary::from_tokens(&words);
    let model = LinearModel::regression(
        0.5,
        words.iter().map(|w| (vocab.index_of(w), rng.gen_range(-1.0..1.0))),
    );
    std::fs::write(dir.join("vocab.json"), vocab.to_json()).unwrap();
    std::fs::write(dir.join("model.json"), model.to_json()).unwrap();
    let mut lines = Vec::new();
    for i in 0..50 {
        let n = rng.gen_range(1..=25);
        let text: Vec<&str> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    "unseen"
                } else {
                    words[rng.gen_range(0..words.len())].as_str()
                }
            })
            .collect();
        let mut record = serde_json::json!({"id": format!("doc-{i}"), "text": text.join(" ")});
        if i % 2 == 0 {
            record["label"] = rng.gen_range(-3.0..3.0).into();
        }
        lines.push(record.to_string());
    }
    std::fs::write(dir.join("input.jsonl"), lines.join("\n")).unwrap();
}

fn run_cli(dir: &std::path::Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_exin"))
        .arg("explain")
        .arg("--model")
        .arg(format!("builtin:{}", dir.join("model.json").display()))
        .arg("--vocab")
        .arg(dir.join("vocab.json"))
        .arg("--input")
        .arg(dir.join("input.jsonl"))
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    Ok(out.stdout)
}

fn table_fixture() -> ExplanationReport {
    let text = "a bad movie that happened to good actors";
    let tokens: Vec<String> = text.split(' ').map(String::from).collect();
    let scored = |start, end, ei: f64| {
        let label = EffectLabel::from_score(ei, 1e-9);
        PhraseEffect {
            span: Span::new(start, end),
            label,
            ei: Some(ei),
            scores: vec![EiScore {
                class: None,
                value: ei,
                baseline: 1.0,
                excluded: 1.0 - ei / 100.0,
                raw_difference: false,
                label,
            }],
        }
    };
    let mut report = ExplanationReport::new(RecordId::Int(1), text, tokens, Task::Regression);
    report.set_effects(vec![
        scored(0, 3, -41.0),
        scored(1, 2, -30.0),
        scored(3, 6, 0.0),
        scored(6, 8, 27.5),
        scored(7, 8, 5.0),
    ]);
    report
}

fn c8_determinism_and_rendering() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_cli_fixture(dir.path());
    let first = run_cli(dir.path())?;
    let second = run_cli(dir.path())?;
    let lines = first.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    ensure(lines == 50, || format!("{lines} report lines"))?;
    ensure(first == second, || "outputs differ between runs".into())?;

    let report = table_fixture();
    let colored = render_ansi(&report, true);
    let want = "\x1b[1;31ma bad movie\x1b[0m that happened to \x1b[1;32mgood actors\x1b[0m";
    ensure(colored == want, || format!("ANSI rendering {colored:?}"))?;
    let plain = render_ansi(&report, false);
    ensure(plain == "[-a bad movie-] that happened to [+good actors+]", || {
        format!("plain rendering {plain:?}")
    })?;
    let html = render_html(&report);
    for needle in [
        "<span class=\"ei-neg\" title=\"EI -41.00%\">a bad movie</span>",
        "<span class=\"ei-pos\" title=\"EI +27.50%\">good actors</span>",
    ] {
        ensure(html.contains(needle), || format!("HTML lacks {needle}"))?;
    }
    Ok(format!(
        "50 records, {} bytes identical across runs; fixture renders red/green",
        first.len()
    ))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("batched equals sequential oracle", c1_batch_equals_sequential),
        ("loss monotonicity under MAE and MSE", c2_loss_monotonicity),
        ("linear sign fidelity", c3_linear_sign_fidelity),
        ("batch-invocation complexity", c4_invocation_complexity),
        ("gram matrix shape", c5_matrix_shape),
        ("early-stop mode at 5000 tokens", c6_early_stop_at_scale),
        ("two-class antisymmetry", c7_antisymmetry),
        ("CLI determinism and rendering", c8_determinism_and_rendering),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        match outcome {
            Ok(detail) => println!("PASS  criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
