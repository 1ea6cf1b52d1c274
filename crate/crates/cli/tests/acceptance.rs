//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Every expected value is recomputed here by an
//! independent oracle rather than taken from the library under test.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vltrack_core::dataset::{
    load_corpus, save_corpus, Attribute, AttributeFlags, RlRecord, SequenceAnnotation, SftSample,
};
use vltrack_core::geometry::iou;
use vltrack_core::grpo::{group_advantages, kl_categorical, objective_value, KlMode, PolicyStep};
use vltrack_core::metrics::{aggregate, evaluate_corpus, EvalReport, TrackOutput};
use vltrack_core::model_client::stub::StubServer;
use vltrack_core::model_client::{EndpointConfig, RetryPolicy};
use vltrack_core::response_format::{format_rewards, parse, parse_bytes, Decision};
use vltrack_core::reward::{iou_reward, judge_reward, DEFAULT_THETA};
use vltrack_core::tracking::{
    run, ChatRefiner, FrameRef, LoopConfig, OracleTracker, RecordingTracker, RunResult,
    ScriptedRefiner, Strategy,
};
use vltrack_core::{BoundingBox, Execution};

const IOU_TOL: f64 = 1e-9;
const ADV_EXACT_TOL: f64 = 1e-12;
const ADV_STAT_TOL: f64 = 1e-9;
const KL_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-9;

const GEOMETRY_BUDGET: Duration = Duration::from_secs(5);
const FORMAT_BUDGET: Duration = Duration::from_secs(10);
const METRICS_BUDGET: Duration = Duration::from_secs(10);
const LOOP_RUN_BUDGET: Duration = Duration::from_secs(1);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within_budget(start: Instant, budget: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < budget, "took {took:?}, budget {budget:?}");
    Ok(took)
}

// 1. geometry

fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let covers =
        |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[0] + r[2] && y >= r[1] && y < r[1] + r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let x1 = (a[0] + a[2]).max(b[0] + b[2]);
    let y1 = (a[1] + a[3]).max(b[1] + b[3]);
    for y in y0..y1 {
        for x in x0..x1 {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn to_box(r: [i64; 4]) -> BoundingBox {
    BoundingBox {
        x: r[0] as f64,
        y: r[1] as f64,
        w: r[2] as f64,
        h: r[3] as f64,
    }
}

fn criterion_geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0..64),
            rng.random_range(0..64),
            rng.random_range(0..=64),
            rng.random_range(0..=64),
        ]
    };
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (gen(&mut rng), gen(&mut rng));
        let (ba, bb) = (to_box(a), to_box(b));
        let v = iou(&ba, &bb).map_err(|e| e.to_string())?;
        let diff = (v - raster_iou(a, b)).abs();
        worst = worst.max(diff);
        ensure!(
            diff <= IOU_TOL,
            "{a:?} {b:?}: analytic {v} vs raster {}",
            raster_iou(a, b)
        );
        ensure!(iou(&bb, &ba).unwrap() == v, "asymmetric on {a:?} {b:?}");
        let (dx, dy) = (
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
        );
        let moved = iou(&ba.translated(dx, dy), &bb.translated(dx, dy)).unwrap();
        ensure!(
            (moved - v).abs() <= IOU_TOL,
            "translation by ({dx},{dy}) changed {v} to {moved}"
        );
    }
    let took = within_budget(start, GEOMETRY_BUDGET)?;
    Ok(format!(
        "10000 pairs, max |analytic - raster| = {worst:.1e}, {took:.2?}"
    ))
}

// 2. format rewards

fn criterion_format() -> Outcome {
    let start = Instant::now();
    let t = "<think>reasoning</think>";
    let a = "<answer>a red car</answer>";
    let d = |v: &str| format!("<d>{v}</d>");
    // (d content, level when the spans are ordered)
    let contents = [("yes", 2u8), ("no", 2), ("YES", 2), ("maybe", 1), ("", 1)];
    let mut cases: Vec<(String, u8)> = Vec::new();
    for (v, ordered_level) in contents {
        let dv = d(v);
        cases.push((format!("{t}{dv}{a}"), ordered_level));
        cases.push((format!("{t}\n {dv}\n{a}"), ordered_level));
        for perm in [
            [&dv[..], t, a],
            [t, a, &dv[..]],
            [a, t, &dv[..]],
            [&dv[..], a, t],
            [a, &dv[..], t],
        ] {
            cases.push((perm.concat(), 1));
        }
        cases.push((format!("{dv}{a}"), 0));
        cases.push((format!("{t}{a}"), 0));
        cases.push((format!("{t}{dv}"), 0));
        cases.push((format!("<think>r{dv}</think>{a}"), 1));
        cases.push((format!("{t}<answer>x{dv}</answer>"), 1));
        cases.push((format!("<think>r{dv}{a}</think>"), 1));
        cases.push((format!("<think>r{dv}{a}"), 1));
    }
    for (raw, want) in &cases {
        let r = parse(raw);
        ensure!(
            r.level as u8 == *want,
            "{raw:?}: level {} expected {want}",
            r.level as u8
        );
        let f = format_rewards(&r);
        ensure!(
            (f.format1, f.format2) == (u8::from(*want >= 1), u8::from(*want == 2)),
            "{raw:?}: rewards {f:?}"
        );
        if *want < 2 {
            ensure!(
                r.effective_decision() == Decision::Invalid,
                "{raw:?}: decision should be invalid"
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = [
        "<think>",
        "</think>",
        "<d>",
        "</d>",
        "<answer>",
        "</answer>",
        "yes",
        "no",
        "YES",
        " ",
        "x",
        "<",
        ">",
        "/",
        "\n",
        "é",
    ];
    let mut well_formed = 0;
    for _ in 0..100_000 {
        // Half the strings start from a well-formed reply and get mutated, so
        // level 2 is actually reached.
        let s: String = if rng.random_bool(0.5) {
            let mut parts: Vec<&str> = vec![
                "<think>",
                "x",
                "</think>",
                "<d>",
                ["yes", "no", "YES"][rng.random_range(0..3)],
                "</d>",
                "<answer>",
                "x",
                "</answer>",
            ];
            for _ in 0..rng.random_range(0..3) {
                let i = rng.random_range(0..parts.len());
                match rng.random_range(0..3) {
                    0 => {
                        parts.remove(i);
                    }
                    1 => parts.insert(i, tokens[rng.random_range(0..tokens.len())]),
                    _ => {
                        let j = rng.random_range(0..parts.len());
                        parts.swap(i, j);
                    }
                }
            }
            parts.concat()
        } else {
            let n = rng.random_range(0..12);
            (0..n)
                .map(|_| tokens[rng.random_range(0..tokens.len())])
                .collect()
        };
        let f = format_rewards(&parse(&s));
        ensure!(f.format2 <= f.format1, "format2 without format1 on {s:?}");
        well_formed += usize::from(f.format2 == 1);
    }

    let result = panic::catch_unwind(|| {
        let mut bytes = vec![0u8; 4096];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let len = rng.random_range(0..bytes.len());
            rng.fill(&mut bytes[..len]);
            let _ = parse_bytes(&bytes[..len]);
        }
        let big: Vec<u8> = (0..1 << 20).map(|i| b"<d>yes</d>\xff"[i % 11]).collect();
        let _ = parse_bytes(&big);
    });
    ensure!(result.is_ok(), "parser panicked on random bytes");
    let took = within_budget(start, FORMAT_BUDGET)?;
    Ok(format!("{} table rows, 100000 fuzzed strings ({well_formed} level 2), 20001 byte strings, {took:.2?}", cases.len()))
}

// 3. judge and IoU gate

fn expected_judge(decision: Decision, iou1: f64, iou2: f64) -> u8 {
    match decision {
        Decision::Yes => u8::from(iou1 < iou2),
        Decision::No => u8::from(iou1 >= iou2),
        Decision::Invalid => 0,
    }
}

fn strip(width: f64) -> (BoundingBox, BoundingBox) {
    (
        BoundingBox {
            x: 0.0,
            y: 0.0,
            w: 100.0,
            h: 1.0,
        },
        BoundingBox {
            x: 0.0,
            y: 0.0,
            w: width,
            h: 1.0,
        },
    )
}

fn criterion_judge() -> Outcome {
    let mut cells = 0;
    for decision in [Decision::Yes, Decision::No, Decision::Invalid] {
        for (iou1, iou2) in [(0.3, 0.5), (0.5, 0.5), (0.7, 0.5)] {
            let got = judge_reward(decision, iou1, iou2).map_err(|e| e.to_string())?;
            ensure!(
                got == expected_judge(decision, iou1, iou2),
                "{decision:?} ({iou1}, {iou2}) -> {got}"
            );
            cells += 1;
        }
    }
    ensure!(DEFAULT_THETA == 0.61, "default theta {DEFAULT_THETA}");
    let theta = 0.61;
    let (gt, at) = strip(61.0);
    let exact = iou(&gt, &at).unwrap();
    ensure!(exact == theta, "fixture IoU {exact} is not exactly theta");
    ensure!(
        iou_reward(&gt, &at, theta).unwrap() == 0.0,
        "IoU exactly at theta must give 0"
    );
    let (_, below) = strip(61.0 - 1e-6);
    ensure!(
        iou_reward(&gt, &below, theta).unwrap() == 0.0,
        "IoU just below theta must give 0"
    );
    let (_, above) = strip(61.0 + 1e-6);
    let v = iou(&gt, &above).unwrap();
    ensure!(
        v > theta && iou_reward(&gt, &above, theta).unwrap() == v,
        "IoU just above theta must pass through"
    );
    Ok(format!(
        "{cells}/9 judge cells, gate boundary at theta = {theta}"
    ))
}

// 4. advantages

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn criterion_advantages() -> Outcome {
    let got = group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let want = [2.0, -0.5, -0.5, -0.5, -0.5];
    ensure!(
        got.iter()
            .zip(want)
            .all(|(g, w)| (g - w).abs() <= ADV_EXACT_TOL),
        "[1,0,0,0,0] -> {got:?}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let adv = group_advantages(&rewards).unwrap();
        let (m, s) = population_stats(&adv);
        ensure!(
            m.abs() <= ADV_STAT_TOL && (s - 1.0).abs() <= ADV_STAT_TOL,
            "mean {m} std {s} for {rewards:?}"
        );
        let (scale, shift) = (rng.random_range(0.1..10.0), rng.random_range(-10.0..10.0));
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = group_advantages(&moved).unwrap();
        ensure!(
            adv.iter()
                .zip(&adv2)
                .all(|(a, b)| (a - b).abs() <= ADV_STAT_TOL),
            "affine map changed advantages"
        );
        let c = rng.random_range(-3.0..3.0);
        ensure!(
            group_advantages(&vec![c; n])
                .unwrap()
                .iter()
                .all(|&a| a == 0.0),
            "constant group {c} x {n}"
        );
    }
    Ok("exact example, 1000 random groups, constant and affine checks".into())
}

// 5. KL and objective

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn criterion_kl() -> Outcome {
    let kl = kl_categorical(&[0.5, 0.5], &[0.25, 0.75]).map_err(|e| e.to_string())?;
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    ensure!(
        (kl - want).abs() <= KL_TOL && (kl - 0.143841).abs() <= KL_TOL,
        "kl = {kl}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let v = kl_categorical(&p, &q).unwrap();
        ensure!(
            v > 0.0 && (v - kl_oracle(&p, &q)).abs() <= 1e-12,
            "kl(p, q) = {v} for distinct p, q"
        );
        ensure!(
            kl_categorical(&p, &p).unwrap().abs() <= 1e-15,
            "kl(p, p) != 0"
        );
    }

    let ln2 = 2f64.ln();
    let step = PolicyStep::new(-1.0, -1.0 - ln2, -1.0 - ln2);
    let obj = objective_value(&[step], 0.5, 0.1, KlMode::Sampled).map_err(|e| e.to_string())?;
    let want = 2.0 * 0.5 - 0.1 * (0.5 + ln2 - 1.0);
    ensure!(
        (obj - want).abs() <= KL_TOL && (obj - 0.980685).abs() <= KL_TOL,
        "objective = {obj}"
    );

    for _ in 0..100 {
        let steps: Vec<PolicyStep> = (0..rng.random_range(1..6))
            .map(|_| {
                PolicyStep::new(
                    -rng.random_range(0.01..3.0),
                    -rng.random_range(0.01..3.0),
                    -rng.random_range(0.01..3.0),
                )
            })
            .collect();
        let adv = rng.random_range(-2.0..2.0);
        let (b1, b2) = (rng.random_range(0.0..1.0), rng.random_range(1.0..2.0));
        let lo = objective_value(&steps, adv, b1, KlMode::Sampled).unwrap();
        let hi = objective_value(&steps, adv, b2, KlMode::Sampled).unwrap();
        ensure!(
            hi <= lo,
            "objective rose with beta: {lo} at {b1}, {hi} at {b2}"
        );
    }
    Ok(format!(
        "kl = {kl:.6}, objective = {obj:.6}, 1000 Gibbs pairs, 100 beta pairs"
    ))
}

// 6. metrics

struct OracleSeq {
    ious: Vec<f64>,
    err: Vec<f64>,
    nerr: Vec<f64>,
}

fn oracle_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = w.max(0.0) * h.max(0.0);
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn oracle_seq(gt: &SequenceAnnotation, pred: &TrackOutput) -> OracleSeq {
    let mut o = OracleSeq {
        ious: vec![],
        err: vec![],
        nerr: vec![],
    };
    for (i, (g, p)) in gt.gt_boxes.iter().zip(&pred.boxes).enumerate() {
        if gt.absent[i] || g.w <= 0.0 || g.h <= 0.0 {
            continue;
        }
        let (dx, dy) = (
            (p.x + p.w / 2.0) - (g.x + g.w / 2.0),
            (p.y + p.h / 2.0) - (g.y + g.h / 2.0),
        );
        o.ious.push(oracle_overlap(g, p));
        o.err.push((dx * dx + dy * dy).sqrt());
        o.nerr
            .push(((dx / g.w).powi(2) + (dy / g.h).powi(2)).sqrt());
    }
    o
}

fn frac(xs: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    xs.iter().filter(|&&x| pass(x)).count() as f64 / xs.len() as f64
}

struct SeqScores {
    pr: f64,
    npr: f64,
    sr: f64,
    ao: f64,
    sr50: f64,
    sr75: f64,
    precision: Vec<f64>,
    norm: Vec<f64>,
    success: Vec<f64>,
}

fn oracle_scores(o: &OracleSeq) -> SeqScores {
    let success: Vec<f64> = (0..=20)
        .map(|i| frac(&o.ious, |v| v > i as f64 / 20.0))
        .collect();
    let precision: Vec<f64> = (0..=50).map(|i| frac(&o.err, |v| v <= i as f64)).collect();
    let norm: Vec<f64> = (0..=50)
        .map(|i| frac(&o.nerr, |v| v <= i as f64 / 100.0))
        .collect();
    SeqScores {
        pr: precision[20],
        npr: norm.iter().sum::<f64>() / 51.0,
        sr: success.iter().sum::<f64>() / 21.0,
        ao: o.ious.iter().sum::<f64>() / o.ious.len() as f64,
        sr50: frac(&o.ious, |v| v > 0.5),
        sr75: frac(&o.ious, |v| v > 0.75),
        precision,
        norm,
        success,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= METRIC_TOL
}

fn check_report(
    report: &EvalReport,
    anns: &[SequenceAnnotation],
    outs: &[TrackOutput],
) -> Result<(), String> {
    let scored: Vec<(usize, _)> = anns
        .iter()
        .zip(outs)
        .enumerate()
        .map(|(i, (a, p))| (i, oracle_seq(a, p)))
        .filter(|(_, o)| !o.ious.is_empty())
        .map(|(i, o)| (i, oracle_scores(&o)))
        .collect();
    ensure!(
        report.sequences == scored.len(),
        "scored {} vs oracle {}",
        report.sequences,
        scored.len()
    );
    ensure!(
        report.empty_sequences.len() == anns.len() - scored.len(),
        "empty sequence count"
    );
    let mean = |f: &dyn Fn(&SeqScores) -> f64, idx: &[usize]| {
        let picked: Vec<f64> = scored
            .iter()
            .filter(|(i, _)| idx.contains(i))
            .map(|(_, s)| f(s))
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    let all: Vec<usize> = scored.iter().map(|(i, _)| *i).collect();
    let fields: [(&str, f64, f64); 6] = [
        ("pr", report.pr, mean(&|s| s.pr, &all)),
        ("npr", report.npr, mean(&|s| s.npr, &all)),
        ("sr", report.sr_auc, mean(&|s| s.sr, &all)),
        ("ao", report.ao, mean(&|s| s.ao, &all)),
        ("sr_050", report.sr_050, mean(&|s| s.sr50, &all)),
        ("sr_075", report.sr_075, mean(&|s| s.sr75, &all)),
    ];
    for (name, got, want) in fields {
        ensure!(close(got, want), "{name}: {got} vs oracle {want}");
    }
    for k in 0..51 {
        ensure!(
            close(report.precision_curve[k], mean(&|s| s.precision[k], &all)),
            "precision curve at {k}"
        );
        ensure!(
            close(report.norm_precision_curve[k], mean(&|s| s.norm[k], &all)),
            "norm precision curve at {k}"
        );
    }
    for k in 0..21 {
        ensure!(
            close(report.success_curve[k], mean(&|s| s.success[k], &all)),
            "success curve at {k}"
        );
    }
    for attr in Attribute::ALL {
        let members: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&i| anns[i].attributes.has(attr))
            .collect();
        match (&report.per_attribute[&attr], members.is_empty()) {
            (None, true) => {}
            (Some(s), false) => {
                ensure!(s.sequences == members.len(), "{attr} member count");
                ensure!(close(s.pr, mean(&|x| x.pr, &members)), "{attr} pr");
                ensure!(close(s.npr, mean(&|x| x.npr, &members)), "{attr} npr");
                ensure!(close(s.sr_auc, mean(&|x| x.sr, &members)), "{attr} sr");
            }
            (got, _) => {
                return Err(format!(
                    "{attr}: entry {got:?} but {} members",
                    members.len()
                ))
            }
        }
    }
    Ok(())
}

fn synthetic_eval_set(seed: u64) -> (Vec<SequenceAnnotation>, Vec<TrackOutput>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anns = Vec::new();
    let mut outs = Vec::new();
    for s in 0..100 {
        let n = rng.random_range(1..=200);
        let absent_rate = [0.0, 0.1, 0.5, 1.0][s % 4];
        let mut attributes = AttributeFlags::default();
        for a in Attribute::ALL.iter().take(Attribute::COUNT - 1) {
            attributes.set(*a, rng.random_bool(0.3));
        }
        let mut gt_boxes = Vec::with_capacity(n);
        let mut absent = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let is_absent = rng.random_bool(absent_rate);
            let zero = !is_absent && rng.random_bool(0.02);
            let g = if is_absent || zero {
                BoundingBox {
                    x: 5.0,
                    y: 5.0,
                    w: 0.0,
                    h: if zero { 4.0 } else { 0.0 },
                }
            } else {
                BoundingBox {
                    x: rng.random_range(0.0..300.0),
                    y: rng.random_range(0.0..300.0),
                    w: rng.random_range(1.0..80.0),
                    h: rng.random_range(1.0..80.0),
                }
            };
            let jitter = rng.random_range(0.0..40.0);
            let p = BoundingBox {
                x: g.x + rng.random_range(-jitter..=jitter),
                y: g.y + rng.random_range(-jitter..=jitter),
                w: (g.w + rng.random_range(-jitter..=jitter)).max(0.0),
                h: (g.h + rng.random_range(-jitter..=jitter)).max(0.0),
            };
            gt_boxes.push(g);
            absent.push(is_absent);
            boxes.push(p);
        }
        let id = format!("seq{s:03}");
        anns.push(SequenceAnnotation {
            sequence_id: id.clone(),
            gt_boxes,
            absent,
            language: "target".into(),
            attributes,
        });
        outs.push(TrackOutput {
            sequence_id: id,
            boxes,
        });
    }
    (anns, outs)
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let (anns, outs) = synthetic_eval_set(6);
    let report = aggregate(
        &evaluate_corpus(&anns, &outs, Execution::Parallel).map_err(|e| e.to_string())?,
        &anns,
    );
    check_report(&report, &anns, &outs)?;

    let mut garbage = outs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (a, o) in anns.iter().zip(garbage.iter_mut()) {
        for (i, b) in o.boxes.iter_mut().enumerate() {
            if a.absent[i] {
                *b = match rng.random_range(0..3) {
                    0 => BoundingBox {
                        x: f64::NAN,
                        y: f64::INFINITY,
                        w: -3.0,
                        h: f64::NAN,
                    },
                    1 => BoundingBox {
                        x: -1e9,
                        y: 1e9,
                        w: 1e6,
                        h: 0.0,
                    },
                    _ => a.gt_boxes[i],
                };
            }
        }
    }
    let again = aggregate(
        &evaluate_corpus(&anns, &garbage, Execution::Sequential).map_err(|e| e.to_string())?,
        &anns,
    );
    ensure!(
        again == report,
        "garbage on absent frames changed the report"
    );

    let perfect: Vec<TrackOutput> = anns
        .iter()
        .map(|a| TrackOutput {
            sequence_id: a.sequence_id.clone(),
            boxes: a.gt_boxes.clone(),
        })
        .collect();
    let p = aggregate(
        &evaluate_corpus(&anns, &perfect, Execution::Parallel).unwrap(),
        &anns,
    );
    ensure!(
        p.ao == 1.0 && p.sr_050 == 1.0 && p.sr_075 == 1.0 && p.pr == 1.0,
        "perfect tracker: {} {} {} {}",
        p.ao,
        p.sr_050,
        p.sr_075,
        p.pr
    );
    let took = within_budget(start, METRICS_BUDGET)?;
    Ok(format!(
        "{} sequences ({} scored), all fields within {METRIC_TOL:e}, {took:.2?}",
        anns.len(),
        report.sequences
    ))
}

// 7. loop conformance

const NO_REPLY: &str = "<think>unchanged</think><d>no</d><answer>same</answer>";

fn yes_reply(answer: &str) -> String {
    format!("<think>changed</think><d>yes</d><answer>{answer}</answer>")
}

fn loop_fixture(n: usize) -> (Vec<FrameRef>, Vec<BoundingBox>) {
    let frames = (1..=n)
        .map(|t| FrameRef {
            number: t,
            image: format!("seq/img/{t:08}.jpg"),
        })
        .collect();
    let gt = (0..n)
        .map(|i| BoundingBox {
            x: (i % 300) as f64,
            y: 20.0,
            w: 30.0,
            h: 40.0,
        })
        .collect();
    (frames, gt)
}

fn timed_run(
    frames: &[FrameRef],
    gt: &[BoundingBox],
    tracker: impl vltrack_core::tracking::TrackerPort,
    refiner: impl vltrack_core::tracking::RefinerPort,
    config: &LoopConfig,
) -> Result<RunResult, String> {
    let start = Instant::now();
    let r = run(
        "synthetic",
        frames,
        &gt[0],
        "the initial sentence",
        tracker,
        refiner,
        config,
    )
    .map_err(|e| e.to_string())?;
    within_budget(start, LOOP_RUN_BUDGET)?;
    ensure!(
        r.is_complete() && r.output.boxes.len() == frames.len(),
        "run incomplete"
    );
    ensure!(
        r.output.boxes.as_slice() == gt,
        "noise-free oracle output differs from ground truth"
    );
    Ok(r)
}

fn criterion_loop() -> Outcome {
    let (frames, gt) = loop_fixture(1000);
    let oracle = || OracleTracker::new(gt.clone(), 0.0, 0);
    for u in [50, 100, 300, 500, 1000] {
        let config = LoopConfig {
            update_interval: u,
            strategy: Strategy::Dynamic1,
            ..LoopConfig::default()
        };
        let mut refiner = ScriptedRefiner::always(NO_REPLY);
        let r = timed_run(&frames, &gt, oracle(), &mut refiner, &config)?;
        let got: Vec<usize> = r.events.iter().map(|e| e.frame_index).collect();
        let want: Vec<usize> = (1..=1000).filter(|t| t % u == 0).collect();
        ensure!(got == want, "u = {u}: events at {got:?}");
        ensure!(
            refiner.calls.iter().map(|c| c.current).collect::<Vec<_>>() == want,
            "u = {u}: refiner calls"
        );
        ensure!(
            r.events
                .iter()
                .all(|e| e.new_language == "the initial sentence"),
            "always-no changed the language"
        );

        let mut tracker = RecordingTracker::new(oracle());
        let static_cfg = LoopConfig {
            strategy: Strategy::Static,
            ..config.clone()
        };
        let mut never = ScriptedRefiner::always(&yes_reply("x"));
        let r = timed_run(&frames, &gt, &mut tracker, &mut never, &static_cfg)?;
        ensure!(
            r.refiner_calls == 0 && never.calls.is_empty(),
            "static strategy called the refiner"
        );
        ensure!(
            tracker
                .calls
                .iter()
                .all(|c| c.language == "the initial sentence"),
            "static language drifted"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let garbage: Vec<String> = (0..40)
        .map(|_| {
            let n = rng.random_range(0..60);
            (0..n)
                .map(|_| {
                    [
                        "<d>",
                        "yes",
                        "</answer>",
                        "<think>",
                        "\u{0}",
                        "garbage",
                        "<answer>",
                    ][rng.random_range(0..7)]
                })
                .collect()
        })
        .filter(|s: &String| parse(s).level as u8 == 0)
        .collect();
    let mut tracker = RecordingTracker::new(oracle());
    let config = LoopConfig {
        update_interval: 50,
        strategy: Strategy::Dynamic2,
        ..LoopConfig::default()
    };
    let r = timed_run(
        &frames,
        &gt,
        &mut tracker,
        ScriptedRefiner::replies(&garbage),
        &config,
    )?;
    ensure!(
        r.events.len() == 20 && r.events.iter().all(|e| !e.accepted),
        "level-0 replies were accepted"
    );
    ensure!(
        tracker
            .calls
            .iter()
            .all(|c| c.language == "the initial sentence"),
        "level-0 replies changed the language"
    );

    let server = StubServer::chat(NO_REPLY);
    let endpoint = EndpointConfig {
        retry: RetryPolicy {
            max_attempts: 1,
            base_delay_ms: 1,
        },
        ..EndpointConfig::with_url(server.url())
    };
    let config = LoopConfig {
        update_interval: 100,
        ..LoopConfig::default()
    };
    let r = timed_run(&frames, &gt, oracle(), ChatRefiner::new(endpoint), &config)?;
    ensure!(
        r.events.len() == 10 && server.requests().len() == 10,
        "stub server saw {} requests",
        server.requests().len()
    );
    Ok("u in {50,100,300,500,1000}: events exactly at multiples of u; static 0 calls; level-0 safe; loopback stub".into())
}

// 8. strategy semantics

fn criterion_strategies() -> Outcome {
    let (frames, gt) = loop_fixture(60);
    let script: Vec<String> = ["first", "second", "third", "fourth", "fifth", "sixth"]
        .iter()
        .map(|s| yes_reply(s))
        .collect();
    let initial = "the initial sentence";
    let run_with = |strategy: Strategy| {
        let mut tracker = RecordingTracker::new(OracleTracker::new(gt.clone(), 0.0, 0));
        let mut refiner = ScriptedRefiner::replies(&script);
        let config = LoopConfig {
            update_interval: 10,
            strategy,
            ..LoopConfig::default()
        };
        run(
            "s",
            &frames,
            &gt[0],
            initial,
            &mut tracker,
            &mut refiner,
            &config,
        )
        .unwrap();
        (tracker.calls, refiner.calls)
    };

    let (_, calls) = run_with(Strategy::Dynamic1);
    ensure!(
        calls.len() == 6 && calls.iter().all(|c| c.language == initial),
        "dynamic1 refiner saw {:?}",
        calls
    );

    let (tcalls, calls) = run_with(Strategy::Dynamic2);
    let want: Vec<&str> = [initial, "first", "second", "third", "fourth", "fifth"].to_vec();
    ensure!(
        calls
            .iter()
            .map(|c| c.language.as_str())
            .collect::<Vec<_>>()
            == want,
        "dynamic2 refiner saw {:?}",
        calls
    );
    ensure!(
        tcalls[10].language == "first" && tcalls[59].language == "fifth",
        "dynamic2 tracker language"
    );

    let (tcalls, calls) = run_with(Strategy::DynamicStatic);
    ensure!(
        calls.iter().all(|c| c.language == initial),
        "dynamic_static refiner language"
    );
    for (i, c) in tcalls.iter().enumerate() {
        let t = i + 1;
        let dynamic = match (t - 1) / 10 {
            0 => initial,
            k => ["first", "second", "third", "fourth", "fifth"][k - 1],
        };
        ensure!(
            c.language == format!("{dynamic}; {initial}"),
            "frame {t}: tracker saw {:?}",
            c.language
        );
    }
    Ok(
        "dynamic1 -> initial, dynamic2 -> last accepted, dynamic_static -> \"dynamic; static\""
            .into(),
    )
}

// 9. dataset builders

fn write_corpus(
    root: &Path,
    n_seq: usize,
    frames: usize,
    absent_rate: f64,
    seed: u64,
) -> Vec<SequenceAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<SequenceAnnotation> = (0..n_seq)
        .map(|s| {
            let absent: Vec<bool> = (0..frames).map(|_| rng.random_bool(absent_rate)).collect();
            let gt_boxes = absent
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    if a {
                        BoundingBox {
                            x: 0.0,
                            y: 0.0,
                            w: 0.0,
                            h: 0.0,
                        }
                    } else {
                        BoundingBox {
                            x: 10.0 + i as f64 * 1.5,
                            y: 30.25,
                            w: 40.0,
                            h: 22.5 + (i % 7) as f64,
                        }
                    }
                })
                .collect();
            let mut attributes = AttributeFlags::default();
            attributes.set(Attribute::ALL[s % Attribute::COUNT], true);
            SequenceAnnotation {
                sequence_id: format!("video_{s:02}"),
                gt_boxes,
                absent,
                language: format!("the object in video {s}"),
                attributes,
            }
        })
        .collect();
    save_corpus(root, &seqs).unwrap();
    seqs
}

fn vltrack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vltrack"))
        .args(args)
        .output()
        .expect("run vltrack")
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn criterion_datasets() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("corpus");
    let seqs = write_corpus(&root, 10, 100, 0.2, 9);
    let root_s = root.to_str().unwrap();

    let copy = tmp.path().join("copy");
    save_corpus(
        &copy,
        &load_corpus(&root, Execution::Parallel).map_err(|e| e.to_string())?,
    )
    .unwrap();
    ensure!(
        read_tree(&root) == read_tree(&copy),
        "annotation round trip is not byte-identical"
    );

    let count = 300;
    for (cmd, rl) in [("build-sft", false), ("build-rl", true)] {
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{cmd}-{rep}.jsonl"));
            let o = vltrack(&[
                cmd,
                "--corpus",
                root_s,
                "--count",
                &count.to_string(),
                "--seed",
                "42",
                "--out",
                out.to_str().unwrap(),
            ]);
            ensure!(
                o.status.success(),
                "{cmd} failed: {}",
                String::from_utf8_lossy(&o.stderr)
            );
            bytes.push(fs::read(&out).unwrap());
        }
        ensure!(
            bytes[0] == bytes[1],
            "{cmd}: output differs across runs with the same seed"
        );
        let text = String::from_utf8(bytes.swap_remove(0)).unwrap();
        ensure!(
            text.lines().count() == count,
            "{cmd}: {} records, requested {count}",
            text.lines().count()
        );
        let mut pairs = BTreeSet::new();
        for line in text.lines() {
            let (id, tf, sf) = if rl {
                let r: RlRecord = serde_json::from_str(line).unwrap();
                ensure!(
                    r.box_template.w > 0.0 && r.box_search.w > 0.0,
                    "{cmd}: zero-area box in record"
                );
                (r.sequence_id, r.template_frame, r.search_frame)
            } else {
                let r: SftSample = serde_json::from_str(line).unwrap();
                (r.sequence_id, r.template_frame, r.search_frame)
            };
            let s = seqs.iter().find(|s| s.sequence_id == id).unwrap();
            ensure!(
                !s.absent[tf] && !s.absent[sf],
                "{cmd}: absent frame referenced in {id} ({tf}, {sf})"
            );
            pairs.insert((id, tf, sf));
        }
        ensure!(pairs.len() == count, "{cmd}: duplicate pairs drawn");
    }
    Ok(format!("10 x 100 frames, 20% absent: {count} SFT and {count} RL records, deterministic, no absent references, round trip identical"))
}

// 10. end to end

fn ao_for_noise(root: &Path, work: &Path, noise: f64) -> Result<f64, String> {
    let preds = work.join(format!("preds_{noise}"));
    let report_dir = work.join(format!("report_{noise}"));
    let o = vltrack(&[
        "track",
        "--sequence-dir",
        root.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
        "--tracker",
        "oracle",
        "--refiner",
        "stub",
        "--u",
        "100",
        "--seed",
        "3",
        "--noise-px",
        &noise.to_string(),
    ]);
    ensure!(
        o.status.success(),
        "track failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = vltrack(&[
        "eval",
        "--gt-dir",
        root.to_str().unwrap(),
        "--pred-dir",
        preds.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
        "--format",
        "structured",
    ]);
    ensure!(
        o.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    report["ao"]
        .as_f64()
        .ok_or_else(|| "report has no ao".into())
}

fn criterion_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("corpus");
    write_corpus(&root, 4, 400, 0.1, 10);
    let mut aos = Vec::new();
    for noise in [0.0, 2.0, 5.0, 10.0] {
        aos.push(ao_for_noise(&root, tmp.path(), noise)?);
    }
    ensure!(aos[0] == 1.0, "ao at noise 0 is {}", aos[0]);
    ensure!(
        aos.windows(2).all(|w| w[1] < w[0]),
        "ao not decreasing in noise: {aos:?}"
    );
    Ok(format!("ao over noise {{0,2,5,10}} = {aos:.4?}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("geometry oracle", criterion_geometry),
        ("format-reward suite", criterion_format),
        ("judge reward and IoU gate", criterion_judge),
        ("GRPO advantages", criterion_advantages),
        ("objective and KL", criterion_kl),
        ("metrics oracle", criterion_metrics),
        ("loop conformance", criterion_loop),
        ("update-strategy semantics", criterion_strategies),
        ("dataset builders", criterion_datasets),
        ("end-to-end smoke", criterion_end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
