//! Acceptance gate: one pass/fail line per criterion.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resumable_proxy::client_proxy::RecoveryMode;
use resumable_proxy::protocol::{parse_gateway_request, rewrite_request, OriginRequest};
use resumable_proxy::sensing::{delay_bound, simulate_detection_delay, InterfaceDescriptor};
use resumable_proxy::policy::should_preempt;
use resumable_proxy::simharness::{
    run_scenario, to_csv, to_json, FaultSpec, Scenario, SimRun, StackConfig, TransferMetrics,
};

use common::*;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run(sc: &Scenario, cfg: &StackConfig) -> Result<SimRun, String> {
    run_scenario(sc, cfg, sc.seed).map_err(|e| format!("{}: {e}", sc.name))
}

fn canned(name: &str) -> Scenario {
    Scenario::canned(name).expect("canned scenario")
}

fn only(run: &SimRun) -> &TransferMetrics {
    &run.transfers[0]
}

/// Bound written out term by term, without the series used by the library.
fn bound_oracle(t: f64, l: f64) -> f64 {
    let x = t * l;
    (x * x - 2.0 * x + 2.0 - 2.0 * (-x).exp()) / (2.0 * t * l * l)
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    for (i, &t) in [1.0, 5.0, 10.0, 30.0].iter().enumerate() {
        for (j, &l) in [0.01, 0.1, 1.0, 10.0].iter().enumerate() {
            let bound = delay_bound(t, l).map_err(|e| e.to_string())?;
            let oracle = bound_oracle(t, l);
            check(
                (bound - oracle).abs() <= 1e-9 * oracle.max(1e-3),
                format!("bound({t},{l}) = {bound} but closed form gives {oracle}"),
            )?;
            let est = simulate_detection_delay(t, l, 100_000, 1000 + (i * 4 + j) as u64).map_err(|e| e.to_string())?;
            let slack = bound + 3.0 * est.stderr - est.mean;
            check(
                slack >= 0.0,
                format!("T={t} λ={l}: mean {} > bound {bound} + 3·{}", est.mean, est.stderr),
            )?;
            worst = worst.max(est.mean - bound);
        }
    }
    let b = delay_bound(10.0, 0.1).map_err(|e| e.to_string())?;
    check((b - 1.3212).abs() < 5e-5, format!("bound(10, 0.1) = {b}, expected 1.3212"))?;
    let secs = started.elapsed().as_secs_f64();
    check(secs < 30.0, format!("grid took {secs:.1} s"))?;
    Ok(format!("16 grid points, bound(10,0.1)={b:.4}, max(mean-bound)={worst:.4}, {secs:.1} s"))
}

/// First-change delay at time τ, from the definition.
fn first_event_delay(tau: f64, l: f64) -> f64 {
    tau - (1.0 - (-l * tau).exp()) / l
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, eps, 50)
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = rng.gen_range(0.5..60.0);
        let l = 10f64.powf(rng.gen_range(-2.5..1.3));
        let avg = integrate(&|s| first_event_delay(s, l), 0.0, t, 1e-13) / t;
        let bound = delay_bound(t, l).map_err(|e| e.to_string())?;
        let err = (avg - bound).abs() / bound.max(1.0);
        check(err <= 1e-9, format!("T={t} λ={l}: integral/T = {avg}, bound = {bound}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 random (T, λ), worst relative gap {worst:.1e}"))
}

fn byte_exact(run: &SimRun, sc: &Scenario) -> Result<usize, String> {
    let mut n = 0;
    for (row, spec) in run.transfers.iter().zip(&sc.transfers) {
        if !row.completed {
            continue;
        }
        n += 1;
        check(
            row.bytes_delivered == spec.size_bytes && row.sha256 == origin_sha(sc.seed, spec),
            format!("{} / {}: delivered bytes differ from origin", sc.name, spec.resource_id),
        )?;
    }
    Ok(n)
}

fn criterion_3() -> Verdict {
    let mut checked = 0;
    for name in ["ap_power_cycle", "subnet_handoff"] {
        let sc = canned(name);
        let r = run(&sc, &StackConfig::default())?;
        check(r.all_completed(), format!("{name} did not complete"))?;
        checked += byte_exact(&r, &sc)?;
    }
    let mut interruptions = 0;
    for seed in 0..100 {
        let sc = fuzz_scenario(seed);
        let r = run(&sc, &StackConfig::default())?;
        check(r.all_completed(), format!("fuzz seed {seed} left a transfer incomplete"))?;
        checked += byte_exact(&r, &sc)?;
        interruptions += r.transfers.iter().map(|t| t.interruptions).sum::<u32>();
    }
    Ok(format!("{checked} completed transfers hash-equal the origin ({interruptions} interruptions in fuzz)"))
}

pub fn efficiency_scenario() -> Scenario {
    let size = 6_000_000;
    let mut sc = scenario("three_faults", vec![wlan("wlan", true)], vec![transfer("slides.ppt", size, 0.0)]);
    sc.faults = [25, 50, 75]
        .iter()
        .map(|p| FaultSpec {
            transfer: "slides.ppt".into(),
            at_bytes: size * p / 100,
            cause: resumable_proxy::sensing::FailureCause::ConnReset,
        })
        .collect();
    sc
}

fn criterion_4() -> Verdict {
    let sc = efficiency_scenario();
    let size = sc.transfers[0].size_bytes as f64;
    let packet = run(&sc, &StackConfig::default())?;
    let session = run(
        &sc,
        &StackConfig {
            recovery: RecoveryMode::SessionLevel,
            ..StackConfig::default()
        },
    )?;
    let (p, s) = (only(&packet), only(&session));
    check(p.completed && s.completed, "a run did not complete")?;
    byte_exact(&packet, &sc)?;
    byte_exact(&session, &sc)?;
    check(p.interruptions == 3 && s.interruptions == 3, "expected three interruptions")?;
    let (pr, sr) = (p.origin_bytes_fetched as f64 / size, s.origin_bytes_fetched as f64 / size);
    check(pr <= 1.1, format!("packet-level fetched {pr:.3}× size"))?;
    check(sr >= 2.5, format!("session-level fetched {sr:.3}× size"))?;
    Ok(format!("packet-level {pr:.3}×, session-level {sr:.3}×"))
}

fn criterion_5() -> Verdict {
    let sc = canned("preempt_cdma_wlan");
    let off = run(&sc, &StackConfig::with_preemption(false))?;
    let on = run(&sc, &StackConfig::with_preemption(true))?;
    let (off, on) = (only(&off), only(&on));
    check(off.completed && on.completed, "a run did not complete")?;
    check(off.interface_bytes("wlan") == 0, "policy off still used wlan")?;
    let cdma = sc.interface(&"cdma".into()).unwrap();
    let rate = cdma.bandwidth_capacity * cdma.utilization / 8.0;
    let size = sc.transfers[0].size_bytes as f64;
    let expected = 30.0 + (size - 30.0 * rate) / rate;
    check(
        (off.overall_time_s - expected).abs() <= 0.1 * expected,
        format!("policy-off time {} vs expected {expected:.2}", off.overall_time_s),
    )?;
    check(on.interface_bytes("wlan") > 0, "policy on never used wlan")?;
    check(
        on.overall_time_s * 5.0 < off.overall_time_s,
        format!("on {} s is not under a fifth of off {} s", on.overall_time_s, off.overall_time_s),
    )?;
    Ok(format!(
        "off {:.2} s (expected {expected:.2}), on {:.2} s, ratio {:.1}",
        off.overall_time_s,
        on.overall_time_s,
        off.overall_time_s / on.overall_time_s
    ))
}

fn criterion_6() -> Verdict {
    let sc = canned("preempt_wlan_ethernet");
    let off = run(&sc, &StackConfig::with_preemption(false))?;
    let on = run(&sc, &StackConfig::with_preemption(true))?;
    let (off, on) = (only(&off), only(&on));
    check(off.completed && on.completed, "a run did not complete")?;
    check(
        on.overall_time_s >= off.overall_time_s,
        format!("policy on {} s beat policy off {} s", on.overall_time_s, off.overall_time_s),
    )?;
    let wlan = sc.interface(&"wlan".into()).unwrap().descriptor();
    let mut eth: InterfaceDescriptor = sc.interface(&"eth".into()).unwrap().descriptor();
    eth.available = true;
    let handoff = sc.policy.handoff_defaults.for_pair(wlan.kind, eth.kind);
    check(handoff == 6.3, format!("handoff cost {handoff}"))?;
    let size = sc.transfers[0].size_bytes;
    // Whole file, and what is left when the wired link is first reported.
    let seen_at = sc.timeline[0].time_s + sc.environment.connect_event_latency;
    let left = size - (seen_at * wlan.bandwidth_capacity / 8.0) as u64;
    for remaining in [size, left] {
        let d = should_preempt(remaining, &wlan, &eth, handoff);
        check(!d.preempt, format!("should_preempt({remaining}) said preempt"))?;
    }
    Ok(format!("on {:.2} s >= off {:.2} s, rule declines", on.overall_time_s, off.overall_time_s))
}

fn criterion_7() -> Verdict {
    let sc = canned("ap_power_cycle");
    let r = run(&sc, &StackConfig::default())?;
    let m = only(&r);
    let scripted = sc.timeline[1].time_s - sc.timeline[0].time_s;
    check(m.completed, "transfer did not complete")?;
    check(
        (m.disconnect_time_s - scripted).abs() <= 0.01 + 1e-9,
        format!("disconnect {} s vs scripted {scripted} s", m.disconnect_time_s),
    )?;
    check(m.continuity, "continuity lost")?;
    Ok(format!("disconnect {:.2} s (scripted {scripted} s), continuity held", m.disconnect_time_s))
}

fn criterion_8() -> Verdict {
    let sc = canned("subnet_handoff");
    let cfg = StackConfig::default();
    let with = run(&sc, &cfg)?;
    let mut calm = sc.clone();
    calm.timeline.clear();
    let without = run(&calm, &cfg)?;
    let (w, n) = (only(&with), only(&without));
    check(w.completed && n.completed, "a run did not complete")?;
    let stall = w.stall_s();
    let hi = 17.4 + 2.2 + cfg.poll_interval;
    check((17.4..=hi).contains(&stall), format!("stall {stall} outside [17.4, {hi}]"))?;
    let extra = w.overall_time_s - n.overall_time_s;
    check(
        (extra - stall).abs() <= 0.1 * stall,
        format!("overall grew by {extra:.2} s for a {stall:.2} s stall"),
    )?;
    Ok(format!(
        "stall {stall:.2} s (handoff {:.2} + detection {:.2}), overall +{extra:.2} s",
        w.handoff_delay_s, w.detection_delay_s
    ))
}

fn criterion_9() -> Verdict {
    const FRESH: &str = "GET http://205.132.6.11/scripts/dis.dll?url=http://www.cnn.com/draft.ppt HTTP 1.0\r\n\
User-Agent: Proxy/2.0\r\n\
Session-Offset: 0\r\n\
\r\n";
    let resumed = FRESH.replace("Session-Offset: 0\r\n", "Session-Offset: 203223\r\n");
    let origin = OriginRequest::get("http://www.cnn.com/draft.ppt");
    let gateway = "http://205.132.6.11/scripts/dis.dll";
    for (offset, golden) in [(0, FRESH.to_string()), (203_223, resumed)] {
        let wire = rewrite_request(&origin, gateway, offset).map_err(|e| e.to_string())?;
        check(wire == golden, format!("offset {offset}: got {wire:?}"))?;
        let parsed = parse_gateway_request(&golden).map_err(|e| e.to_string())?;
        check(
            parsed.origin_url == origin.url && parsed.session_offset == offset && parsed.agent_tag == "Proxy/2.0",
            format!("offset {offset}: parse mismatch {parsed:?}"),
        )?;
        check(parsed.to_wire() == golden, format!("offset {offset}: re-encode differs"))?;
    }
    Ok("fresh and resumed blocks match byte for byte".into())
}

fn criterion_10() -> Verdict {
    let mut scenarios: Vec<Scenario> = Scenario::canned_names().map(canned).collect();
    scenarios.push(efficiency_scenario());
    scenarios.extend((0..5).map(fuzz_scenario));
    let configs = [
        StackConfig::with_preemption(true),
        StackConfig::with_preemption(false),
        StackConfig {
            recovery: RecoveryMode::SessionLevel,
            ..StackConfig::default()
        },
    ];
    let mut n = 0;
    for sc in &scenarios {
        for cfg in &configs {
            let (a, b) = (run(sc, cfg)?, run(sc, cfg)?);
            check(
                to_csv(&a.transfers) == to_csv(&b.transfers) && to_json(&a.transfers) == to_json(&b.transfers),
                format!("{} differs between identical runs", sc.name),
            )?;
            n += 1;
        }
    }
    Ok(format!("{n} (scenario, config) pairs reproduce byte-identical reports"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("detection delay within analytic bound", criterion_1),
        ("averaged first-change delay equals bound", criterion_2),
        ("byte-exact resumption", criterion_3),
        ("packet-level vs session-level origin bytes", criterion_4),
        ("hysteresis and preemption", criterion_5),
        ("diminishing benefit", criterion_6),
        ("long disconnect resilience", criterion_7),
        ("subnet handoff stall", criterion_8),
        ("protocol goldens", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
