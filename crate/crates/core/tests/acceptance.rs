//! Acceptance criteria 1-8. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values, then asserts.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hbeacon_core::analysis::{expected_two_wave, border_sweep, LineDeployment, SweepParams};
use hbeacon_core::codec::{build_fec_codebook, build_hadamard, hamming, Codebooks, EncodedPayload};
use hbeacon_core::energy::PowerProfile;
use hbeacon_core::protocol::{expected_power, optimal_tc};
use hbeacon_core::sim::config::{ModeName, PathConfig, Position};
use hbeacon_core::sim::{compute_metrics, metrics_csv, rounds_from_trace, run_scenario, RunOptions, ScenarioConfig};

/// Writes straight to the stderr handle so the line shows even when the
/// harness captures output of passing tests.
fn report(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(scenario_dir().join(name)).expect("shipped scenario loads")
}

fn flip_fec_bits(p: &mut EncodedPayload, chips: usize, bits: &[usize]) {
    for &j in bits {
        for c in 0..chips {
            p.flip_bit(j * chips + c);
        }
    }
}

#[test]
fn criterion_1_codec() {
    let start = Instant::now();
    let mut failures = Vec::new();

    for k in 1..=6 {
        let h = build_hadamard(k).unwrap();
        let n = h.order();
        for i in 0..n {
            for j in 0..n {
                let dot: i32 = h.row(i).iter().zip(h.row(j)).map(|(&a, &b)| a as i32 * b as i32).sum();
                let want = if i == j { n as i32 } else { 0 };
                if dot != want {
                    failures.push(format!("H{n} rows {i},{j} dot {dot}"));
                }
            }
        }
    }

    // Every error pattern of weight below d/2 on every 8-bit codeword.
    for ids in 1..=8 {
        let fec = build_fec_codebook(ids, 8).unwrap();
        let radius = (fec.distance() - 1) / 2;
        for id in 0..ids as u16 {
            let word = fec.word(id).unwrap().to_vec();
            for mask in 0u32..256 {
                if mask.count_ones() as usize > radius {
                    continue;
                }
                let noisy: Vec<u8> = word.iter().enumerate().map(|(b, &x)| x ^ ((mask >> b) & 1) as u8).collect();
                if fec.nearest(&noisy) != Some(id) {
                    failures.push(format!("n={ids} id={id} mask={mask:08b}"));
                }
                assert!(hamming(&noisy, &word) <= radius);
            }
        }
    }

    // Round trip for every codebook size, clean and with correctable
    // errors injected at the FEC level through the full payload.
    for ids in 1..=16 {
        let cb = Codebooks::for_ids(ids).unwrap();
        let chips = cb.spread.chip_length();
        let len = cb.fec.word_length();
        let radius = (cb.fec.distance() - 1) / 2;
        for id in 0..ids as u16 {
            let p = cb.encode(id).unwrap();
            if cb.decode(&p) != [id].into() {
                failures.push(format!("n={ids} id={id} clean decode {:?}", cb.decode(&p)));
            }
            let mut flips = vec![];
            for a in 0..len {
                flips.push(vec![a]);
                if radius >= 2 {
                    for b in a + 1..len {
                        flips.push(vec![a, b]);
                    }
                }
            }
            for f in flips {
                let mut q = p;
                flip_fec_bits(&mut q, chips, &f);
                if !cb.decode(&q).contains(&id) {
                    failures.push(format!("n={ids} id={id} flips {f:?}"));
                }
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    report(1, pass, format!("{} failures, {secs:.2} s", failures.len()));
    assert!(pass, "{:?}", &failures[..failures.len().min(10)]);
}

fn grid_minimum(t_m: f64, profile: &PowerProfile) -> f64 {
    let (lo, hi) = ((t_m * 1e-5).ln(), (t_m * 0.999).ln());
    (0..10_000)
        .map(|k| (lo + (hi - lo) * k as f64 / 9_999.0).exp())
        .filter_map(|t| expected_power(t, t_m, profile, profile.t_adc, profile.t_tx).ok())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_2_optimal_poll_period() {
    let start = Instant::now();
    let profile = PowerProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = vec![(1.0, profile)];
    for _ in 0..100 {
        let p = PowerProfile {
            p_rx: rng.random_range(5e-3..50e-3),
            p_adc: rng.random_range(0.5e-3..5e-3),
            t_adc: rng.random_range(1e-4..1e-3),
            p_sleep: rng.random_range(1e-6..1e-4),
            ..profile
        };
        cases.push((rng.random_range(0.5..10.0), p));
    }
    let mut worst: f64 = 0.0;
    for (t_m, p) in &cases {
        let t = optimal_tc(*t_m, p.t_adc, p.p_adc, p.p_rx).unwrap();
        let at_opt = expected_power(t, *t_m, p, p.t_adc, p.t_tx).unwrap();
        let best = grid_minimum(*t_m, p);
        worst = worst.max(at_opt / best - 1.0);
    }
    let tv = optimal_tc(1.0, profile.t_adc, profile.p_adc, profile.p_rx).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 0.01 && (tv - 0.0104).abs() <= 1e-4 && secs < 10.0;
    report(2, pass, format!("worst excess {:.4}%, default-profile t_c = {:.4} ms, {secs:.2} s", 100.0 * worst, 1e3 * tv));
    assert!(pass);
}

#[test]
fn criterion_3_two_wave_tradeoff() {
    let start = Instant::now();
    let params = SweepParams::line_default();
    let mut notes = Vec::new();
    let mut pass = true;
    for (r, want_min) in [(4usize, 3usize), (10, 5)] {
        let dep = LineDeployment::new(r, 1.0).unwrap();
        let c = params.charge_times(&dep);
        let all = expected_two_wave(&dep, &params.radio, r, &c).unwrap();
        let raw: Vec<_> = (1..r).map(|w| expected_two_wave(&dep, &params.radio, w, &c).unwrap()).collect();
        let a_fail: Vec<usize> = raw.iter().filter(|p| !(p.e_a < all.e_a && p.e_c < all.e_c)).map(|p| p.w).collect();
        let pts = border_sweep(r, &params).unwrap();
        let argmin = pts.iter().min_by(|a, b| a.e_a.total_cmp(&b.e_a)).unwrap().w;
        let monotone = pts.windows(2).all(|p| p[1].e_c > p[0].e_c);
        pass &= a_fail.is_empty() && argmin == want_min && monotone;
        notes.push(format!(
            "r={r}: (a) violated at w={a_fail:?}; (b) PDA argmin w={argmin}, expected {want_min}; (c) CP monotone {monotone}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(3, pass, format!("{}; {secs:.2} s", notes.join("; ")));
    assert!(pass, "{notes:?}");
}

#[test]
fn criterion_4_dead_zone() {
    let start = Instant::now();
    let mut curves = Vec::new();
    for name in ["dead_zone_plain.toml", "dead_zone_codes.toml"] {
        let base = scenario(name);
        let mut prr = vec![0.0; 20];
        for seed in 1..=10 {
            let cfg = ScenarioConfig { seed, ..base.clone() };
            let out = run_scenario(&cfg, RunOptions::default()).unwrap();
            for (pos, s) in &out.metrics.per_position {
                prr[*pos] += s.prr / 10.0;
            }
        }
        curves.push(prr);
    }
    let (plain, codes) = (&curves[0], &curves[1]);
    let mut run = 0;
    let mut longest = 0;
    for &p in plain {
        run = if p < 0.5 { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    let worst_codes = codes.iter().copied().fold(1.0, f64::min);
    let secs = start.elapsed().as_secs_f64();
    let pass = longest >= 3 && worst_codes >= 0.9 && secs < 60.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    report(
        4,
        pass,
        format!(
            "plain: {longest} contiguous positions below 0.5 [{}]; codes: min {worst_codes:.3}; {secs:.2} s",
            fmt(plain)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_charging_period_vs_distance() {
    let base = scenario("single_anchor.toml");
    let mut cps = Vec::new();
    for k in 1..=7 {
        let d = 0.5 * k as f64;
        let mut cfg = base.clone();
        cfg.eha[0].position = Position::X(d);
        cfg.mono.path = PathConfig::Fixed { positions: vec![Position::X(d - 0.1)], rounds_per_position: 1 };
        let out = run_scenario(&cfg, RunOptions::default()).unwrap();
        cps.push(out.metrics.summary.mean_cp_s.expect("anchor answered"));
    }
    let increasing = cps.windows(2).all(|w| w[1] > w[0]);
    let last = *cps.last().unwrap();
    let pass = increasing && (20.0..=80.0).contains(&last);
    let list = cps.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>().join(" ");
    report(5, pass, format!("CP over 0.5..3.5 m: [{list}] s; increasing {increasing}; 3.5 m = {last:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_6_corridor_two_wave() {
    let mut stats = Vec::new();
    for name in ["corridor_border2.toml", "corridor_border3.toml", "corridor_wake_all.toml"] {
        let base = scenario(name);
        let (mut cp, mut prr, mut pda) = (0.0, 0.0, 0.0);
        for seed in 1..=10 {
            let cfg = ScenarioConfig { seed, ..base.clone() };
            let s = run_scenario(&cfg, RunOptions::default()).unwrap().metrics.summary;
            cp += s.mean_cp_s.unwrap() / 10.0;
            prr += s.prr / 10.0;
            pda += s.pda.unwrap() / 10.0;
        }
        stats.push((cp, prr, pda));
    }
    let [(cp2, prr2, pda2), (cp3, prr3, pda3), (cpa, prra, pdaa)] = [stats[0], stats[1], stats[2]];
    let cp_order = cp2 < cp3 && cp3 < cpa;
    let prr_ok = prr2 >= prra && prr3 >= prra;
    let pda_ok = pda2 <= pdaa && pda3 <= pdaa;
    let ratio = cp2 / cpa;
    let ratio_ok = (0.3..=0.7).contains(&ratio);
    let pass = cp_order && prr_ok && pda_ok && ratio_ok;
    report(
        6,
        pass,
        format!(
            "CP b2={cp2:.2} b3={cp3:.2} all={cpa:.2} s (order {cp_order}); PRR {prr2:.3}/{prr3:.3}/{prra:.3} ({prr_ok}); \
             PDA {pda2:.3}/{pda3:.3}/{pdaa:.3} ({pda_ok}); CP b2/all {ratio:.3} ({ratio_ok})"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_analysis_matches_simulation() {
    let base = scenario("line_r4_two_wave.toml");
    let params = SweepParams { radio: base.radio, ..SweepParams::line_default() };
    let dep = LineDeployment::new(4, 1.0).unwrap();
    let c = params.charge_times(&dep);
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for w in 1..=4u16 {
        let mut cfg = ScenarioConfig { rounds: 10_000, ..base.clone() };
        if w == 4 {
            cfg.protocol.mode = ModeName::WakeAll;
            cfg.protocol.border = None;
        } else {
            cfg.protocol.border = Some(w);
        }
        let sim = run_scenario(&cfg, RunOptions::default()).unwrap().metrics.summary.pda.unwrap();
        let ana = expected_two_wave(&dep, &params.radio, w as usize, &c).unwrap().e_a;
        worst = worst.max((sim - ana).abs());
        notes.push(format!("w={w} analysis {ana:.4} sim {sim:.4}"));
    }
    let pass = worst <= 0.05;
    report(7, pass, format!("{}; max gap {worst:.4}", notes.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_audit() {
    let mut names: Vec<_> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    names.sort();
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    for path in &names {
        let cfg = ScenarioConfig::load(path).unwrap();
        let opts = RunOptions { trace: true };
        let a = run_scenario(&cfg, opts).unwrap();
        let b = run_scenario(&cfg, opts).unwrap();
        let csv_a = metrics_csv(&a.metrics, &a.rounds, &a.nodes);
        let csv_b = metrics_csv(&b.metrics, &b.rounds, &b.nodes);
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if csv_a != csv_b || a.trace != b.trace {
            problems.push(format!("{name}: outputs differ"));
        }
        let recomputed = compute_metrics(&rounds_from_trace(a.trace.as_deref().unwrap()).unwrap()).unwrap();
        if recomputed != a.metrics {
            problems.push(format!("{name}: metrics from trace differ"));
        }
        let res = a.energy_residual();
        worst = worst.max(res);
        if res > 1e-9 {
            problems.push(format!("{name}: energy residual {res:e}"));
        }
    }
    let pass = problems.is_empty();
    report(8, pass, format!("{} scenarios, worst relative energy residual {worst:e}; {problems:?}", names.len()));
    assert!(pass);
}
