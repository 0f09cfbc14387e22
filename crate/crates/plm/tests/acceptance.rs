//! Acceptance gate: ten criteria, one pass/fail line each.
//!
//! Every criterion is checked against independently derived expectations
//! (plaintext oracles, analytic counts, exhaustive enumeration, or direct
//! statistics), never against values produced by the code path under test.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use plm::bench::{run_bench, BenchReport, BenchSpec, Suite};
use plm::he::{HeClient, HeConfig, HeServer, DEFAULT_SLOTS};
use plm::model::{
    gen_toy_model, greedy_generate, secure_generate, ModelConfig, EMBED_ONLINE_ROUNDS,
    LAYER_ONLINE_ROUNDS,
};
use plm::perm::{perm2d_space_log2, Permutation, Permutation2D};
use plm::pir::{
    prediction_dealer_offline, prediction_handshake_p0, prediction_handshake_p1, PredictionP0,
    PredictionP1,
};
use plm::protocols::{MulFixedDealer, MulFixedParty, MulGrowingDealer, MulGrowingParty};
use plm::sharing::{share_plain, ScaleHint};
use plm::tensor::{randn, MulOp, Tensor};
use plm::transport::{establish_inproc_trio, run_trio, LinkProfile};

fn verdict(n: usize, what: &str, pass: bool) {
    println!(
        "ACCEPTANCE {n:02} [{}] {what}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {what}");
}

fn bench(suite: Suite, size: usize) -> BenchReport {
    let mut spec = BenchSpec::new(suite, size);
    spec.reps = 3;
    spec.seed = 1;
    run_bench(&spec)
}

/// The two expensive reports are shared by the round-count and byte-size
/// criteria.
fn argmax_100k() -> &'static BenchReport {
    static R: OnceLock<BenchReport> = OnceLock::new();
    R.get_or_init(|| bench(Suite::Argmax, 100_000))
}

fn layer_4096() -> &'static BenchReport {
    static R: OnceLock<BenchReport> = OnceLock::new();
    R.get_or_init(|| bench(Suite::Layer, 4096))
}

#[test]
fn criterion_01_exact_round_counts() {
    let mut pass = true;
    for n in [1000usize, 100_000] {
        let r = bench(Suite::Nonlinear, n);
        pass &= r.failure.is_none() && r.rows.iter().all(|row| row.online_rounds == 3);
    }
    let small = bench(Suite::Argmax, 1000);
    pass &= small.failure.is_none() && small.rows.iter().all(|row| row.online_rounds == 4);
    let big = argmax_100k();
    pass &= big.failure.is_none() && big.rows.iter().all(|row| row.online_rounds == 4);
    verdict(
        1,
        "nonlinear = 3 online rounds, argmax = 4 online rounds at 1K and 100K",
        pass,
    );
}

#[test]
fn criterion_02_layer_round_band() {
    let r = layer_4096();
    let analytic = EMBED_ONLINE_ROUNDS + LAYER_ONLINE_ROUNDS;
    let pass = r.failure.is_none()
        && !r.rows.is_empty()
        && r.rows.iter().all(|row| {
            let layer = row.online_rounds - EMBED_ONLINE_ROUNDS;
            (16..=24).contains(&layer) && row.online_rounds == analytic
        });
    verdict(
        2,
        "layer forward rounds in [16, 24] and equal to the analytic composition",
        pass,
    );
}

#[test]
fn criterion_03_communication_sizes() {
    const MB: f64 = 1e6;
    let nl = bench(Suite::Nonlinear, 1000);
    let nl_ok = nl.failure.is_none()
        && nl
            .rows
            .iter()
            .all(|row| (row.online_bytes as f64) <= 0.015 * MB);
    let am = argmax_100k();
    let am_ok = am.failure.is_none()
        && am
            .rows
            .iter()
            .all(|row| (row.online_bytes as f64) <= 8.0 * MB);
    let ly = layer_4096();
    let ly_ok = ly.failure.is_none()
        && ly
            .rows
            .iter()
            .all(|row| (row.online_bytes as f64) <= 1.0 * MB);
    verdict(
        3,
        "online bytes: nonlinear 1K <= 0.015 MB, argmax 100K <= 8 MB, layer d=4096 <= 1 MB",
        nl_ok && am_ok && ly_ok,
    );
}

#[test]
fn criterion_04_ciphertext_packing() {
    // Formula check across representative vocabulary sizes.
    let formula_ok = [(2048usize, 1usize), (2049, 2), (100_000, 49), (131_072, 64)]
        .iter()
        .all(|&(n, want)| n.div_ceil(DEFAULT_SLOTS) == want);

    // Live check: a real lattice-backed retrieval over a 130K-class
    // vocabulary uploads exactly ceil(N / L) = 64 ciphertexts.
    let n = 131_072usize;
    let scores = randn(vec![n], 1.0, 41);
    let expect = plm::pir::argmax_lowest(scores.data());
    let hint = ScaleHint::configured(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s0, s1) = share_plain(&scores, &hint, 100.0, &mut rng).unwrap();
    let [e0, e1, e2] = establish_inproc_trio(LinkProfile::lan());
    let (_, out, _) = run_trio(
        [e0, e1, e2],
        |mut s| {
            let server = prediction_handshake_p0(&mut s, false)?;
            let perm = Permutation::random(n, &mut ChaCha8Rng::seed_from_u64(5));
            let p0 = PredictionP0::offline(&mut s, perm, server)?;
            p0.online(&mut s, &s0.data)
        },
        |mut s| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let client = HeClient::new(HeConfig::bfv_default(), false, &mut rng)?;
            prediction_handshake_p1(&mut s, &client)?;
            let p1 = PredictionP1::offline(&mut s, n, client)?;
            p1.online(&mut s, &s1.data, &mut rng)
        },
        |mut s| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            prediction_dealer_offline(&mut s, &hint, 100.0, &mut rng)
        },
    )
    .unwrap();
    let live_ok = out.ciphertexts == 64 && out.token == expect;
    verdict(
        4,
        "cPIR uploads exactly ceil(N/L) ciphertexts (64 at N=131072, L=2048)",
        formula_ok && live_ok,
    );
}

#[test]
fn criterion_05_oracle_equivalence_100_seeds() {
    let start = Instant::now();
    let mut ok = 0usize;
    for seed in 0..100u64 {
        let mut cfg = ModelConfig::default();
        assert_eq!(
            (cfg.n_vocab, cfg.d_model, cfg.n_heads, cfg.n_layers),
            (1000, 64, 4, 2)
        );
        cfg.seed = seed;
        let params = gen_toy_model(&cfg).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let prompt: Vec<usize> = (0..6).map(|_| prng.random_range(0..cfg.n_vocab)).collect();
        let oracle = greedy_generate(&params, &prompt, 20).unwrap();
        let sec = secure_generate(
            &params,
            &prompt,
            20,
            LinkProfile::lan(),
            HeConfig::bfv_default(),
            false,
            seed,
        )
        .unwrap();
        let mut max_rel = 0.0f32;
        for (i, h) in oracle.hidden.iter().enumerate() {
            let recon = sec.p0[i].hidden_share.add(&sec.p1[i].hidden_share).unwrap();
            max_rel = max_rel.max(recon.rel_frobenius(h));
        }
        if sec.tokens == oracle.tokens && max_rel <= 1e-3 {
            ok += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        &format!(
            "secure generation matches the oracle in {ok}/100 seeded runs \
             (need >= 95, hidden error <= 1e-3) in {:.0}s (< 600s)",
            elapsed.as_secs_f64()
        ),
        ok >= 95 && elapsed.as_secs_f64() < 600.0,
    );
}

#[test]
fn criterion_06_constant_per_token_bytes() {
    let cfg = ModelConfig::default();
    let params = gen_toy_model(&cfg).unwrap();
    let prompt = [3usize, 141, 59, 265, 358, 979];
    let sec = secure_generate(
        &params,
        &prompt,
        20,
        LinkProfile::lan(),
        HeConfig::bfv_default(),
        false,
        9,
    )
    .unwrap();
    // Records for generated tokens 2..20: positions prompt_len .. end (the
    // record at prompt_len - 1 yields token 1).
    let steady: Vec<f64> = sec.p1[prompt.len()..]
        .iter()
        .map(|r| r.delta.online.bytes_total() as f64)
        .collect();
    assert_eq!(steady.len(), 19);
    let mean = steady.iter().sum::<f64>() / steady.len() as f64;
    let var = steady.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / steady.len() as f64;
    let cv = var.sqrt() / mean;
    verdict(
        6,
        &format!("per-token online bytes CV = {:.3}% over steps 2..20 (< 5%)", cv * 100.0),
        cv < 0.05,
    );
}

#[test]
fn criterion_07_masking_noise_ratio() {
    let k = 100.0f32;
    let dim = 16usize;

    // Fixed-operand variant: weight X [100, 16], fresh shared Y [16] per
    // trial, 100 trials of 100 output elements = 10^4 element trials.
    let trials = 100usize;
    let m = 100usize;
    let x = randn(vec![m, dim], 1.0, 51);
    let hint = ScaleHint::configured(1.0);
    let ys: Vec<Tensor> = (0..trials).map(|t| randn(vec![dim], 1.0, 600 + t as u64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (y0s, y1s): (Vec<Tensor>, Vec<Tensor>) = ys
        .iter()
        .map(|y| {
            let (a, b) = share_plain(y, &hint, k, &mut rng).unwrap();
            (a.data, b.data)
        })
        .unzip();
    let [e0, e1, e2] = establish_inproc_trio(LinkProfile::lan());
    let (z0s, z1s, _) = run_trio(
        [e0, e1, e2],
        {
            let x = x.clone();
            move |mut s| {
                let mut p = MulFixedParty::new_p0(MulOp::MatMul, x);
                p.prepare(&mut s, &hint, k)?;
                let mut out = Vec::new();
                for y0 in &y0s {
                    p.offline_recv(&mut s, &[dim])?;
                    out.push(p.online(&mut s, y0)?);
                }
                Ok(out)
            }
        },
        move |mut s| {
            let mut p = MulFixedParty::new_p1(MulOp::MatMul);
            p.prepare(&mut s, &ScaleHint::configured(1.0), k)?;
            let mut out = Vec::new();
            for y1 in &y1s {
                p.offline_recv(&mut s, &[dim])?;
                out.push(p.online(&mut s, y1)?);
            }
            Ok(out)
        },
        {
            move |mut s| {
                let mut rng = ChaCha8Rng::seed_from_u64(53);
                let mut d = MulFixedDealer::new(MulOp::MatMul, vec![m, dim], hint, k);
                d.prepare(&mut s, &mut rng)?;
                for _ in 0..trials {
                    d.offline_one(&mut s, &[dim], &hint, &mut rng)?;
                }
                Ok(())
            }
        },
    )
    .unwrap();
    let mut f_num = [0.0f64; 2];
    let mut f_den = 0.0f64;
    let mut f_count = 0usize;
    for (t, y) in ys.iter().enumerate() {
        let z = MulOp::MatMul.apply(&x, y).unwrap();
        for i in 0..z.len() {
            let zv = z.data()[i] as f64;
            f_num[0] += (z0s[t].data()[i] as f64 - zv).powi(2);
            f_num[1] += (z1s[t].data()[i] as f64 - zv).powi(2);
            f_den += zv * zv;
            f_count += 1;
        }
    }
    assert!(f_count >= 10_000);

    // Growing-operand variant: keys grow one [1, 16] row per step, fresh
    // query per step; 150 steps accumulate 150*151/2 > 10^4 element trials.
    let steps = 150usize;
    let op = MulOp::HeadScores { heads: 1 };
    let xs: Vec<Tensor> = (0..steps).map(|t| randn(vec![1, dim], 1.0, 900 + t as u64)).collect();
    let qs: Vec<Tensor> = (0..steps).map(|t| randn(vec![dim], 1.0, 1900 + t as u64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let share_all = |ts: &[Tensor], rng: &mut ChaCha8Rng| -> (Vec<Tensor>, Vec<Tensor>) {
        ts.iter()
            .map(|t| {
                let (a, b) = share_plain(t, &hint, k, rng).unwrap();
                (a.data, b.data)
            })
            .unzip()
    };
    let (x0s, x1s) = share_all(&xs, &mut rng);
    let (q0s, q1s) = share_all(&qs, &mut rng);
    let [e0, e1, e2] = establish_inproc_trio(LinkProfile::lan());
    let (g0s, g1s, _) = run_trio(
        [e0, e1, e2],
        move |mut s| {
            let mut p = MulGrowingParty::new(plm::transport::Role::P0, op)?;
            let mut out = Vec::new();
            for (xn, q) in x0s.iter().zip(&q0s) {
                p.offline_recv(&mut s, &[1, dim], &[dim])?;
                out.push(p.online(&mut s, xn, q)?);
            }
            Ok(out)
        },
        move |mut s| {
            let mut p = MulGrowingParty::new(plm::transport::Role::P1, op)?;
            let mut out = Vec::new();
            for (xn, q) in x1s.iter().zip(&q1s) {
                p.offline_recv(&mut s, &[1, dim], &[dim])?;
                out.push(p.online(&mut s, xn, q)?);
            }
            Ok(out)
        },
        {
            move |mut s| {
                let mut rng = ChaCha8Rng::seed_from_u64(55);
                let mut d = MulGrowingDealer::new(op, hint, k);
                for _ in 0..steps {
                    d.offline_step(&mut s, &[1, dim], &[dim], &hint, &mut rng)?;
                }
                Ok(())
            }
        },
    )
    .unwrap();
    let mut g_num = [0.0f64; 2];
    let mut g_den = 0.0f64;
    let mut g_count = 0usize;
    let mut keys = Tensor::zeros(vec![0, dim]);
    for t in 0..steps {
        keys = keys.concat_rows(&xs[t]).unwrap();
        let z = op.apply(&keys, &qs[t]).unwrap();
        for i in 0..z.len() {
            let zv = z.data()[i] as f64;
            g_num[0] += (g0s[t].data()[i] as f64 - zv).powi(2);
            g_num[1] += (g1s[t].data()[i] as f64 - zv).powi(2);
            g_den += zv * zv;
            g_count += 1;
        }
    }
    assert!(g_count >= 10_000);

    let ratios = [
        f_num[0] / f_den,
        f_num[1] / f_den,
        g_num[0] / g_den,
        g_num[1] / g_den,
    ];
    let floor = 0.9 * (k as f64) * (k as f64);
    verdict(
        7,
        &format!(
            "share noise-to-signal ratios {:.3e} / {:.3e} (fixed) and \
             {:.3e} / {:.3e} (growing) all >= {floor:.1e}",
            ratios[0], ratios[1], ratios[2], ratios[3]
        ),
        ratios.iter().all(|&r| r >= floor),
    );
}

#[test]
fn criterion_08_permutation_uniformity_and_space() {
    // n=2, d=2: enumerate all 2! * (2!)^2 = 8 two-dimensional permutations
    // and chi-square the generator against uniform over 8000 draws.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probe = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let draws = 8000usize;
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for _ in 0..draws {
        let p = Permutation2D::random(2, 2, &mut rng);
        let key: Vec<u8> = p.apply(&probe).unwrap().data().iter().map(|&v| v as u8).collect();
        *counts.entry(key).or_default() += 1;
    }
    let expected = draws as f64 / 8.0;
    let stat: f64 = counts
        .values()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let p_value = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
    let all_seen = counts.len() == 8;

    // Count formula h! * (d!)^h, checked against an independently summed
    // log2(h!) for h = 32 heads: already above 2^117 at any column width.
    let independent_log2_fact: f64 = (2..=32u64).map(|i| (i as f64).log2()).sum();
    let formula = perm2d_space_log2(32, 1);
    let space_ok = (formula - independent_log2_fact).abs() < 1e-6
        && formula > 117.0
        && perm2d_space_log2(32, 128) > formula;
    verdict(
        8,
        &format!(
            "2x2 generator covers all 8 permutations, chi-square p = {p_value:.3} (> 0.01); \
             log2 h!(d!)^h at h=32 is {formula:.1} (> 117)"
        ),
        all_seen && p_value > 0.01 && space_ok,
    );
}

#[test]
fn criterion_09_latency_lower_bound() {
    // Emulated 10ms RTT / 1Gbps: every one-way flight costs >= 5ms, so a
    // token step's wall time must be at least (online rounds) x 5ms.
    let cfg = ModelConfig::default();
    let params = gen_toy_model(&cfg).unwrap();
    let sec = secure_generate(
        &params,
        &[5, 17, 29, 3, 101, 999],
        2,
        LinkProfile::wan_a(),
        HeConfig::bfv_default(),
        false,
        13,
    )
    .unwrap();
    let pass = !sec.p1.is_empty()
        && sec.p1.iter().all(|rec| {
            rec.delta.online.wall_s >= rec.delta.online.rounds as f64 * 0.005
        });
    let last = sec.p1.last().unwrap();
    verdict(
        9,
        &format!(
            "predicted token step: {} online rounds, {:.0}ms wall >= {:.0}ms bound under 10ms RTT",
            last.delta.online.rounds,
            last.delta.online.wall_s * 1e3,
            last.delta.online.rounds as f64 * 5.0
        ),
        pass,
    );
}

#[test]
fn criterion_10_exhaustive_retrieval() {
    // Force every permuted-argmax position j in 0..N and check the packed
    // dot product returns the true original index pi[j], with real lattice
    // encryption end to end.
    let n = 4096usize;
    let cfg = HeConfig::bfv_default();
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let client = HeClient::new(cfg.clone(), false, &mut rng).unwrap();
    let server = HeServer::new(cfg.clone(), false).unwrap();
    let slots = cfg.slots;
    let perm = Permutation::random(n, &mut rng);
    let indices = perm.indices();
    let tables: Vec<Vec<u64>> = (0..n.div_ceil(slots))
        .map(|c| {
            indices[c * slots..((c + 1) * slots).min(n)]
                .iter()
                .map(|&i| i as u64)
                .collect()
        })
        .collect();
    let t = cfg.plaintext_modulus;
    let mut failures = 0usize;
    for j in 0..n {
        let cts: Vec<Vec<u8>> = (0..n.div_ceil(slots))
            .map(|c| {
                let lo = c * slots;
                let hi = ((c + 1) * slots).min(n);
                let mut onehot = vec![0u64; hi - lo];
                if (lo..hi).contains(&j) {
                    onehot[j - lo] = 1;
                }
                client.encrypt(&onehot, &mut rng).unwrap()
            })
            .collect();
        let reply = server.dot_accumulate(&cts, &tables).unwrap();
        let vals = client.decrypt(&reply).unwrap();
        let got = vals.iter().fold(0u64, |a, &v| (a + v) % t) as usize;
        if got != indices[j] {
            failures += 1;
        }
    }
    verdict(
        10,
        &format!("exhaustive retrieval at N={n}: {failures} failures (need 0)"),
        failures == 0,
    );
}
