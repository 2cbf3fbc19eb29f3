use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use negpos_core::attack::protocol::serve;
use negpos_core::attack::{
    evaluate_key_protocol, make_external_oracle, make_synthetic_oracle, swap_attack, AttackOptions, Endpoint, Move,
    OracleError, StopReason, SyntheticAccuracy, SyntheticOracleParams,
};
use negpos_core::{generate_key, hamming_distance, Key};
use proptest::prelude::*;

/// Shapes with `n` key bits.
fn shape_for(n: usize) -> (usize, usize) {
    match n {
        8 => (2, 2),
        4 => (1, 2),
        n => (n, 1),
    }
}

fn key_from_word(n: usize, word: u32) -> Key {
    let (c, m) = shape_for(n);
    Key::from_bits(c, m, (0..n).map(|k| word >> (n - 1 - k) & 1 == 1).collect()).unwrap()
}

/// Best score over every key with the given weight, by enumeration.
fn brute_force_best(scorer: &SyntheticAccuracy, n: usize, weight: usize) -> f64 {
    (0u32..1 << n)
        .filter(|w| w.count_ones() as usize == weight)
        .map(|w| scorer.score(&key_from_word(n, w)).unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn params(truth: Key, gamma: f64) -> SyntheticOracleParams {
    SyntheticOracleParams { shape_gamma: gamma, ..SyntheticOracleParams::noiseless(truth, 0.001, 0.73) }
}

#[test]
fn greedy_swaps_reach_the_weight_class_optimum() {
    for n in [8usize, 10] {
        for gamma in [0.5, 1.0, 2.0] {
            for case in 0u32..40 {
                let seed = format!("{n}-{gamma}-{case}");
                let (c, m) = shape_for(n);
                let truth = generate_key(c, m, Some(format!("t{seed}").as_bytes())).unwrap();
                let start = generate_key(c, m, Some(format!("s{seed}").as_bytes())).unwrap();
                let scorer = SyntheticAccuracy::new(params(truth.clone(), gamma)).unwrap();
                let best = brute_force_best(&scorer, n, start.weight());

                let mut oracle = make_synthetic_oracle(params(truth.clone(), gamma), None).unwrap();
                let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(1000)).unwrap();
                assert_eq!(trace.stop_reason, StopReason::Converged);
                assert_eq!(trace.best_accuracy, best, "n={n} gamma={gamma} case={case}");
                assert_eq!(
                    hamming_distance(&trace.best_key, &truth).unwrap(),
                    start.weight().abs_diff(truth.weight())
                );
            }
        }
    }
}

#[test]
fn matched_weight_at_n8_finds_the_exact_key() {
    // enumeration: within the weight class the true key is the unique maximizer
    let truth = key_from_word(8, 0b1011_0010);
    let scorer = SyntheticAccuracy::new(params(truth.clone(), 1.0)).unwrap();
    let maximizers: Vec<u32> = (0u32..256)
        .filter(|w| w.count_ones() == 4)
        .filter(|&w| scorer.score(&key_from_word(8, w)).unwrap() == 0.73)
        .collect();
    assert_eq!(maximizers, vec![0b1011_0010]);

    for start in (0u32..256).filter(|w| w.count_ones() == 4) {
        let mut oracle = make_synthetic_oracle(params(truth.clone(), 1.0), None).unwrap();
        let trace = swap_attack(&mut oracle, &key_from_word(8, start), AttackOptions::swaps(100)).unwrap();
        assert_eq!(trace.best_key, truth);
        assert_eq!(trace.best_accuracy, 0.73);
    }
}

#[test]
fn weight_gap_law_by_enumeration() {
    for n in [4usize, 8, 10] {
        let truth = key_from_word(n, 0b10_1100_1011 & ((1 << n) - 1));
        let scorer = SyntheticAccuracy::new(params(truth.clone(), 1.0)).unwrap();
        for start_word in 0u32..1 << n {
            let start = key_from_word(n, start_word);
            let mut oracle = make_synthetic_oracle(params(truth.clone(), 1.0), None).unwrap();
            let trace = swap_attack(&mut oracle, &start, AttackOptions::swaps(1000)).unwrap();
            let gap = start.weight().abs_diff(truth.weight());
            assert_eq!(hamming_distance(&trace.best_key, &truth).unwrap(), gap, "n={n} start={start_word:b}");
            assert_eq!(trace.best_accuracy, brute_force_best(&scorer, n, start.weight()));
        }
    }
}

fn noisy_params(truth: Key, sigma: f64, seed: u64) -> SyntheticOracleParams {
    SyntheticOracleParams {
        noise_sigma: sigma,
        noise_seed: seed.to_be_bytes().to_vec(),
        ..params(truth, 1.5)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn trace_invariants(t in 0u32..1024, s in 0u32..1024, sigma in 0.0f64..0.2, seed in any::<u64>(), budget in prop::option::of(1usize..200), flips in any::<bool>()) {
        let truth = key_from_word(10, t);
        let start = key_from_word(10, s);
        let mut oracle = make_synthetic_oracle(noisy_params(truth.clone(), sigma, seed), budget).unwrap();
        let opts = AttackOptions { max_passes: 20, allow_flips: flips };
        let trace = swap_attack(&mut oracle, &start, opts).unwrap();

        // budget law and accounting
        prop_assert_eq!(trace.queries.len(), oracle.call_count());
        if let Some(b) = budget {
            prop_assert!(trace.queries.len() <= b);
        }
        // monotone best-so-far, strict on accept
        let mut best = trace.queries[0].accuracy;
        let mut current = start.clone();
        for q in &trace.queries[1..] {
            prop_assert_eq!(q.accepted, q.accuracy > best);
            if q.accepted {
                best = q.accuracy;
            }
            let candidate = match q.mv.unwrap() {
                Move::Swap(i, j) => {
                    prop_assert!(i < j);
                    prop_assert_ne!(current.bit(i), current.bit(j));
                    current.with_swapped(i, j)
                }
                Move::Flip(i) => {
                    prop_assert!(flips);
                    current.with_flipped(i)
                }
            };
            prop_assert_eq!(q.candidate, candidate.fingerprint());
            if !flips {
                prop_assert_eq!(candidate.weight(), start.weight());
            }
            if q.accepted {
                current = candidate;
            }
        }
        let max = trace.queries.iter().map(|q| q.accuracy).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(trace.best_accuracy, max);
        prop_assert_eq!(&trace.best_key, &current);

        // deterministic for fixed inputs
        let mut again = make_synthetic_oracle(noisy_params(truth, sigma, seed), budget).unwrap();
        prop_assert_eq!(swap_attack(&mut again, &start, opts).unwrap(), trace);
    }
}

#[test]
fn protocol_triple_with_complement() {
    let truth = generate_key(3, 4, Some(b"eval")).unwrap();
    let mut oracle = make_synthetic_oracle(params(truth.clone(), 1.0), None).unwrap();
    let report = evaluate_key_protocol(&mut oracle, &truth, &truth.complement()).unwrap();
    let plain = 0.001 + 0.729 * (48 - truth.weight()) as f64 / 48.0;
    assert_eq!(report.acc_correct, 0.73);
    assert_eq!(report.acc_incorrect, 0.001);
    assert!((report.acc_plain - plain).abs() < 1e-12);
}

fn synthetic_server(truth: Key) -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let scorer = SyntheticAccuracy::new(params(truth.clone(), 1.0)).unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        let shape = Some((truth.channels(), truth.block_size()));
        serve(reader, stream, shape, |k| scorer.score(k).map_err(|e| e.to_string())).unwrap();
    });
    (addr, handle)
}

#[test]
fn attack_over_tcp_matches_local_attack() {
    let truth = key_from_word(8, 0b0110_1001);
    let start = key_from_word(8, 0b1001_0110);
    let (addr, handle) = synthetic_server(truth.clone());
    let endpoint = Endpoint::Tcp(addr);
    let mut remote = make_external_oracle(&endpoint, 2, 2, None, Duration::from_secs(10)).unwrap();
    let remote_trace = swap_attack(&mut remote, &start, AttackOptions::swaps(100)).unwrap();
    drop(remote);
    handle.join().unwrap();

    // the wire rounds to six digits; these accuracies are exact at that precision
    let mut local = make_synthetic_oracle(params(truth.clone(), 1.0), None).unwrap();
    let local_trace = swap_attack(&mut local, &start, AttackOptions::swaps(100)).unwrap();
    assert_eq!(remote_trace.best_key, truth);
    assert_eq!(remote_trace.queries.len(), local_trace.queries.len());
    assert_eq!(remote_trace.best_key, local_trace.best_key);
}

fn script(body: &str) -> (tempfile::TempDir, Endpoint) {
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("oracle.sh");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    let endpoint = Endpoint::Exec(format!("sh {}", path.display()));
    (dir, endpoint)
}

#[test]
fn exec_oracle_reads_replies() {
    let (_dir, endpoint) = script("read hello\necho READY\nwhile read cmd payload; do echo \"ACC 0.7263\"; done\n");
    let mut oracle = make_external_oracle(&endpoint, 3, 4, Some(2), Duration::from_secs(10)).unwrap();
    let key = generate_key(3, 4, Some(b"x")).unwrap();
    assert_eq!(oracle.evaluate(&key).unwrap(), 0.7263);
    assert_eq!(oracle.evaluate(&key).unwrap(), 0.7263);
    assert!(matches!(oracle.evaluate(&key), Err(OracleError::BudgetExhausted(2))));
}

#[test]
fn exec_oracle_out_of_range_reply_is_a_protocol_violation() {
    let (_dir, endpoint) = script("read hello\necho READY\nwhile read cmd payload; do echo \"ACC 1.5\"; done\n");
    let mut oracle = make_external_oracle(&endpoint, 1, 2, None, Duration::from_secs(10)).unwrap();
    let err = oracle.evaluate(&Key::zeros(1, 2).unwrap()).unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)), "{err:?}");
}

#[test]
fn exec_oracle_errors_and_timeouts() {
    let (_dir, endpoint) = script("read hello\necho READY\nwhile read cmd payload; do echo \"ERR no gpu\"; done\n");
    let mut oracle = make_external_oracle(&endpoint, 1, 2, None, Duration::from_secs(10)).unwrap();
    assert!(matches!(oracle.evaluate(&Key::zeros(1, 2).unwrap()), Err(OracleError::Remote(m)) if m == "no gpu"));

    let (_dir, endpoint) = script("read hello\necho READY\nsleep 5\n");
    let mut oracle = make_external_oracle(&endpoint, 1, 2, None, Duration::from_millis(200)).unwrap();
    assert!(matches!(oracle.evaluate(&Key::zeros(1, 2).unwrap()), Err(OracleError::Timeout(_))));

    let (_dir, endpoint) = script("read hello\necho \"ERR wrong shape\"\n");
    let err = make_external_oracle(&endpoint, 1, 2, None, Duration::from_secs(10)).unwrap_err();
    assert!(matches!(err, OracleError::Connection(_)), "{err:?}");
}

#[test]
fn unreachable_endpoints_fail_before_any_query() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let err = make_external_oracle(&Endpoint::Tcp(addr), 1, 2, None, Duration::from_secs(2)).unwrap_err();
    assert!(matches!(err, OracleError::Connection(_)), "{err:?}");

    let err = make_external_oracle(&Endpoint::Exec("exit 3".into()), 1, 2, None, Duration::from_secs(2)).unwrap_err();
    assert!(matches!(err, OracleError::Connection(_)), "{err:?}");
}
