//! Acceptance checks, one per line of output.
//!
//! Reference values come from small independent oracles written here
//! against the raw definitions (amplitudes, pairings, XOR of paired sign
//! bits) rather than from the library's own helpers.
//!
//! Run with `cargo test -p qmfa --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qmfa::adversary::{
    decay_ratio, replay_attempts, run_attack, run_exhaustion, sweep_lifetime, AttackExperiment,
    AttackSetup, Impersonator, StrategyKind,
};
use qmfa::authdb::{AuthDatabase, SharedAuthDb};
use qmfa::hmp4::{
    encode, hmp4_condition, measure, outcome_probabilities, Basis, BitString4, Outcome,
};
use qmfa::protocol::{
    ClientOutcome, ClientRole, HonestClient, Message, ServerConfig, ServerMachine,
};
use qmfa::rng::stream_rng;
use qmfa::token::QuantumToken;
use qmfa::transport::{connect, run_handshake, serve, Direction, InProcessChannel, ServiceConfig};

const EXACT: f64 = 1e-12;
const SIGMAS: f64 = 4.0;
const MC_TRIALS: u64 = 100_000;

type Check = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

mod oracle {
    /// Amplitude `(-1)^{x_i} / 2` on basis state `i - 1`, `x_1` first.
    pub fn amplitudes(x: u8) -> [f64; 4] {
        let mut amps = [0.0; 4];
        for (i, amp) in amps.iter_mut().enumerate() {
            let bit = (x >> (3 - i)) & 1;
            *amp = if bit == 1 { -0.5 } else { 0.5 };
        }
        amps
    }

    /// Computational-basis pairs grouped by basis `m`; outcome `a` picks
    /// the pair.
    pub fn pairs(m: u8) -> [(usize, usize); 2] {
        if m == 0 {
            [(0, 1), (2, 3)]
        } else {
            [(0, 2), (1, 3)]
        }
    }

    /// `|<v|psi>|^2` where `v = (|p> + (-1)^b |q>) / sqrt 2`.
    pub fn probability(amps: &[f64; 4], m: u8, a: u8, b: u8) -> f64 {
        let (p, q) = pairs(m)[a as usize];
        let sign = if b == 0 { 1.0 } else { -1.0 };
        let overlap = (amps[p] + sign * amps[q]) / 2f64.sqrt();
        overlap * overlap
    }

    /// An outcome is consistent with `x` iff `b` is the XOR of the two sign
    /// bits in its pair.
    pub fn valid(x: u8, m: u8, a: u8, b: u8) -> bool {
        let (p, q) = pairs(m)[a as usize];
        let bit = |i: usize| (x >> (3 - i)) & 1;
        b == bit(p) ^ bit(q)
    }

    /// Success probability of one uniformly guessed reply, averaged over
    /// `x` and `m`.
    pub fn blind_per_register() -> f64 {
        let mut hits = 0;
        let mut total = 0;
        for x in 0..16 {
            for m in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        total += 1;
                        hits += usize::from(valid(x, m, a, b));
                    }
                }
            }
        }
        hits as f64 / total as f64
    }

    /// Success probability of answering with one honest observation made
    /// in a random basis: replay it if the basis matches, guess otherwise.
    pub fn observed_per_register() -> f64 {
        let guess = blind_per_register();
        let mut sum = 0.0;
        for x in 0..16u8 {
            let amps = amplitudes(x);
            for m_seen in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let p_seen = probability(&amps, m_seen, a, b);
                        for m_new in 0..2 {
                            let win = if m_new == m_seen {
                                if valid(x, m_new, a, b) {
                                    1.0
                                } else {
                                    0.0
                                }
                            } else {
                                guess
                            };
                            sum += p_seen * win;
                        }
                    }
                }
            }
        }
        sum / (16.0 * 2.0 * 2.0)
    }

    pub fn renewal_threshold(k: usize) -> usize {
        k.div_ceil(4)
    }
}

fn within_sigmas(exp: &AttackExperiment, expected: f64) -> Result<String, String> {
    let sigma = (expected * (1.0 - expected) / exp.trials() as f64).sqrt();
    let dev = (exp.rate() - expected).abs() / sigma;
    let line = format!(
        "k={} t={} rate={:.6} expected={:.6} ({:.2} sigma, {} trials)",
        exp.setup.k,
        exp.setup.t,
        exp.rate(),
        expected,
        dev,
        exp.trials()
    );
    if dev <= SIGMAS {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_1() -> Check {
    let mut worst: f64 = 0.0;
    for x in BitString4::ALL {
        let state = encode(x);
        for m in [Basis::Zero, Basis::One] {
            let probs = outcome_probabilities(&state, m);
            for (j, p) in probs.iter().enumerate() {
                let (a, b) = ((j / 2) as u8, (j % 2) as u8);
                let want = if oracle::valid(x.to_u8(), m.bit(), a, b) {
                    0.5
                } else {
                    0.0
                };
                let oracle_p = oracle::probability(&oracle::amplitudes(x.to_u8()), m.bit(), a, b);
                ensure((oracle_p - want).abs() <= EXACT, || {
                    format!("oracle disagrees with itself at x={x} m={m} j={j}")
                })?;
                ensure(
                    hmp4_condition(x, m, Outcome::from_index(j)) == (want > 0.0),
                    || format!("predicate disagrees at x={x} m={m} outcome={j}"),
                )?;
                worst = worst.max((p - want).abs());
            }
        }
    }
    ensure(worst <= EXACT, || format!("max deviation {worst:e}"))?;
    Ok(format!("16 strings x 2 bases, max deviation {worst:.1e}"))
}

fn criterion_2() -> Check {
    let (k, t, sessions) = (64, 12, 1000);
    let mut db = AuthDatabase::new();
    let mut rng = stream_rng(2, 0);
    let mut token = db.issue(k, "alice", &mut rng).unwrap().0;
    let db = SharedAuthDb::new(db);
    let mut tokens_issued = 1;
    let mut accepted = 0;
    let mut exhausted = 0;
    let mut s = 0;
    while accepted < sessions {
        s += 1;
        let mut server =
            ServerMachine::new(db.clone(), ServerConfig::new(t), stream_rng(2, 2 * s + 1));
        let mut client = HonestClient::new(&mut token, "alice", stream_rng(2, 2 * s + 2));
        let report = run_handshake(&mut client, &mut server, &mut InProcessChannel::new());
        match report.client {
            ClientOutcome::Accepted => {
                ensure(report.accepted(), || {
                    format!("session {s}: client/server disagree")
                })?;
                let session = report.session.unwrap();
                let record = db.lookup(token.token_id()).unwrap();
                for (i, m) in session.bases() {
                    let o = session.replies()[i];
                    ensure(
                        oracle::valid(record.x_strings[i - 1].to_u8(), m.bit(), o.a(), o.b()),
                        || format!("session {s}: reply at {i} violates the oracle predicate"),
                    )?;
                }
                accepted += 1;
            }
            ClientOutcome::Exhausted => {
                exhausted += 1;
                token = db.issue(k, "alice", &mut rng).unwrap().0;
                tokens_issued += 1;
            }
            other => return Err(format!("session {s}: honest client ended with {other:?}")),
        }
    }
    Ok(format!(
        "{accepted} accepted, 0 rejected, {exhausted} token-exhausted aborts, {tokens_issued} tokens"
    ))
}

fn criterion_3() -> Check {
    let k = 64;
    let per_register = oracle::blind_per_register();
    ensure((per_register - 0.5).abs() <= EXACT, || {
        format!("per-register {per_register}")
    })?;
    let mut runs = Vec::new();
    for t in [3, 6, 9, 12] {
        let exp = run_attack(
            StrategyKind::BlindGuess,
            AttackSetup::new(k, t, MC_TRIALS, 300 + t as u64),
        )
        .map_err(|e| e.to_string())?;
        runs.push(exp);
    }
    let mut details = Vec::new();
    for exp in &runs {
        let n = 2 * exp.setup.t / 3;
        let expected = per_register.powi(n as i32);
        details.push(within_sigmas(exp, expected)?);
    }
    for pair in runs.windows(2) {
        let (ratio, sigma) = decay_ratio(&pair[0], &pair[1]).unwrap();
        let line = format!(
            "t={}->{} ratio {ratio:.4} vs 0.25 ({:.2} sigma)",
            pair[0].setup.t,
            pair[1].setup.t,
            (ratio - 0.25).abs() / sigma
        );
        ensure((ratio - 0.25).abs() <= SIGMAS * sigma, || line.clone())?;
        details.push(line);
    }
    Ok(format!(
        "{} | {} | {}",
        details[3],
        details[0],
        details[4..].join("; ")
    ))
}

fn criterion_4() -> Check {
    let per_register = oracle::observed_per_register();
    ensure((per_register - 0.75).abs() <= EXACT, || {
        format!("per-register {per_register}")
    })?;
    let exp = run_attack(
        StrategyKind::FullObservation,
        AttackSetup::new(64, 12, MC_TRIALS, 4),
    )
    .map_err(|e| e.to_string())?;
    within_sigmas(&exp, per_register.powi(8))
}

fn criterion_5() -> Check {
    let mut collapsed = 0;
    let mut worst: f64 = 0.0;
    for x in BitString4::ALL {
        for m in [Basis::Zero, Basis::One] {
            let mut seen = BTreeMap::new();
            for seed in 0..1000 {
                if seen.len() == 2 {
                    break;
                }
                let (o, state) = measure(encode(x), m, &mut stream_rng(5, seed)).unwrap();
                seen.entry(o.index()).or_insert(state);
            }
            ensure(seen.len() == 2, || {
                format!("x={x} m={m}: saw {} outcomes", seen.len())
            })?;
            for state in seen.values() {
                collapsed += 1;
                let other = m.other();
                let probs = outcome_probabilities(state, other);
                for p in probs {
                    worst = worst.max((p - 0.25).abs());
                }
                let satisfied: f64 = (0..4)
                    .filter(|j| {
                        let (a, b) = ((j / 2) as u8, (j % 2) as u8);
                        oracle::valid(x.to_u8(), other.bit(), a, b)
                    })
                    .map(|j| probs[j])
                    .sum();
                worst = worst.max((satisfied - 0.5).abs());
            }
        }
    }
    ensure(worst <= EXACT, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "{collapsed} collapsed states, max deviation {worst:.1e}"
    ))
}

fn criterion_6() -> Check {
    for k in 3..=100 {
        let mut db = AuthDatabase::new();
        let mut token: QuantumToken = db
            .issue(k, "alice", &mut stream_rng(6, k as u64))
            .unwrap()
            .0;
        let threshold = oracle::renewal_threshold(k);
        for i in 1..=k {
            ensure(
                token.renewal_due() == (token.used_count() >= threshold),
                || format!("k={k}: renewal_due wrong at {} used", token.used_count()),
            )?;
            token
                .measure_slot(i, Basis::Zero, &mut stream_rng(6, i as u64))
                .unwrap();
        }
    }
    let mut sessions = 0;
    for (k, t) in [(64, 3), (64, 6), (64, 12), (30, 9), (12, 12), (100, 15)] {
        for seed in 0..20 {
            let r = run_exhaustion(k, t, seed).map_err(|e| e.to_string())?;
            let per = 2 * t / 3;
            ensure(r.consumed_per_session.iter().all(|c| *c == per), || {
                format!(
                    "k={k} t={t} seed={seed}: consumption {:?}",
                    r.consumed_per_session
                )
            })?;
            ensure(r.exhausted && r.failures == 0, || {
                format!("k={k} t={t}: did not end in exhaustion")
            })?;
            ensure(r.server_consumed == r.registers_consumed, || {
                "server/client mismatch".into()
            })?;
            let first_due = (1..)
                .find(|s| s * per >= oracle::renewal_threshold(k))
                .unwrap();
            let expect = (first_due <= r.sessions_completed).then_some(first_due);
            ensure(r.renewal_first_session == expect, || {
                format!(
                    "k={k} t={t}: renewal at {:?}, expected {expect:?}",
                    r.renewal_first_session
                )
            })?;
            if t == k {
                ensure(r.sessions_completed <= 1, || {
                    "t = k allowed a second session".into()
                })?;
            }
            sessions += r.sessions_completed;
        }
    }
    let ts = [3, 6, 9, 12, 18, 24, 36, 48, 63];
    let rows = sweep_lifetime(64, &ts, 200, 6).map_err(|e| e.to_string())?;
    let means: Vec<f64> = rows.iter().map(|r| r.mean_sessions).collect();
    ensure(means.windows(2).all(|w| w[0] >= w[1]), || {
        format!("means not monotone: {means:?}")
    })?;
    let k64_t12 = run_exhaustion(64, 12, 1).map_err(|e| e.to_string())?;
    Ok(format!(
        "{sessions} sessions each used 2t/3; k=64 t=12 renewal after session {:?} ({:?} used); sweep means {}",
        k64_t12.renewal_first_session,
        k64_t12.renewal_first_used,
        means.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(" ")
    ))
}

fn criterion_7() -> Check {
    let setup = AttackSetup::new(64, 12, 1000, 7);
    let attempts = replay_attempts(&setup).map_err(|e| e.to_string())?;
    let expected_cmds = ["AUTH", "CHALLENGE", "SUBSET", "BASES", "RESPONSE", "RESULT"];
    let mut differing = 0;
    for (i, a) in attempts.iter().enumerate() {
        let entries = a.recorded.entries();
        ensure(entries.len() == 6, || {
            format!("attempt {i}: {} recorded lines", entries.len())
        })?;
        for (j, (entry, cmd)) in entries.iter().zip(expected_cmds).enumerate() {
            let dir = if j % 2 == 0 {
                Direction::ClientToServer
            } else {
                Direction::ServerToClient
            };
            let parsed = Message::parse(&entry.line).map_err(|e| e.to_string())?;
            ensure(entry.direction == dir && parsed.command() == cmd, || {
                format!(
                    "attempt {i}: line {j} is {:?} {}",
                    entry.direction, entry.line
                )
            })?;
        }
        ensure(entries[5].line == "RESULT OK", || {
            format!("attempt {i}: honest session failed")
        })?;
        let recorded_response = &entries[4].line;
        if let Some(resent) = a
            .replay
            .entries()
            .iter()
            .find(|e| e.line.starts_with("RESPONSE "))
        {
            ensure(&resent.line == recorded_response, || {
                format!("attempt {i}: response altered")
            })?;
        }
        if !a.same_challenge {
            differing += 1;
            ensure(!a.accepted, || {
                format!("attempt {i}: replay accepted with a new challenge")
            })?;
        }
    }

    // k = t: the recorded subset is always replayable, only the bases vary
    let per_register = oracle::observed_per_register();
    let full = run_attack(
        StrategyKind::TranscriptReplay,
        AttackSetup::new(12, 12, MC_TRIALS, 70),
    )
    .map_err(|e| e.to_string())?;
    let rate_line = within_sigmas(&full, per_register.powi(8))?;
    let sparse = run_attack(
        StrategyKind::TranscriptReplay,
        AttackSetup::new(64, 12, 20_000, 71),
    )
    .map_err(|e| e.to_string())?;
    let sparse_expected = sparse.expected.unwrap();
    let sparse_sigma = (sparse_expected * (1.0 - sparse_expected) / sparse.trials() as f64).sqrt();
    ensure(
        (sparse.rate() - sparse_expected).abs()
            <= SIGMAS * sparse_sigma.max(1.0 / sparse.trials() as f64),
        || {
            format!(
                "k=64 unconditioned replay rate {} vs {sparse_expected:e}",
                sparse.rate()
            )
        },
    )?;
    Ok(format!(
        "6-line transcripts; {differing}/1000 fresh challenges differed, all rejected; unconditioned replay {rate_line}; k=64: {} successes",
        sparse.successes
    ))
}

fn criterion_8() -> Check {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut db = AuthDatabase::new();
    let mut rng = stream_rng(8, 0);
    let mut tokens: Vec<QuantumToken> = (0..4)
        .map(|i| db.issue(16 + i, &format!("user{i}"), &mut rng).unwrap().0)
        .collect();
    let shared = SharedAuthDb::new(db);
    for (i, token) in tokens.iter_mut().enumerate() {
        let mut server = ServerMachine::new(
            shared.clone(),
            ServerConfig::new(6),
            stream_rng(8, 10 + i as u64),
        );
        let mut client = HonestClient::new(token, format!("user{i}"), stream_rng(8, 20 + i as u64));
        run_handshake(&mut client, &mut server, &mut InProcessChannel::new());
    }
    shared.revoke(tokens[3].token_id()).unwrap();
    shared.record_failure(tokens[2].token_id()).unwrap();
    let db = shared.snapshot();

    let db_path = dir.path().join("auth.db");
    db.save(&db_path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&db_path).map_err(|e| e.to_string())?;
    let reloaded = AuthDatabase::load(&db_path).map_err(|e| e.to_string())?;
    ensure(reloaded == db, || {
        "database changed across save/load".into()
    })?;
    ensure(reloaded.to_file_string().as_bytes() == bytes, || {
        "database bytes differ".into()
    })?;
    for (i, token) in tokens.iter().enumerate() {
        let path = dir.path().join(format!("t{i}"));
        token.save(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let back = QuantumToken::load(&path).map_err(|e| e.to_string())?;
        ensure(&back == token, || {
            format!("token {i} changed across save/load")
        })?;
        ensure(back.to_file_string().as_bytes() == bytes, || {
            format!("token {i} bytes differ")
        })?;
    }

    // the same seeded sessions over both carriers, honest and blind
    let mut agree = 0;
    let mut successes = 0;
    for seed in 0..40u64 {
        let t = 3;
        let build = || {
            let mut db = AuthDatabase::new();
            let token = db
                .issue(9, "alice", &mut stream_rng(800 + seed, 0))
                .unwrap()
                .0;
            (db, token)
        };
        let honest = seed % 2 == 0;
        let run_client = |token: &mut QuantumToken, f: &mut dyn FnMut(&mut dyn ClientRole)| {
            if honest {
                let mut c = HonestClient::new(token, "alice", stream_rng(seed, 99));
                f(&mut c);
            } else {
                let mut c =
                    Impersonator::blind("alice", token.token_id().clone(), stream_rng(seed, 99));
                f(&mut c);
            }
        };

        let (db, mut token) = build();
        let mut server = ServerMachine::new(
            SharedAuthDb::new(db),
            ServerConfig::new(t),
            stream_rng(seed, 0),
        );
        let mut local = None;
        run_client(&mut token, &mut |c| {
            local = Some(run_handshake(c, &mut server, &mut InProcessChannel::new()));
        });
        let local = local.unwrap();

        let (db, mut token) = build();
        let mut config = ServiceConfig::new(ServerConfig::new(t));
        config.seed = Some(seed);
        let handle =
            serve("127.0.0.1:0", SharedAuthDb::new(db), config).map_err(|e| e.to_string())?;
        let addr = handle.local_addr();
        let mut remote = None;
        run_client(&mut token, &mut |c| {
            remote = Some(connect(addr).unwrap().run_client(c).unwrap());
        });
        let remote = remote.unwrap();
        let log = handle
            .next_session(Duration::from_secs(10))
            .ok_or("no session logged")?;
        handle.shutdown();

        ensure(local.verdict == log.verdict, || {
            format!(
                "seed {seed}: {} in process vs {} over socket",
                local.verdict, log.verdict
            )
        })?;
        ensure(
            local.transcript.to_text() == remote.transcript.to_text(),
            || format!("seed {seed}: transcripts differ"),
        )?;
        agree += 1;
        successes += usize::from(local.accepted());
    }
    Ok(format!(
        "db ({} records) and 4 token files byte-exact; {agree}/40 seeded sessions identical across carriers ({successes} accepted)",
        db.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "exact soundness", criterion_1),
        (2, "completeness", criterion_2),
        (3, "blind impersonator", criterion_3),
        (4, "eavesdropping replayer", criterion_4),
        (5, "cross-basis erasure", criterion_5),
        (6, "lifetime mechanics", criterion_6),
        (7, "transcript and replay conformance", criterion_7),
        (8, "persistence and transport transparency", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let started = Instant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {n}: {name} [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {n}: {name} [{secs:.1}s] {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
