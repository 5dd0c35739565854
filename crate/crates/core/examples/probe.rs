use cow_core::params::SystemParams;
use cow_core::randomness::{DecoyRule, SeedSource, SymbolStream};
use cow_core::rng::{streams, Rng};
use cow_core::session::engine::run_in_process;

fn main() {
    // Component 1: raw symbol generation.
    let mut stream = SymbolStream::new(
        SeedSource::generator(Rng::derive(7, streams::ALICE_QRNG)),
        20_000,
        DecoyRule::PatternMatch,
        Rng::derive(7, 0xaa),
    );
    let mut buf = vec![0u8; 32768];
    let t0 = std::time::Instant::now();
    let reps = 60_000u64;
    for _ in 0..reps {
        stream.fill(&mut buf);
    }
    let dt = t0.elapsed();
    let syms = reps * 32768;
    println!("symbol fill: {:.2} ns/symbol = {:.2} ns/slot ({} decoys)",
        dt.as_nanos() as f64 / syms as f64, dt.as_nanos() as f64 / (2 * syms) as f64, stream.decoys_emitted);

    // Component 2: whole session per slot.
    let mut p = SystemParams::sspd_field(43.0);
    p.protocol.pre_aligned = true;
    p.seed = 779;
    let slots = 2_000_000_000u64;
    let t0 = std::time::Instant::now();
    let (alice, _bob) = run_in_process(&p, slots).unwrap();
    let dt = t0.elapsed();
    println!("session: {:.2} ns/slot; kept {}", dt.as_nanos() as f64 / slots as f64, alice.counters.sifted_kept);
}
