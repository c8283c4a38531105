//! Many put/poll pairs across threads: a visible flag must always expose
//! the complete payload written before it.

use fused_moe::layout::{Buffer, Coord, Round, WriteDescriptor};
use fused_moe::pgas::{Fabric, FlagId, Payload, Signal};
use fused_moe::MoeConfig;

const DEVICES: usize = 4;
const ROUNDS: usize = 625;

fn checksum(words: &[f32]) -> f32 {
    words[..words.len() - 1].iter().sum()
}

#[test]
fn ten_thousand_put_poll_pairs() {
    // 4 devices × 4 local experts; each pass of the outer loop uses a fresh
    // fabric since every flag is single-shot.
    let cfg = MoeConfig::new(16, 16, 4, 16, DEVICES, 1).with_tiles(4, 4);
    let local = cfg.local_experts();
    let rows = 3;
    let mut pairs = 0usize;
    let mut torn = 0usize;
    for round in 0..ROUNDS {
        let fabric = Fabric::new(&cfg);
        let results: Vec<(usize, usize)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..DEVICES)
                .map(|me| {
                    let fabric = &fabric;
                    s.spawn(move || {
                        let dst = (me + 1) % DEVICES;
                        for e in 0..local {
                            let seed = (round * 131 + me * 17 + e) as f32;
                            let mut data: Vec<f32> = (0..rows * cfg.hidden).map(|i| seed + i as f32 * 0.25).collect();
                            let last = data.len() - 1;
                            data[last] = checksum(&data);
                            let w = WriteDescriptor {
                                source: me,
                                target: dst,
                                coord: Coord::new(me, Round::Dispatch, Buffer::Incoming, e, 0),
                            };
                            fabric
                                .put_with_signal(
                                    &w,
                                    &Payload::rows(&data, rows, cfg.hidden),
                                    FlagId::Dispatch { peer: me, expert: e },
                                    Signal { value: rows, round: Round::Dispatch },
                                )
                                .unwrap();
                        }
                        // Poll everything sent to me and verify.
                        let src = (me + DEVICES - 1) % DEVICES;
                        let (mut seen, mut bad) = (0, 0);
                        let mut buf = Vec::new();
                        let mut pending: Vec<usize> = (0..local).collect();
                        while !pending.is_empty() {
                            pending.retain(|&e| match fabric.poll_flag(me, FlagId::Dispatch { peer: src, expert: e }) {
                                Some(sig) => {
                                    let coord = Coord::new(src, Round::Dispatch, Buffer::Incoming, e, 0);
                                    fabric.read_rows(me, &coord, sig.value, 0, cfg.hidden, &mut buf);
                                    if checksum(&buf) != buf[buf.len() - 1] {
                                        bad += 1;
                                    }
                                    seen += 1;
                                    false
                                }
                                None => true,
                            });
                            std::thread::yield_now();
                        }
                        (seen, bad)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (seen, bad) in results {
            pairs += seen;
            torn += bad;
        }
    }
    assert_eq!(pairs, ROUNDS * DEVICES * local);
    assert_eq!(pairs, 10_000);
    assert_eq!(torn, 0);
}
