#![allow(dead_code)]

use datamarket_core::commitments::Digest;
use datamarket_core::predicate::{GateId, GateOp, Pattern, PredicateCircuit, Word};
use rand::Rng;

pub fn random_chunks<R: Rng>(rng: &mut R, n: usize) -> Vec<Word> {
    (0..n)
        .map(|_| {
            // Small alphabet so EQ and CONTAINS gates are sometimes true.
            let mut w = Word(rng.gen());
            if rng.gen_bool(0.5) {
                for b in &mut w.0 {
                    *b %= 4;
                }
            }
            w
        })
        .collect()
}

fn is_bool(op: &GateOp) -> bool {
    !matches!(op, GateOp::Input(_) | GateOp::Const(_) | GateOp::Hash(_))
}

/// A well-typed circuit over `data.len()` chunks with at most `max_gates`
/// gates (at least two) whose output is true on `data`.
pub fn random_circuit<R: Rng>(rng: &mut R, data: &[Word], max_gates: usize) -> PredicateCircuit {
    let n = data.len() as u32;
    let target = rng.gen_range(2..=max_gates.max(2));
    let mut gates = vec![GateOp::Input(rng.gen_range(0..n))];
    let mut bools: Vec<GateId> = Vec::new();
    while gates.len() < target - 1 {
        let len = gates.len() as GateId;
        let any = |rng: &mut R| rng.gen_range(0..len);
        let pick = |rng: &mut R, v: &[GateId]| v[rng.gen_range(0..v.len())];
        let op = match rng.gen_range(0..11) {
            0 | 1 => GateOp::Input(rng.gen_range(0..n)),
            2 => GateOp::Const(if rng.gen() {
                Word::from_bool(rng.gen())
            } else {
                Word(rng.gen())
            }),
            3 => GateOp::Eq(any(rng), any(rng)),
            4 => GateOp::Ge64(any(rng), any(rng)),
            5 => {
                let bytes: Vec<u8> = (0..rng.gen_range(1..3))
                    .map(|_| rng.gen_range(0..4))
                    .collect();
                let pattern = if rng.gen() {
                    Pattern::anywhere(bytes)
                } else {
                    Pattern::at(rng.gen_range(0..30), bytes)
                };
                GateOp::Contains(any(rng), pattern)
            }
            6 => GateOp::Hash(if rng.gen() {
                vec![any(rng)]
            } else {
                vec![any(rng), any(rng)]
            }),
            7 => GateOp::HashEq(vec![any(rng)], Digest(rng.gen())),
            8 if bools.len() >= 2 => GateOp::And(pick(rng, &bools), pick(rng, &bools)),
            9 if bools.len() >= 2 => GateOp::Or(pick(rng, &bools), pick(rng, &bools)),
            10 if !bools.is_empty() => GateOp::Not(pick(rng, &bools)),
            _ => GateOp::Eq(any(rng), any(rng)),
        };
        if is_bool(&op) {
            bools.push(len);
        }
        gates.push(op);
    }
    if bools.is_empty() {
        let len = gates.len() as GateId;
        gates.push(GateOp::Eq(rng.gen_range(0..len), rng.gen_range(0..len)));
        bools.push(len);
    }
    // Close with a gate that makes the output true on `data`.
    let b = bools[rng.gen_range(0..bools.len())];
    let probe = PredicateCircuit::new(gates.iter().cloned().chain([GateOp::Or(b, b)]).collect(), n)
        .expect("generator builds valid circuits");
    let holds = probe.eval(data).expect("arity matches");
    gates.push(if holds {
        GateOp::And(b, b)
    } else {
        GateOp::Not(b)
    });
    PredicateCircuit::new(gates, n).expect("generator builds valid circuits")
}
