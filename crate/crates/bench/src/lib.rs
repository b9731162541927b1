//! Fixtures shared by the protocol benchmarks.

use datamarket_core::adversim::{generate_data, DataSpec, Scenario};
use datamarket_core::commitments::EncodingKey;
use datamarket_core::exchange::{
    encode_forged, encode_package, junk_blob, DataBlob, EncodedPackage,
};
use datamarket_core::predicate::{compile_spec, PredicateCircuit};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A medical table with `rows` records and the buyer's predicate over it.
pub struct Fixture {
    pub data: DataBlob,
    pub circuit: PredicateCircuit,
    pub key: EncodingKey,
    pub honest: EncodedPackage,
    /// Junk data with a transcript claiming the predicate holds.
    pub forged: EncodedPackage,
}

impl Fixture {
    pub fn medical(rows: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenario = Scenario::medical(rows, seed);
        let data = generate_data(&DataSpec::Medical { rows }, &mut rng);
        let circuit = compile_spec(&scenario.predicate, &scenario.layout())
            .expect("medical predicate compiles");
        let key = EncodingKey::random(&mut rng);
        let honest = encode_package(&data, &circuit, &key).expect("arity matches");
        let forged =
            encode_forged(&junk_blob(&data, &mut rng), &circuit, &key).expect("arity matches");
        Fixture {
            data,
            circuit,
            key,
            honest,
            forged,
        }
    }
}
