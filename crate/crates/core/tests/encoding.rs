use circuitsynth::circuit::{ComponentPool, DeviceKind, PortId, Topology, NUM_PORTS};
use circuitsynth::dataset::{random_pool, random_topology};
use circuitsynth::encoding::{
    encode_prompt, encode_topology, lm_sequence, parse_prompt, parse_topology, prompt_ids,
    EncodingMode, ParseError, Vocabulary, MAX_SEQ_LEN,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [EncodingMode; 2] = [EncodingMode::NlIncident, EncodingMode::Array];

fn topology() -> impl Strategy<Value = Topology> {
    (
        proptest::array::uniform5(proptest::sample::select(DeviceKind::ALL.to_vec())),
        proptest::array::uniform13(0u8..NUM_PORTS as u8),
    )
        .prop_map(|(kinds, labels)| Topology::from_labels(ComponentPool::new(kinds), &labels))
}

#[test]
fn ten_thousand_random_topologies_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let vocab = Vocabulary::get();
    for _ in 0..10_000 {
        let pool = random_pool(&mut rng);
        let t = random_topology(pool, &mut rng);
        for mode in MODES {
            let text = encode_topology(&t, mode);
            assert_eq!(
                parse_topology(&text, &pool, mode).unwrap(),
                t,
                "{mode}: {text}"
            );
            assert_eq!(vocab.detokenize(&vocab.tokenize(&text).unwrap().0), text);
            assert!(lm_sequence(&t, mode).unwrap().len() <= MAX_SEQ_LEN);
        }
    }
}

proptest! {
    #[test]
    fn arbitrary_topologies_roundtrip(t in topology()) {
        for mode in MODES {
            let text = encode_topology(&t, mode);
            prop_assert_eq!(parse_topology(&text, t.pool(), mode).unwrap(), t);
        }
    }

    #[test]
    fn netlists_fit_the_model_window(t in topology()) {
        for mode in MODES {
            prop_assert!(Vocabulary::get().ids(&encode_topology(&t, mode)).unwrap().len() <= MAX_SEQ_LEN);
        }
    }

    #[test]
    fn truncated_text_never_panics(t in topology(), cut in 0usize..200) {
        for mode in MODES {
            let text = encode_topology(&t, mode);
            let tokens: Vec<&str> = text.split(' ').collect();
            let short = tokens[..cut.min(tokens.len())].join(" ");
            if let Ok(parsed) = parse_topology(&short, t.pool(), mode) {
                // Only a complete text, or one missing just a trailing binding, can parse.
                prop_assert!(cut + 3 >= tokens.len(), "{} parsed to {}", short, parsed);
            }
        }
    }

    #[test]
    fn prompt_roundtrips(kinds in proptest::array::uniform5(proptest::sample::select(DeviceKind::ALL.to_vec()))) {
        let pool = ComponentPool::new(kinds);
        prop_assert_eq!(parse_prompt(&encode_prompt(&pool)), Some(pool));
        let ids = prompt_ids(&pool);
        let vocab = Vocabulary::get();
        prop_assert_eq!(ids[0], vocab.bos());
        prop_assert_eq!(*ids.last().unwrap(), vocab.sep());
    }
}

#[test]
fn malformed_netlists_are_classified() {
    let pool: ComponentPool = "C,L,Sa,Sb,C".parse().unwrap();
    let full = encode_topology(
        &Topology::from_groups(pool, &[&[PortId::IN, PortId::OUT]]),
        EncodingMode::Array,
    );
    assert!(parse_topology(&full, &pool, EncodingMode::Array).is_ok());
    let cases = [
        ("C0 IN OUT ; C0 IN OUT", "duplicate"),
        ("C0 IN OUT", "missing"),
        ("C0 IN port ; L0 0 0 ; Sa0 0 0 ; Sb0 0 0 ; C1 0 0", "net"),
        ("C0 IN", "truncated"),
        ("C0 IN OUT ; R0 0 0", "unknown"),
    ];
    for (text, what) in cases {
        let err = parse_topology(text, &pool, EncodingMode::Array).unwrap_err();
        let ok = match what {
            "duplicate" => matches!(err, ParseError::DuplicateDevice { .. }),
            "missing" => matches!(err, ParseError::MissingDevice { .. }),
            "net" => matches!(err, ParseError::BadNetName { .. }),
            "truncated" => matches!(err, ParseError::Truncated { .. }),
            _ => matches!(
                err,
                ParseError::UnknownToken { .. } | ParseError::UnexpectedToken { .. }
            ),
        };
        assert!(ok, "{text}: {err:?}");
    }
}

#[test]
fn vocabulary_is_closed() {
    let vocab = Vocabulary::get();
    assert_eq!(vocab.len(), 56);
    assert!(vocab.tokenize("C0 connects to the moon").is_err());
    for (i, tok) in vocab.tokens().iter().enumerate() {
        assert_eq!(vocab.id(tok).map(|id| id as usize), Some(i));
    }
}
