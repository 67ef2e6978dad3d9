mod common;

use circuitscope::trace::{
    decode_trace_set, encode_trace_set, encoded_len, load_trace_set, load_trace_set_with, validate_trace_set,
    write_trace_set, LoadOptions, PromptTrace, TaskType, TraceConfig, TraceError, TraceSet,
};
use common::{bitwise_equal, corruptions, is_located, random_trace_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encode(ts: &TraceSet) -> Vec<u8> {
    let mut bytes = Vec::new();
    encode_trace_set(ts, &mut bytes).unwrap();
    bytes
}

fn example_set() -> TraceSet {
    let cfg = TraceConfig::new(2, 2, 4, 8, "tiny");
    let prompt = |id: &str, task| PromptTrace {
        prompt_id: id.into(),
        task_type: task,
        seq_len: 3,
        hidden_states: (0..8).map(|i| i as f32 * 0.25).collect(),
        mlp_activations: (0..16).map(|i| i as f32 - 8.0).collect(),
        attention: [0.5f32, 0.25, 0.25].repeat(4),
    };
    TraceSet::new(cfg, vec![prompt("a", TaskType::Recall), prompt("bb", TaskType::Reasoning)])
}

#[test]
fn file_size_follows_layout() {
    let ts = example_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.actr");
    write_trace_set(&ts, &path).unwrap();
    // magic, version, five u32 dims, u16 + "tiny".
    let header = 4 + 4 + 20 + 2 + 4;
    // u16 + id, task byte, u32 seq_len.
    let metadata = (2 + 1 + 1 + 4) + (2 + 2 + 1 + 4);
    let floats = 2 * (2 * 4 + 2 * 8 + 2 * 2 * 3) * 4;
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, header + floats + metadata);
    assert_eq!(size, 30 + 4 + 288 + 17);
    assert_eq!(encoded_len(&ts), size);
    assert!(bitwise_equal(&load_trace_set(&path).unwrap(), &ts));
}

#[test]
fn random_sets_round_trip_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mut ts = random_trace_set(&mut rng);
        // Include payloads that only survive a bitwise copy.
        ts.prompts[0].hidden_states[0] = -0.0;
        ts.prompts[0].mlp_activations[0] = f32::MIN_POSITIVE / 2.0;
        let bytes = encode(&ts);
        assert_eq!(bytes.len(), encoded_len(&ts));
        let back = decode_trace_set(&bytes, &LoadOptions::default()).unwrap();
        assert!(bitwise_equal(&back, &ts));
        assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn single_field_corruptions_are_rejected_with_locations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let ts = random_trace_set(&mut rng);
        let bytes = encode(&ts);
        for (name, bad) in corruptions(&mut rng, &ts, &bytes) {
            match decode_trace_set(&bad, &LoadOptions::default()) {
                Ok(_) => panic!("{name}: corrupted file decoded"),
                Err(e) => assert!(is_located(&e), "{name}: unlocated error {e}"),
            }
        }
    }
}

#[test]
fn named_errors() {
    let ts = example_set();
    let bytes = encode(&ts);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    let e = decode_trace_set(&bad, &LoadOptions::default()).unwrap_err();
    assert!(e.to_string().contains("bad magic"), "{e}");

    // Cut inside the second prompt's mlp array.
    let cut = encoded_len(&ts) - 4 * (2 * 2 * 3) - 8;
    let e = decode_trace_set(&bytes[..cut], &LoadOptions::default()).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("truncated payload") && msg.contains("prompt 1") && msg.contains("`bb`"), "{msg}");
    assert!(msg.contains("mlp_activations"), "{msg}");

    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 3]);
    assert!(matches!(
        decode_trace_set(&long, &LoadOptions::default()),
        Err(TraceError::TrailingBytes { count: 3, .. })
    ));

    let mut wrong_version = bytes;
    wrong_version[4] = 9;
    assert!(matches!(
        decode_trace_set(&wrong_version, &LoadOptions::default()),
        Err(TraceError::UnsupportedVersion(9))
    ));
}

#[test]
fn payload_cap_applies_before_allocation() {
    let ts = example_set();
    let mut bytes = encode(&ts);
    // Claim a billion layers; the file is tiny.
    bytes[8..12].copy_from_slice(&1_000_000_000u32.to_le_bytes());
    let e = decode_trace_set(&bytes, &LoadOptions::default()).unwrap_err();
    assert!(matches!(e, TraceError::PayloadTooLarge { .. }), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.actr");
    write_trace_set(&ts, &path).unwrap();
    let tight = LoadOptions { max_payload_bytes: 100 };
    assert!(matches!(load_trace_set_with(&path, &tight), Err(TraceError::PayloadTooLarge { .. })));
}

#[test]
fn writer_refuses_empty_and_invalid_sets() {
    let mut ts = example_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.actr");

    ts.prompts[1].attention[0] = 0.0;
    let e = write_trace_set(&ts, &path).unwrap_err();
    assert!(matches!(e, TraceError::Invalid(_)));
    assert!(!path.exists());

    ts.prompts.clear();
    assert_eq!(write_trace_set(&ts, &path).unwrap_err().to_string(), "empty trace set");
}

#[test]
fn validation_names_the_injected_location() {
    let ts = example_set();
    assert!(validate_trace_set(&ts).ok);
    assert!(validate_trace_set(&ts).issues.is_empty());

    let mut bad = ts.clone();
    bad.prompts[0].attention[3] = 0.25;
    bad.prompts[0].attention[4] = 0.0;
    let r = validate_trace_set(&bad);
    assert!(!r.ok);
    assert_eq!(r.issues.len(), 1);
    assert_eq!((r.issues[0].prompt_id.as_str(), r.issues[0].field.as_str()), ("a", "attention"));
    assert!(r.issues[0].description.contains("layer 0, head 1"));
    assert!(r.issues[0].description.contains("not normalized"));

    let mut bad = ts.clone();
    bad.prompts[1].mlp_activations[8 + 5] = f32::NAN;
    let r = validate_trace_set(&bad);
    assert_eq!(r.issues.len(), 1);
    assert_eq!(r.issues[0].field, "mlp_activations");
    assert!(r.issues[0].description.contains("layer 1, neuron 5"), "{}", r.issues[0].description);

    let mut bad = ts.clone();
    bad.prompts[1].prompt_id = "a".into();
    let r = validate_trace_set(&bad);
    assert_eq!(r.issues[0].field, "prompt_id");

    let mut bad = ts;
    bad.prompts[0].hidden_states.pop();
    let r = validate_trace_set(&bad);
    assert_eq!(r.issues[0].field, "hidden_states");
}
