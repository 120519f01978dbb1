#![no_main]

use budgetformer::data::{parse_jsonl_line, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|line: &str| {
    let vocab = Vocabulary::build(["the quick brown fox", "jumps over the lazy dog"], 32).unwrap();
    if let Ok(ex) = parse_jsonl_line(line, &vocab) {
        assert!(!ex.token_ids.is_empty());
        assert!(ex.token_ids.iter().all(|&id| id < vocab.len()));
    }
});
