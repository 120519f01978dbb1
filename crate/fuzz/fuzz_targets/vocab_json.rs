#![no_main]

use budgetformer::data::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(vocab) = Vocabulary::from_json(text) {
        let back = Vocabulary::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(back, vocab);
    }
});
