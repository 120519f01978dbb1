#![no_main]

use budgetformer::data::tokenize;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for tok in tokenize(text) {
        assert!(!tok.is_empty());
        assert!(!tok.chars().any(char::is_whitespace));
    }
});
