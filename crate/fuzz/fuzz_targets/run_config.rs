#![no_main]

use budgetformer::run::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let _ = cfg.validate();
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(again.to_toml().unwrap(), text);
    }
});
