#![no_main]

use budgetformer::model::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint::decode(data) {
        // anything that decodes must survive a second round trip bitwise
        let bytes = checkpoint::encode(&model).unwrap();
        let again = checkpoint::decode(&bytes).unwrap();
        assert_eq!(checkpoint::encode(&again).unwrap(), bytes);
    }
});
