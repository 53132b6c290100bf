#![no_main]

use libfuzzer_sys::fuzz_target;
use nvpf::emonet::EmoNetConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Architecture parsing and the geometry/parameter queries must
    // reject bad configs with errors, never panic or overflow.
    if let Ok(cfg) = serde_json::from_str::<EmoNetConfig>(text) {
        if let Ok(chain) = cfg.shape_chain() {
            assert!(!chain.is_empty());
            let _ = cfg.param_count();
        }
    }
});
