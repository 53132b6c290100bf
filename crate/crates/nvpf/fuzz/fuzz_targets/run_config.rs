#![no_main]

use libfuzzer_sys::fuzz_target;
use nvpf::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Config parsing and validation must classify any input as ok or
    // an error, never panic.
    if let Ok(cfg) = serde_json::from_str::<RunConfig>(text) {
        let _ = cfg.validate();
        let _ = serde_json::to_string(&cfg.manifest_form());
    }
});
