#![no_main]

use libfuzzer_sys::fuzz_target;
use nvpf::serialize::ModelManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Manifest parsing must never panic; accepted manifests must
    // round-trip through serialization unchanged.
    if let Ok(manifest) = serde_json::from_str::<ModelManifest>(text) {
        let rendered = serde_json::to_string(&manifest).expect("render manifest");
        let back: ModelManifest =
            serde_json::from_str(&rendered).expect("re-parse of a rendered manifest");
        assert_eq!(back, manifest);
    }
});
