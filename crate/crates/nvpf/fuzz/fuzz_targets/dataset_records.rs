#![no_main]

use libfuzzer_sys::fuzz_target;
use nvpf::data::parse_dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Parsing plus validation must never panic; accepted datasets must
    // survive a write/read round trip unchanged.
    if let Ok(records) = parse_dataset(text, "fuzz") {
        let mut rendered = String::new();
        for record in &records {
            rendered.push_str(&serde_json::to_string(record).expect("render record"));
            rendered.push('\n');
        }
        let back = parse_dataset(&rendered, "fuzz").expect("re-parse of rendered records");
        assert_eq!(back, records);
    }
});
