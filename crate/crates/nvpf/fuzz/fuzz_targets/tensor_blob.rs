#![no_main]

use libfuzzer_sys::fuzz_target;
use nvpf::tensor::Tensor;

fuzz_target!(|data: &[u8]| {
    // Parsing must never panic, and any accepted blob must survive a
    // render/re-parse round trip with identical shape and bit-identical
    // payload.
    if let Ok(tensor) = Tensor::parse_blob(data) {
        let rendered = tensor.to_blob();
        let back = Tensor::parse_blob(&rendered).expect("re-parse of a rendered blob");
        assert_eq!(back.shape(), tensor.shape());
        assert!(back
            .data()
            .iter()
            .zip(tensor.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
