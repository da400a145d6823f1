#![no_main]

use gastro_core::features::{decode_features, encode_features};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_features(data) {
        assert_eq!(set.keypoints.len(), set.descriptors.len());
        let again = decode_features(&encode_features(&set)).expect("own output decodes");
        assert_eq!(again.len(), set.len());
    }
});
