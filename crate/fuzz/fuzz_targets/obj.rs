#![no_main]

use gastro_core::io::read_obj;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(obj) = read_obj(text) {
        let n = obj.positions.len() as u32;
        assert!(obj.faces.iter().flatten().all(|c| c.position < n));
    }
});
