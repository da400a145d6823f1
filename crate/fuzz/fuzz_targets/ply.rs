#![no_main]

use gastro_core::io::{read_ply, write_ply};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ply) = read_ply(data) {
        // Anything accepted must survive a write/read cycle.
        let bytes = write_ply(&ply).expect("accepted data re-encodes");
        let again = read_ply(&bytes).expect("own output parses");
        assert_eq!(again.faces, ply.faces);
        assert_eq!(again.vertices.len(), ply.vertices.len());
    }
});
