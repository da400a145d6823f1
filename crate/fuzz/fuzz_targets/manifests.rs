#![no_main]

use gastro_core::camera::CameraIntrinsics;
use gastro_core::io::{CamerasManifest, ReconstructionFile, TextureTable};
use gastro_core::preprocess::PreprocessManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<CamerasManifest>(data) {
        let _ = m.validate();
    }
    if let Ok(r) = serde_json::from_slice::<ReconstructionFile>(data) {
        let _ = r.to_reconstruction();
    }
    if let Ok(i) = serde_json::from_slice::<CameraIntrinsics>(data) {
        let _ = i.validate();
    }
    let _ = serde_json::from_slice::<TextureTable>(data);
    let _ = serde_json::from_slice::<PreprocessManifest>(data);
});
