#![no_main]

use landtune::synth::{raster_from_bytes, raster_to_bytes};
use libfuzzer_sys::fuzz_target;

fn check(bytes: &[u8]) {
    if let Ok(scene) = raster_from_bytes(bytes) {
        let back = raster_from_bytes(&raster_to_bytes(&scene)).expect("re-encoded raster must decode");
        assert_eq!(back.image, scene.image);
        assert_eq!(back.labels, scene.labels);
    }
}

// Tried as given and with a recomputed CRC trailer.
fuzz_target!(|data: &[u8]| {
    check(data);
    if data.len() > 4 {
        let mut sealed = data[..data.len() - 4].to_vec();
        sealed.extend_from_slice(&crc32fast::hash(&sealed).to_le_bytes());
        check(&sealed);
    }
});
