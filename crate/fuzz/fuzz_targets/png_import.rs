#![no_main]

use landtune::synth::import_png;
use libfuzzer_sys::fuzz_target;

// One PNG serves as color, near-infrared and label image at once.
fuzz_target!(|data: &[u8]| {
    if let Ok(scene) = import_png(data, data, Some(data)) {
        assert_eq!(scene.image.shape()[0], 4);
        assert_eq!(
            scene.labels.as_ref().map(|l| l.len()),
            Some(scene.rows() * scene.cols())
        );
    }
});
