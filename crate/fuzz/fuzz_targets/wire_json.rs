#![no_main]

use landtune_server::wire::{decode, AddClassRequest, CreateSessionRequest, LabelsRequest, PredictRequest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode::<CreateSessionRequest>(data);
    let _ = decode::<PredictRequest>(data);
    if let Ok(req) = decode::<LabelsRequest>(data) {
        assert_eq!(req.points().len(), req.points.len());
    }
    if let Ok(req) = decode::<AddClassRequest>(data) {
        let _ = req.color();
    }
});
