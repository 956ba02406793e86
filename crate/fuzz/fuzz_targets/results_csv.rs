#![no_main]

use landtune::harness::{read_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_csv(data) {
        let mut out = Vec::new();
        write_csv(&rows, &mut out).expect("writing to memory cannot fail");
        let back = read_csv(out.as_slice()).expect("written csv must parse");
        assert_eq!(back.len(), rows.len());
    }
});
