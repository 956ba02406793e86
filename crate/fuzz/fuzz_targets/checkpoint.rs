#![no_main]

use landtune::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fn check(bytes: &[u8]) {
    if let Ok(ck) = Checkpoint::from_bytes(bytes) {
        let again = Checkpoint::from_bytes(&ck.to_bytes()).expect("re-encoded checkpoint must decode");
        assert_eq!(again.params.checksum(), ck.params.checksum());
        assert_eq!(again.palette, ck.palette);
    }
}

// Inputs are tried as given and with a recomputed CRC trailer, so mutations
// reach the structural checks behind the checksum.
fuzz_target!(|data: &[u8]| {
    check(data);
    if data.len() > 4 {
        let mut sealed = data[..data.len() - 4].to_vec();
        sealed.extend_from_slice(&crc32fast::hash(&sealed).to_le_bytes());
        check(&sealed);
    }
});
