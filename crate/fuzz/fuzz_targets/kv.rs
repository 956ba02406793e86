#![no_main]

use landtune::kv::KvDoc;
use landtune::model::spec_from_kv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = KvDoc::parse(text) {
        assert_eq!(
            KvDoc::parse(&doc.to_string()).expect("printed document must parse"),
            doc
        );
        let _ = spec_from_kv(&doc);
    }
});
