#![no_main]

use fedsig_core::dataset::{parse_svc_file, preprocess, to_svc_text, Label};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(sig) = parse_svc_file(data, Label::Genuine, 1, 1) else {
        return;
    };
    // Whatever parses must survive a write/read cycle unchanged.
    let text = to_svc_text(&sig);
    let again = parse_svc_file(text.as_bytes(), Label::Genuine, 1, 1).expect("own output parses");
    assert_eq!(sig, again);

    // Degenerate strokes (a single repeated point, huge coordinates) must
    // still normalize to finite values or fail cleanly.
    if let Ok(p) = preprocess(&sig, sig.points.len().max(8)) {
        assert!(p.channels.data().iter().all(|v| v.is_finite()));
    }
});
