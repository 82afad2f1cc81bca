#![no_main]

use fedsig_core::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(params) = decode(data) else {
        return;
    };
    // The JSON header may be spelled differently, but one encode makes it
    // canonical and the parameters keep their exact bits (NaN payloads too).
    let canonical = encode(&params);
    let again = decode(&canonical).expect("own output decodes");
    assert_eq!(encode(&again), canonical);
    let bits = |p: &fedsig_core::ModelParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&params), bits(&again));
    assert_eq!(params.config(), again.config());
});
