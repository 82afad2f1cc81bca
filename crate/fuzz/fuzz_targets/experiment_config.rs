#![no_main]

use fedsig_harness::{parse_config, ExperimentKind, Preset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let kind = ExperimentKind::ALL[selector as usize % ExperimentKind::ALL.len()];
    let preset = (selector & 0x80 != 0).then_some(Preset::Desk);
    if let Ok(cfg) = parse_config(kind, preset, text) {
        assert_eq!(cfg.kind, kind);
        cfg.validate().expect("parse_config only returns valid configs");
        // The echo written to summary.json must load back to the same config.
        let echo = serde_json::to_string(&cfg).expect("config serializes");
        let back = parse_config(kind, None, &echo).expect("echo parses");
        assert_eq!(serde_json::to_value(&back).unwrap(), serde_json::to_value(&cfg).unwrap());
    }
});
