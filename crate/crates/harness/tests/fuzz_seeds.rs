// Replays the checked-in config fuzz seeds; see fuzz/fuzz_targets/experiment_config.rs.

use std::path::PathBuf;

use fedsig_harness::{parse_config, ExperimentKind, Preset};

#[test]
fn config_seeds() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/experiment_config");
    let mut accepted = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        let Some((&selector, rest)) = bytes.split_first() else { continue };
        let Ok(text) = std::str::from_utf8(rest) else { continue };
        let kind = ExperimentKind::ALL[selector as usize % ExperimentKind::ALL.len()];
        let preset = (selector & 0x80 != 0).then_some(Preset::Desk);
        let Ok(cfg) = parse_config(kind, preset, text) else { continue };
        accepted += 1;
        let echo = serde_json::to_string(&cfg).unwrap();
        let back = parse_config(kind, None, &echo).unwrap();
        assert_eq!(
            serde_json::to_value(&back).unwrap(),
            serde_json::to_value(&cfg).unwrap(),
            "{}",
            path.display()
        );
    }
    assert!(accepted >= 5, "only {accepted} seeds parsed");
}
