#![no_main]

use libfuzzer_sys::fuzz_target;
use vbcalc::geometry::scenes::SceneConfig;

// A scene description from disk must either build or come back as a
// config error; no input may panic the decoder.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = toml::from_str::<SceneConfig>(text) else {
        return;
    };
    let _ = cfg.build();
});
