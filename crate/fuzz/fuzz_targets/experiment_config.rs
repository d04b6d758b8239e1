#![no_main]

use libfuzzer_sys::fuzz_target;
use vbcalc::harness::parse_config;

// Full experiment configs, both formats: the first byte picks TOML or
// JSON, the rest is the document. Parsing, preparation, and the config
// hash must all be total.
fuzz_target!(|data: &[u8]| {
    let Some((&sel, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let Ok(cfg) = parse_config(text, sel & 1 == 1) else {
        return;
    };
    let _ = cfg.prepare();
    let _ = cfg.hash();
});
