#![no_main]

use libfuzzer_sys::fuzz_target;
use vbcalc::fieldexpr::parse;

// Anything that parses must survive an exact print/reparse round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(expr) = parse(src) else {
        return;
    };
    let printed = expr.print();
    let again = parse(&printed).expect("printed expression must reparse");
    assert_eq!(again, expr, "round trip changed the tree for {src:?}");
});
