#![no_main]

use libfuzzer_sys::fuzz_target;
use vbcalc::fieldexpr::{compile_str, Params, VarLayout};

// Compiled programs may produce NaN or infinity, but never panic: the
// evaluator runs inside every step of every simulation.
fuzz_target!(|input: (&str, [f64; 4])| {
    let (src, slots) = input;
    let layout = VarLayout::base_fiber(2, 2);
    let mut params = Params::new();
    params.insert("c".to_string(), slots[0]);
    let Ok(prog) = compile_str(src, &layout, &params) else {
        return;
    };
    let mut stack = Vec::new();
    let _ = prog.eval(&slots, &mut stack);
});
