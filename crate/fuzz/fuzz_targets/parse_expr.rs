#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let dims = dualgeo::Dims::new(3, 2);
    if let Ok(expr) = dualgeo::parse_expr(text, dims) {
        // The canonical print must reparse to the identical tree.
        let printed = expr.print();
        let reparsed = dualgeo::parse_expr(&printed, dims).expect("canonical print must parse");
        assert_eq!(expr, reparsed);
        // Evaluation must never panic; domain errors are expected outcomes.
        let pt = dualgeo::Point::new(vec![0.3, -0.7, 0.9], vec![0.5, 1.1]);
        let _ = dualgeo::eval_jet(&expr, &pt, 3);
    }
});
