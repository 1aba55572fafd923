#![no_main]

use std::path::Path;

use delay_lqr::ProblemConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ProblemConfig::from_json(text) else {
        return;
    };
    // Validation must reject or accept, never panic.
    if let Ok(problem) = cfg.validate(Path::new(".")) {
        let again = problem.to_config();
        let json = serde_json::to_string(&again).unwrap();
        ProblemConfig::from_json(&json).expect("canonical form reparses");
    }
});
