#![no_main]

use lataug::kv::KvDoc;
use lataug_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = KvDoc::parse(text);
    if let Ok(cfg) = RunConfig::parse(text) {
        let echoed = RunConfig::parse(&cfg.to_kv()).expect("resolved config reparses");
        assert_eq!(echoed, cfg);
    }
});
