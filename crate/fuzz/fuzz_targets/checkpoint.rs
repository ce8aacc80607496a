#![no_main]

use lataug::io::{Checkpoint, ModelKind};
use lataug::pipeline::UnifiedModel;
use lataug::stage1::AaeModel;
use lataug::stage2::LinearDynamicsModel;
use lataug::stage3::CganModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(c) = Checkpoint::from_bytes(data) else { return };
    // whatever parses must re-encode to something that parses the same way
    let again = Checkpoint::from_bytes(&c.to_bytes()).expect("re-encoded checkpoint");
    assert_eq!(again.to_bytes(), c.to_bytes());
    match c.kind {
        ModelKind::Aae => drop(AaeModel::from_checkpoint(&c)),
        ModelKind::Dynamics => drop(LinearDynamicsModel::from_checkpoint(&c)),
        ModelKind::Cgan => drop(CganModel::from_checkpoint(&c)),
        ModelKind::Unified => drop(UnifiedModel::from_checkpoint(&c)),
    }
});
