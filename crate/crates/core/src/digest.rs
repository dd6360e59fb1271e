use sha2::{Digest, Sha256};

use crate::panel::Panel;

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Content digest of a panel: labels, outcomes (bitwise) and treatment.
pub fn panel_digest(panel: &Panel) -> String {
    let mut h = Sha256::new();
    for u in panel.unit_ids() {
        h.update(u.as_bytes());
        h.update([0u8]);
    }
    h.update([1u8]);
    for p in panel.period_ids() {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    for v in panel.outcomes().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    if let Some(starts) = panel.treatment_starts() {
        for s in starts {
            let code = s.map_or(u64::MAX, |x| x as u64);
            h.update(code.to_le_bytes());
        }
    }
    h.finalize()[..16]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
