use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One performed access. `order` is the global position at which the value
/// was read from (or written to) a coherent copy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Access {
    pub order: u64,
    pub core: u32,
    pub addr: u64,
    pub write: bool,
    pub bytes: Vec<u8>,
}

/// Replay `log` in global order against a flat memory holding `initial`:
/// every read must return the most recent write to each byte.
pub fn check_access_log(initial: &[(u64, Vec<u8>)], log: &[Access]) -> Result<(), String> {
    let mut mem: HashMap<u64, u8> = HashMap::new();
    for (a, bytes) in initial {
        for (i, b) in bytes.iter().enumerate() {
            mem.insert(a + i as u64, *b);
        }
    }
    let mut idx: Vec<usize> = (0..log.len()).collect();
    idx.sort_by_key(|&i| log[i].order);
    for i in idx {
        let e = &log[i];
        for (j, b) in e.bytes.iter().enumerate() {
            let a = e.addr + j as u64;
            if e.write {
                mem.insert(a, *b);
            } else {
                let want = mem.get(&a).copied().unwrap_or(0);
                if want != *b {
                    return Err(format!(
                        "core {} read {:#x} = {:#04x} at order {}, expected {:#04x}",
                        e.core, a, b, e.order, want
                    ));
                }
            }
        }
    }
    Ok(())
}
