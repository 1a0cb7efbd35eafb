//! Fixtures shared by the benchmarks.

use mxlstm::data::{extract_windows, generate_synthetic, SyntheticKind, SyntheticParams};
use mxlstm::{RngState, Window};

/// A crossing scene cut at the standard 8 + 12 protocol.
pub fn crossing_window(agents: usize, seed: u64) -> Window {
    let params = SyntheticParams {
        agents,
        frames: 20,
        area: 6.0,
        ..SyntheticParams::default()
    };
    let scene = generate_synthetic(SyntheticKind::Crossing, &params, &mut RngState::new(seed)).expect("valid params");
    extract_windows(&scene, 8, 12, 1)
        .expect("valid lengths")
        .into_iter()
        .next()
        .expect("every walker spans the scene")
}
