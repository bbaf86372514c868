//! Fixtures shared by unit tests.

use proptest::prelude::*;

use crate::profile::tests::{table_profile, table_rows, MIB};
use crate::profile::{LayerKind, ModelProfile, OperatorProfile};

/// Block checkpoint followed by the four tensors of the comparison table.
pub fn five_op(budget: u64) -> ModelProfile {
    let mut ops = vec![OperatorProfile {
        id: 1,
        name: "block_input".into(),
        kind: LayerKind::Other,
        mem_bytes: 8 * MIB,
        compute_time: 0.10,
        compress_time: 0.03,
        decompress_time: 0.03,
        compression_rate: 0.25,
    }];
    ops.extend(table_rows().into_iter().map(|mut op| {
        op.id += 1;
        op
    }));
    ModelProfile { mem_budget_bytes: budget, operators: ops, ..table_profile() }
}

/// Small random blocks with budgets ranging from infeasible to loose.
pub fn random_profile() -> impl Strategy<Value = ModelProfile> {
    let op = (1u64..200, 0u32..100, 0u32..100, 1u32..=100);
    (proptest::collection::vec(op, 1..=9), 1u32..4, 0u64..200, 0u64..1000).prop_map(|(ops, layers, stat, slack)| {
        let operators: Vec<OperatorProfile> = ops
            .into_iter()
            .enumerate()
            .map(|(i, (mem, t, c, rate))| OperatorProfile {
                id: i as u32 + 1,
                name: format!("op{}", i + 1),
                kind: LayerKind::Other,
                mem_bytes: mem * 1000,
                compute_time: t as f64 / 100.0,
                compress_time: c as f64 / 200.0,
                decompress_time: c as f64 / 200.0,
                compression_rate: rate as f64 / 100.0,
            })
            .collect();
        let full: u64 = operators.iter().map(|o| o.mem_bytes).sum::<u64>() * layers as u64;
        ModelProfile {
            n_layers: layers,
            static_mem_bytes: stat * 1000,
            mem_budget_bytes: stat * 1000 + 1 + full * slack / 1000,
            reference_batch: 1,
            base_step_time: 10.0,
            operators,
        }
    })
}
