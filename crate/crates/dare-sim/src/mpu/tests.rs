use super::*;
use crate::isa::{CsrConfig, Instruction, InstrKind, MReg};
use crate::kernel::{
    functional_run, gen_sddmm, gen_spmm, InstrRole, KernelProgram, KernelVariant, MemoryImage,
    OutputDesc,
};
use crate::memsys::LlcConfig;
use crate::sparse::{synth_dense, synth_sparse};

fn reg(i: u8) -> MReg {
    MReg::new(i).unwrap()
}

/// Hand-built program wrapper: one data region plus an output region.
fn test_program(instrs: Vec<Instruction>, data_len: usize) -> (KernelProgram, u64) {
    let mut image = MemoryImage::new();
    let data = image.add_region("data", (0..data_len).map(|i| i as u8).collect());
    image.add_region("c", vec![0u8; 64]);
    let roles = vec![InstrRole::Config; instrs.len()];
    (
        KernelProgram {
            instrs,
            roles,
            image,
            output: OutputDesc {
                region: "c".into(),
                rows: 4,
                cols: 4,
                elem_bytes: 4,
            },
            vec_records: Vec::new(),
        },
        data,
    )
}

fn mld(id: u64, dst: u8, base: u64, stride: i64, shape: CsrConfig) -> Instruction {
    Instruction {
        id,
        shape,
        kind: InstrKind::Mld {
            dst: reg(dst),
            base,
            stride,
        },
    }
}

fn mma(id: u64, d: u8, a: u8, b: u8, shape: CsrConfig) -> Instruction {
    Instruction {
        id,
        shape,
        kind: InstrKind::Mma {
            dst: reg(d),
            a: reg(a),
            b: reg(b),
        },
    }
}

fn quiet_config() -> MachineConfig {
    MachineConfig {
        runahead: false,
        ..Default::default()
    }
}

#[test]
fn empty_program_drains_immediately() {
    let (p, _) = test_program(Vec::new(), 64);
    let out = Machine::new(&p, quiet_config()).unwrap().run().unwrap();
    assert_eq!(out.cycles, 0);
    assert_eq!(out.output.len(), 64);
}

/// Data regions start at the image base, so instruction addresses in
/// these tests are `DATA + offset`.
const DATA: u64 = 0x1_0000;

#[test]
fn mld_decomposes_one_row_uop_per_cycle() {
    let shape = CsrConfig::new(16, 64, 16).unwrap();
    let (p, base) = test_program(vec![mld(0, 0, DATA, 64, shape)], 16 * 64);
    assert_eq!(base, DATA);
    let out = Machine::new(&p, quiet_config()).unwrap().run().unwrap();
    // 16 demand uops generated one per cycle; all miss cold.
    assert_eq!(out.ledger.demand_load_requests, 16);
    assert_eq!(out.ledger.demand_load_misses, 16);
    // Last uop generated at cycle ~15; finishes >= 110 later.
    assert!(out.cycles >= 125, "cycles {}", out.cycles);
}

#[test]
fn raw_hazard_blocks_issue_and_two_wide_issue_works() {
    let shape = CsrConfig::new(2, 16, 2).unwrap();
    // 0: mld m0; 1: mma m2 <- m0 (RAW on m0); 2,3: independent mlds.
    let instrs = vec![
        mld(0, 0, DATA, 16, shape),
        mma(1, 2, 0, 1, shape),
        mld(2, 3, DATA + 256, 16, shape),
        mld(3, 4, DATA + 512, 16, shape),
    ];
    let (p, _) = test_program(instrs, 1024);
    let out = Machine::new(&p, quiet_config()).unwrap().run().unwrap();
    let by_id = |id: u64| out.audits.iter().find(|a| a.id == id).unwrap();
    // The mma issued only after the producing mld completed.
    assert!(by_id(1).issue_cycle.unwrap() >= by_id(0).complete_cycle.unwrap());
    // The two independent mlds issued together in one cycle (2-wide).
    assert_eq!(by_id(2).issue_cycle, by_id(3).issue_cycle);
}

#[test]
fn systolic_timing_and_exclusivity() {
    let shape = CsrConfig::new(16, 64, 16).unwrap();
    assert_eq!(systolic_latency(shape), 96);
    assert_eq!(systolic_latency(CsrConfig::new(1, 1, 1).unwrap()), 3);
    // Two back-to-back mmas on disjoint registers still serialize on
    // the single array.
    let s = CsrConfig::new(4, 8, 4).unwrap();
    let instrs = vec![mma(0, 0, 1, 2, s), mma(1, 3, 4, 5, s)];
    let (p, _) = test_program(instrs, 64);
    let out = Machine::new(&p, quiet_config()).unwrap().run().unwrap();
    let a0 = out.audits.iter().find(|a| a.id == 0).unwrap();
    let a1 = out.audits.iter().find(|a| a.id == 1).unwrap();
    assert!(a1.issue_cycle.unwrap() >= a0.complete_cycle.unwrap());
    assert_eq!(
        a0.complete_cycle.unwrap() - a0.issue_cycle.unwrap(),
        systolic_latency(s)
    );
    // PE accounting: m x n active per occupied cycle.
    assert_eq!(out.ledger.active_pe_cycles, 2 * 16 * systolic_latency(s));
}

#[test]
fn riq_capacity_stalls_dispatch_and_unbounded_does_not() {
    let shape = CsrConfig::new(1, 8, 1).unwrap();
    // 40 serialized mlds (all write m0) keep the queue full.
    let instrs: Vec<Instruction> = (0..40)
        .map(|i| mld(i, 0, DATA + (i % 4) * 64, 8, shape))
        .collect();
    let (p, _) = test_program(instrs.clone(), 1024);
    let bounded = Machine::new(
        &p,
        MachineConfig {
            riq_capacity: Some(4),
            runahead: false,
            ..Default::default()
        },
    )
    .unwrap()
    .run()
    .unwrap();
    assert!(bounded.ledger.dispatch_stall_cycles > 0);

    let (p2, _) = test_program(instrs, 1024);
    let unbounded = Machine::new(
        &p2,
        MachineConfig {
            riq_capacity: None,
            runahead: false,
            ..Default::default()
        },
    )
    .unwrap()
    .run()
    .unwrap();
    assert_eq!(unbounded.ledger.dispatch_stall_cycles, 0);
}

/// Builds the staged scenario for the tentative-uop discipline:
/// serializing systolic gates keep the candidate loads (all WAW on the
/// same register) unissued while runahead probes them. Returns the
/// program, the warm-region line addresses (to prewarm), and the
/// warm-targeting / cold-targeting candidate instruction ids.
fn tentative_scenario(
    candidates: usize,
    rows: usize,
) -> (KernelProgram, Vec<u64>, Vec<u64>, Vec<u64>) {
    let shape16 = CsrConfig::new(16, 64, 16).unwrap();
    let shape = CsrConfig::new(rows, 64, 1).unwrap();
    let warm_len = 16 * 64;
    let data_len = warm_len + (candidates + 4) * rows * 64;
    let mut image = MemoryImage::new();
    let base = image.add_region("data", vec![1u8; data_len]);
    image.add_region("c", vec![0u8; 64]);
    let warm_lines: Vec<u64> = (0..16).map(|i| base + i * 64).collect();

    let mut instrs: Vec<Instruction> = Vec::new();
    let push = |kind: InstrKind, shape: CsrConfig, instrs: &mut Vec<Instruction>| {
        instrs.push(Instruction {
            id: instrs.len() as u64,
            shape,
            kind,
        });
    };
    // Gates: three serialized mmas writing m1 (~96 cycles each) so the
    // candidates stay unissued long enough to be probed and decomposed.
    for _ in 0..3 {
        push(
            InstrKind::Mma {
                dst: reg(1),
                a: reg(0),
                b: reg(0),
            },
            shape16,
            &mut instrs,
        );
    }
    // Candidates: all write m1, so they serialize behind the gates and
    // each other. Odd candidates target the warm region (tentative will
    // hit); even candidates target cold, disjoint regions.
    let mut warm_ids = Vec::new();
    let mut cold_ids = Vec::new();
    for c in 0..candidates {
        let b = if c % 2 == 1 {
            base
        } else {
            base + (warm_len + (c + 1) * rows * 64) as u64
        };
        let id = instrs.len() as u64;
        if c % 2 == 1 {
            warm_ids.push(id);
        } else {
            cold_ids.push(id);
        }
        push(
            InstrKind::Mld {
                dst: reg(1),
                base: b,
                stride: 64,
            },
            shape,
            &mut instrs,
        );
    }
    let roles = vec![InstrRole::Config; instrs.len()];
    (
        KernelProgram {
            instrs,
            roles,
            image,
            output: OutputDesc {
                region: "c".into(),
                rows: 4,
                cols: 4,
                elem_bytes: 4,
            },
            vec_records: Vec::new(),
        },
        warm_lines,
        warm_ids,
        cold_ids,
    )
}

#[test]
fn tentative_discipline_suppresses_and_grants() {
    let (p, warm_lines, warm_ids, cold_ids) = tentative_scenario(12, 8);
    let mut m = Machine::new(&p, MachineConfig::default()).unwrap();
    // Converged bimodal history (threshold 56) over a warm cache.
    let samples: Vec<u64> = (0..16).flat_map(|_| [20u64, 110]).collect();
    m.pretrain_classifier(&samples);
    m.prewarm_lines(&warm_lines);
    let out = m.run().unwrap();

    for a in &out.audits {
        // Universal discipline: a never-granted non-chain instruction
        // sends at most one runahead uop; nobody exceeds matrixM.
        if !a.granted && !a.chain_producer {
            assert!(a.runahead_uops <= 1, "{a:?}");
        }
        assert!(a.runahead_uops <= a.matrix_m);
    }
    for id in &warm_ids {
        let a = out.audits.iter().find(|a| a.id == *id).unwrap();
        assert!(!a.granted, "warm candidate {id} must stay ungranted");
        assert_eq!(a.runahead_uops, 1, "exactly the tentative probe");
    }
    for id in &cold_ids {
        let a = out.audits.iter().find(|a| a.id == *id).unwrap();
        assert!(a.granted, "cold candidate {id} must be granted");
        assert_eq!(a.runahead_uops, a.matrix_m, "full decomposition");
        assert_eq!(a.runahead_lines, a.matrix_m, "one aligned line per row");
    }
}

#[test]
fn rfu_off_grants_everything() {
    let (p, warm_lines, warm_ids, _) = tentative_scenario(8, 4);
    let mut m = Machine::new(
        &p,
        MachineConfig {
            rfu: RfuMode::Off,
            riq_capacity: None,
            vmr_entries: None,
            prefetch_occupies_lq: false,
            ..Default::default()
        },
    )
    .unwrap();
    m.prewarm_lines(&warm_lines);
    let out = m.run().unwrap();
    for id in &warm_ids {
        let a = out.audits.iter().find(|a| a.id == *id).unwrap();
        // No filtering: warm candidates decompose fully too.
        assert!(a.runahead_uops > 1, "{a:?}");
    }
}

#[test]
fn static_threshold_collapses_when_hits_exceed_it() {
    // With hit latency 80 > static threshold 64, every tentative is
    // "classified" a miss, so nothing gets suppressed.
    let (p, warm_lines, warm_ids, _) = tentative_scenario(8, 4);
    let mut m = Machine::new(
        &p,
        MachineConfig {
            rfu: RfuMode::Static(64),
            llc: LlcConfig {
                hit_latency: 80,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    m.prewarm_lines(&warm_lines);
    let out = m.run().unwrap();
    for id in &warm_ids {
        let a = out.audits.iter().find(|a| a.id == *id).unwrap();
        assert!(a.granted, "static filter must grant warm candidate {id}");
    }
    assert_eq!(
        out.ledger.runahead_instr_probed,
        out.ledger.runahead_instr_granted
    );
}

#[test]
fn dmu_chain_wakes_producer_into_vmr() {
    // gates: five serialized systolic mmas writing m6 (~480 cycles of
    // stall window that runahead cannot shorten)
    // producer: mld m6 <- base-vector record (WAW behind the gates)
    // consumer: mgather m0, (m6) (RAW behind the producer)
    //
    // The window covers the chain loads, the consumer's tentative round
    // trip, and the granted decomposition before the gather issues.
    let vec_shape = CsrConfig::new(8, 6, 1).unwrap();
    let gather_shape = CsrConfig::new(8, 64, 1).unwrap();
    let gate_shape = CsrConfig::new(16, 64, 16).unwrap();

    let mut image = MemoryImage::new();
    let data = image.add_region("data", vec![3u8; 64 * 64]);
    // Eight 48-bit lanes pointing at spread-out rows of the data region.
    let lanes: Vec<u64> = (0..8).map(|i| data + i * 7 * 64).collect();
    let mut rec = [0u8; 48];
    for (i, &l) in lanes.iter().enumerate() {
        rec[i * 6..i * 6 + 6].copy_from_slice(&l.to_le_bytes()[..6]);
    }
    let vec_base = image.add_region("vecs", rec.to_vec());
    image.add_region("c", vec![0u8; 64]);

    let mut instrs: Vec<Instruction> = (0..5).map(|i| mma(i, 6, 4, 5, gate_shape)).collect();
    instrs.push(mld(5, 6, vec_base, 6, vec_shape));
    instrs.push(Instruction {
        id: 6,
        shape: gather_shape,
        kind: InstrKind::Mgather {
            dst: reg(0),
            addr: reg(6),
        },
    });
    let roles = vec![InstrRole::Config; instrs.len()];
    let p = KernelProgram {
        instrs,
        roles,
        image,
        output: OutputDesc {
            region: "c".into(),
            rows: 4,
            cols: 4,
            elem_bytes: 4,
        },
        vec_records: vec![vec_base],
    };

    // Dispatch the whole chain in one cycle so the DMU marks the
    // producer before the first runahead probe reaches it.
    let out = Machine::new(
        &p,
        MachineConfig {
            dispatch_width: 8,
            ..Default::default()
        },
    )
    .unwrap()
    .run()
    .unwrap();
    let producer = out.audits.iter().find(|a| a.id == 5).unwrap();
    let consumer = out.audits.iter().find(|a| a.id == 6).unwrap();
    assert!(producer.chain_producer);
    assert!(producer.granted, "chain members are force-granted");
    assert_eq!(producer.runahead_uops, 8, "all vector lanes chain-loaded");
    assert_eq!(out.ledger.chain_uops_sent, 8);
    // The consumer prefetched all its rows through the VMR lanes:
    // tentative first, then the granted remainder.
    assert_eq!(consumer.runahead_uops, 8);
    assert!(consumer.granted);
    assert!(out.ledger.prefetch_requests >= 8);
    // Architectural result matches the functional executor.
    assert_eq!(out.output, functional_run(&p).unwrap());
}

#[test]
fn gather_with_completed_producer_uses_architectural_register() {
    // Producer completes long before the gather is probed, so no chain
    // (and no VMR traffic) is needed.
    let vec_shape = CsrConfig::new(4, 6, 1).unwrap();
    let gather_shape = CsrConfig::new(4, 64, 1).unwrap();
    let mut image = MemoryImage::new();
    let data = image.add_region("data", vec![5u8; 64 * 40]);
    let lanes: Vec<u64> = (0..4).map(|i| data + i * 9 * 64).collect();
    let mut rec = [0u8; 24];
    for (i, &l) in lanes.iter().enumerate() {
        rec[i * 6..i * 6 + 6].copy_from_slice(&l.to_le_bytes()[..6]);
    }
    let vec_base = image.add_region("vecs", rec.to_vec());
    image.add_region("c", vec![0u8; 64]);
    let instrs = vec![
        mld(0, 6, vec_base, 6, vec_shape),
        // Spacer so the gather arrives with its producer long completed.
        mma(1, 1, 2, 3, CsrConfig::new(16, 64, 16).unwrap()),
        mma(2, 1, 1, 3, CsrConfig::new(16, 64, 16).unwrap()),
        Instruction {
            id: 3,
            shape: gather_shape,
            kind: InstrKind::Mgather {
                dst: reg(0),
                addr: reg(6),
            },
        },
    ];
    let roles = vec![InstrRole::Config; instrs.len()];
    let p = KernelProgram {
        instrs,
        roles,
        image,
        output: OutputDesc {
            region: "c".into(),
            rows: 4,
            cols: 4,
            elem_bytes: 4,
        },
        vec_records: vec![vec_base],
    };
    let out = Machine::new(&p, MachineConfig::default())
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(out.ledger.chain_uops_sent, 0);
    assert_eq!(out.output, functional_run(&p).unwrap());
}

fn variant_configs() -> Vec<(&'static str, MachineConfig)> {
    vec![
        (
            "no-runahead",
            MachineConfig {
                runahead: false,
                ..Default::default()
            },
        ),
        ("filtered-runahead", MachineConfig::default()),
        (
            "unfiltered-unbounded",
            MachineConfig {
                riq_capacity: None,
                vmr_entries: None,
                rfu: RfuMode::Off,
                prefetch_occupies_lq: false,
                ..Default::default()
            },
        ),
        (
            "oracle-cache",
            MachineConfig {
                runahead: false,
                oracle_cache: true,
                ..Default::default()
            },
        ),
        (
            "tiny-llc",
            MachineConfig {
                llc: LlcConfig {
                    capacity_bytes: 16 * 1024,
                    ..Default::default()
                },
                ..Default::default()
            },
        ),
        (
            "vmr-starved",
            MachineConfig {
                vmr_entries: Some(1),
                ..Default::default()
            },
        ),
        (
            "static-rfu",
            MachineConfig {
                rfu: RfuMode::Static(64),
                ..Default::default()
            },
        ),
    ]
}

#[test]
fn architectural_equivalence_across_configurations() {
    let mask = synth_sparse(48, 48, 0.92, 21).unwrap();
    let a = synth_dense(48, 32, 22);
    let b = synth_dense(32, 48, 23);
    let s = synth_sparse(48, 40, 0.93, 24).unwrap();
    let bs = synth_dense(40, 24, 25);
    let caps = CsrConfig::default();
    let programs = vec![
        gen_sddmm(&mask, &a, &b, 32, KernelVariant::Baseline, caps).unwrap(),
        gen_sddmm(&mask, &a, &b, 32, KernelVariant::Gsa, caps).unwrap(),
        gen_spmm(&s, &bs, 24, KernelVariant::Baseline, caps).unwrap(),
        gen_spmm(&s, &bs, 24, KernelVariant::Gsa, caps).unwrap(),
    ];
    for (pi, p) in programs.iter().enumerate() {
        let golden = functional_run(p).unwrap();
        for (name, cfg) in variant_configs() {
            let out = Machine::new(p, cfg).unwrap().run().unwrap();
            assert_eq!(
                out.output, golden,
                "program {pi} under {name} diverges from functional result"
            );
        }
    }
}

#[test]
fn deterministic_cycles_and_ledger() {
    let mask = synth_sparse(32, 32, 0.9, 5).unwrap();
    let a = synth_dense(32, 32, 6);
    let b = synth_dense(32, 32, 7);
    let p = gen_sddmm(&mask, &a, &b, 32, KernelVariant::Gsa, CsrConfig::default()).unwrap();
    let r1 = Machine::new(&p, MachineConfig::default())
        .unwrap()
        .run()
        .unwrap();
    let r2 = Machine::new(&p, MachineConfig::default())
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(r1.cycles, r2.cycles);
    assert_eq!(r1.ledger, r2.ledger);
    assert_eq!(r1.output, r2.output);
}

#[test]
fn oracle_cache_eliminates_misses() {
    let mask = synth_sparse(32, 32, 0.9, 31).unwrap();
    let a = synth_dense(32, 32, 32);
    let b = synth_dense(32, 32, 33);
    let p = gen_sddmm(&mask, &a, &b, 32, KernelVariant::Baseline, CsrConfig::default()).unwrap();
    let out = Machine::new(
        &p,
        MachineConfig {
            runahead: false,
            oracle_cache: true,
            ..Default::default()
        },
    )
    .unwrap()
    .run()
    .unwrap();
    assert_eq!(out.ledger.misses(), 0);
}

/// Order-replay oracle: re-derives issue legality from the audit trace.
/// For every pair of register-conflicting instructions, the younger must
/// not have issued before the older completed.
fn assert_hazard_order(audits: &[InstrAudit]) {
    for i in 0..audits.len() {
        for j in (i + 1)..audits.len() {
            let (o, y) = if audits[i].id < audits[j].id {
                (&audits[i], &audits[j])
            } else {
                (&audits[j], &audits[i])
            };
            let raw = y.reads & o.writes != 0;
            let waw = y.writes & o.writes != 0;
            let war = y.writes & o.reads != 0;
            if raw || waw || war {
                let (Some(yi), Some(oc)) = (y.issue_cycle, o.complete_cycle) else {
                    panic!("missing cycles in audit");
                };
                assert!(
                    yi >= oc,
                    "instruction {} issued at {} before conflicting {} completed at {}",
                    y.id,
                    yi,
                    o.id,
                    oc
                );
            }
        }
    }
}

#[test]
fn scoreboard_soundness_replay_on_random_programs() {
    use rand::{Rng, SeedableRng};
    for seed in 0..8u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = CsrConfig::new(2, 32, 2).unwrap();
        let mut instrs = Vec::new();
        for id in 0..24u64 {
            let kind = match rng.gen_range(0..4) {
                0 | 1 => InstrKind::Mld {
                    dst: reg(rng.gen_range(0..8)),
                    base: DATA + rng.gen_range(0..8u64) * 128,
                    stride: 64,
                },
                2 => InstrKind::Mma {
                    dst: reg(rng.gen_range(0..8)),
                    a: reg(rng.gen_range(0..8)),
                    b: reg(rng.gen_range(0..8)),
                },
                _ => InstrKind::Mst {
                    src: reg(rng.gen_range(0..8)),
                    base: DATA + 2048 + rng.gen_range(0..8u64) * 128,
                    stride: 64,
                },
            };
            instrs.push(Instruction { id, shape, kind });
        }
        let (p, _) = test_program(instrs, 4096);
        let out = Machine::new(&p, MachineConfig::default())
            .unwrap()
            .run()
            .unwrap();
        assert_hazard_order(&out.audits);
        // Program-order retirement.
        let ids: Vec<u64> = out.audits.iter().map(|a| a.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn store_load_through_memory_is_ordered() {
    // mld m0 <- data; mst m0 -> c; mld m1 <- c: the final load must see
    // the stored bytes under every configuration.
    let shape = CsrConfig::new(1, 16, 1).unwrap();
    let mut image = MemoryImage::new();
    let data = image.add_region("data", (0..64).map(|i| (i * 3) as u8).collect());
    let c = image.add_region("c", vec![0u8; 64]);
    let instrs = vec![
        mld(0, 0, data, 16, shape),
        Instruction {
            id: 1,
            shape,
            kind: InstrKind::Mst {
                src: reg(0),
                base: c,
                stride: 16,
            },
        },
        mld(2, 1, c, 16, shape),
    ];
    let roles = vec![InstrRole::Config; instrs.len()];
    let p = KernelProgram {
        instrs,
        roles,
        image,
        output: OutputDesc {
            region: "c".into(),
            rows: 1,
            cols: 4,
            elem_bytes: 4,
        },
        vec_records: Vec::new(),
    };
    let golden = functional_run(&p).unwrap();
    for (name, cfg) in variant_configs() {
        let out = Machine::new(&p, cfg).unwrap().run().unwrap();
        assert_eq!(out.output, golden, "under {name}");
        assert_eq!(
            &out.output[..16],
            &(0..16).map(|i| (i * 3) as u8).collect::<Vec<_>>()[..]
        );
    }
}

#[test]
fn snapshot_serializes_machine_state() {
    let (p, _) = test_program(
        vec![mld(0, 0, 0, 64, CsrConfig::new(4, 64, 1).unwrap())],
        512,
    );
    let mut m = Machine::new(&p, MachineConfig::default()).unwrap();
    for _ in 0..3 {
        m.step().unwrap();
    }
    let snap = m.snapshot();
    assert!(snap["cycle"].is_number());
    assert!(snap["riq"].is_array());
    assert!(snap["vmr_free"].is_number());
    assert!(snap["classifier"]["threshold"].is_null());
}

