use spoiler_core::cache::{CacheGeometry, SearchOptions, StrategyRegistry};
use spoiler_core::config::Presets;
use spoiler_core::dram::{double_sided_rowhammer, DramGeometry, FlipModel};
use spoiler_core::experiments::{load_config, ExperimentConfig, ExperimentRegistry};
use spoiler_core::memmap::{AddressSpace, AllocPolicy};
use spoiler_core::mob::Mob;

fn kaby() -> Mob {
    Mob::new(Presets::builtin().microarch("kabylake-r").unwrap().clone())
}

#[test]
fn classic_and_improved_find_the_same_classes() {
    let g = CacheGeometry::default();
    let mut space = AddressSpace::new(1 << 16, 11).unwrap();
    let pool = space.alloc_pages(4096, AllocPolicy::fragmented(11)).unwrap();
    let registry = StrategyRegistry::default();
    let classes = |name: &str| {
        let out = registry.get(name).unwrap().find(&g, &space, &pool, &SearchOptions::default()).unwrap();
        let mut t: Vec<_> = out.base_sets.iter().map(|s| s.oracle_target(&g, &space).unwrap()).collect();
        t.sort_unstable();
        t
    };
    let classic = classes("classic");
    assert_eq!(classic.len(), 128);
    assert_eq!(classic, classes("improved"));
}

#[test]
fn derived_sets_of_a_correct_base_set_are_congruent() {
    let g = CacheGeometry::default();
    let mut space = AddressSpace::new(1 << 16, 3).unwrap();
    let pool = space.alloc_pages(4096, AllocPolicy::fragmented(3)).unwrap();
    let out = StrategyRegistry::default().get("improved").unwrap().find(&g, &space, &pool, &SearchOptions::default()).unwrap();
    for base in out.base_sets.iter().take(8) {
        assert!(base.oracle_target(&g, &space).is_some());
        let derived = base.derived_sets();
        assert_eq!(derived.len(), 63);
        assert!(derived.iter().all(|d| d.oracle_target(&g, &space).is_some()));
    }
}

#[test]
fn flips_land_only_between_the_aggressors() {
    let g = DramGeometry::from_bits(21);
    let mut space = AddressSpace::new(1 << 16, 5).unwrap();
    let buf = space.alloc_pages(4096, AllocPolicy::buddy(5)).unwrap();
    let load = space.alloc_pages(1, AllocPolicy::buddy(6)).unwrap()[0];
    let report = double_sided_rowhammer(&space, &g, &mut kaby(), &buf, load, &FlipModel::default(), 500_000_000).unwrap();
    assert!(!report.flips.is_empty());
    let row = |p: usize| g.row_of(space.translate(buf[p]).unwrap());
    let bank = |p: usize| g.bank_of(space.translate(buf[p]).unwrap());
    let [a, b] = report.aggressors;
    for f in &report.flips {
        assert_eq!(f.bank, bank(a));
        assert_eq!(f.row, row(a).min(row(b)) + 1);
        assert_eq!(f.row, row(report.victim_pages[0]));
    }
}

#[test]
fn summaries_are_byte_identical_for_equal_seeds() {
    let presets = Presets::builtin();
    let registry = ExperimentRegistry::default();
    let cfg = ExperimentConfig { seed: 42, noise_sigma: 10.0, pages: Some(2048), ..Default::default() };
    for name in ["scan", "correlate", "contiguous", "depth"] {
        let a = registry.run(name, &presets, &cfg).unwrap();
        let b = registry.run(name, &presets, &cfg).unwrap();
        assert_eq!(a.summary_json(), b.summary_json(), "{name}");
        assert_eq!(a.artifacts, b.artifacts, "{name}");
    }
}

#[test]
fn config_file_drives_a_run() {
    let (presets, cfg) = load_config(
        r#"
        [microarch.toy]
        name = "toy"
        store_buffer_size = 16
        steps = 8
        base_load_cycles = 30
        store_4k_class_cycles = 100
        load_4k_class_cycles = 200
        plateau_cycles = 300
        peak_cycles = 900
        drain = { add = [16, 400], leal = [16, 800], nop = [16, 1600] }

        [run]
        arch = "toy"
        pages = 1024
        seed = 9
        window = 32
        "#,
    )
    .unwrap();
    let out = ExperimentRegistry::default().run("scan", &presets, &cfg).unwrap();
    let steps = &out.summary["result"]["step_counts"];
    assert_eq!(out.summary["result"]["steps_expected"], 8);
    assert!(steps.as_object().unwrap().keys().all(|k| k == "8"), "{steps}");
}

#[test]
fn noise_sigma_must_be_non_negative() {
    let presets = Presets::builtin();
    let cfg = ExperimentConfig { noise_sigma: -1.0, ..Default::default() };
    let err = ExperimentRegistry::default().run("scan", &presets, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
