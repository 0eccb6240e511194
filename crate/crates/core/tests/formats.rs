use inloc_core::checkpoint;
use inloc_core::dataio::{load_dataset, parse_fingerprints, save_dataset, write_fingerprints};
use inloc_core::experiments::pretrained;
use inloc_core::incremental::AdaptationConfig;
use inloc_core::simgen::{
    generate_scenario, load_scenario, save_scenario, Preset, ScenarioConfig, SplitKind,
};
use inloc_core::{DomainKey, Error};

fn scenario() -> inloc_core::simgen::Scenario {
    let mut cfg = ScenarioConfig::new(4, Preset::Toy).with_samples_per_rp(2);
    cfg.n_epochs = 2;
    cfg.roster.truncate(2);
    generate_scenario(&cfg).unwrap()
}

#[test]
fn hundred_record_dataset_round_trips_exactly() {
    let sc = scenario();
    let mut ds = sc.dataset(SplitKind::Test);
    ds.records.extend(sc.dataset(SplitKind::Adapt).records);
    assert!(ds.len() >= 100);
    let dir = tempfile::tempdir().unwrap();
    let (fp, coords) = (dir.path().join("fp.csv"), dir.path().join("coords.csv"));
    save_dataset(&fp, &coords, &ds, &sc.coordinates()).unwrap();
    let (back, table) = load_dataset(&fp, &coords).unwrap();
    assert_eq!(back, ds);
    assert_eq!(table, sc.coordinates());
    assert!(back.records.iter().any(|r| r.rp.is_none()));
    assert!(back.records.iter().any(|r| r.rp.is_some()));
}

#[test]
fn cut_files_name_the_cut_line() {
    let text = write_fingerprints(&scenario().dataset(SplitKind::Train));
    let n_lines = text.lines().count();
    let last_start = text[..text.len() - 1].rfind('\n').unwrap() + 1;
    for cut in [
        last_start + 1,
        last_start + 7,
        (last_start + text.len()) / 2,
        text.len() - 1,
    ] {
        match parse_fingerprints(&text[..cut]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, n_lines, "cut at byte {cut}"),
            other => panic!("cut at byte {cut}: expected a parse error, got {other:?}"),
        }
    }
}

#[test]
fn scenario_directory_and_checkpoint_survive_a_reload() {
    let sc = scenario();
    let dir = tempfile::tempdir().unwrap();
    save_scenario(dir.path(), &sc).unwrap();
    let back = load_scenario(dir.path()).unwrap();
    assert_eq!(back.splits, sc.splits);
    assert_eq!(back.layout.coordinates(), sc.coordinates());

    let cfg = AdaptationConfig {
        pretrain_epochs: 3,
        ..AdaptationConfig::default()
    };
    let learner = pretrained(&back, &cfg).unwrap();
    let path = dir.path().join("model.json");
    checkpoint::save(&learner, &path).unwrap();
    let reloaded = checkpoint::load(&path).unwrap();
    assert_eq!(reloaded, learner);
    let key = DomainKey::new("BLU", 0);
    assert_eq!(reloaded.noise.get(&key), learner.noise.get(&key));
}
