mod common;

use ppm_harness::experiment::Stat;
use ppm_harness::{run_ablation, ExperimentConfig, Variant, Workbench};

#[test]
fn zeroed_plugin_makes_frozen_and_finetune_agree() {
    let bench = Workbench::prepare(&common::tiny_config(), 1).unwrap();
    let cell = |v| ExperimentConfig { ablate_plugin: true, ..ExperimentConfig::new(v) };
    let frozen = bench.run(&cell(Variant::PpmFrozen)).unwrap();
    let tuned = bench.run(&cell(Variant::PpmFinetune)).unwrap();
    let random = bench.run(&cell(Variant::PpmRandom)).unwrap();
    assert_eq!(frozen, tuned);
    assert_eq!(frozen, random);
    let live = bench.run(&ExperimentConfig::new(Variant::PpmFinetune)).unwrap();
    assert_ne!(live, tuned);
}

#[test]
fn variants_read_the_intended_features() {
    let bench = Workbench::prepare(&common::tiny_config(), 2).unwrap();
    assert_ne!(bench.features.encoder_version(), bench.raw_features.encoder_version());
    for v in [Variant::QmEp, Variant::PpmRandom, Variant::PpmFrozen, Variant::PpmFinetune, Variant::PureIdRec] {
        assert_eq!(bench.features_of(v).encoder_version(), bench.features.encoder_version());
    }
    assert_eq!(bench.features_of(Variant::Base).encoder_version(), bench.raw_features.encoder_version());
    let m = bench.model(&ExperimentConfig::new(Variant::PpmFrozen)).unwrap();
    assert!(m.store.iter().any(|(_, p)| p.name.starts_with("ppm.encoder.")));
    let m = bench.model(&ExperimentConfig::new(Variant::PureIdRec)).unwrap();
    assert!(!m.store.iter().any(|(_, p)| p.name.starts_with("ppm.")));
}

#[test]
fn ablation_aggregates_seeds_and_survives_failures() {
    let mut cfg = common::tiny_config();
    cfg.experiment.seeds = vec![4, 5];
    let grid = vec![
        ExperimentConfig::new(Variant::PureIdRec),
        ExperimentConfig::new(Variant::PpmFinetune),
        ExperimentConfig { fraction: 0.0, ..ExperimentConfig::new(Variant::QmEp) },
    ];
    let r = run_ablation(&cfg, &grid);
    assert_eq!(r.seeds, vec![4, 5]);
    assert_eq!(r.rows.len(), 3);
    assert!(!r.complete);
    assert!(r.rows[2].failed);
    assert!(r.rows[2].runs.iter().all(|o| o.error.is_some()));
    assert_eq!(r.ordering.len(), 2);
    assert!(!r.ordering.contains(&r.rows[2].label));
    for row in &r.rows[..2] {
        assert!(!row.failed);
        let vals = row.values("auc/average");
        assert_eq!(vals.len(), 2);
        let s = Stat::of(&vals).unwrap();
        assert_eq!(row.summary["auc/average"], s);
    }
    let first = r.row(&r.ordering[0]).unwrap().mean("auc/average").unwrap();
    let second = r.row(&r.ordering[1]).unwrap().mean("auc/average").unwrap();
    assert!(first >= second);
    let table = r.table();
    assert!(table.contains("pure-IDRec") && table.contains("FAILED"));
}

#[test]
fn stat_uses_the_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.mean, 2.5);
    assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Stat::of(&[7.0]).unwrap().sd, 0.0);
    assert!(Stat::of(&[]).is_none());
}
