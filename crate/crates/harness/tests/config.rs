mod common;

use ppm_harness::{Config, ExperimentConfig, Variant};

#[test]
fn defaults_survive_a_toml_round_trip() {
    let c = Config::default();
    c.validate().unwrap();
    let text = toml::to_string(&c).unwrap();
    assert_eq!(Config::from_toml(&text).unwrap(), c);
    assert_eq!(Config::from_toml("").unwrap(), c);
    assert_eq!(c.experiment.seeds, vec![1, 2, 3]);
}

#[test]
fn default_grid_covers_the_table() {
    let grid = Config::default().experiment.grid;
    let variants: Vec<Variant> = grid.iter().map(|g| g.variant).collect();
    for v in Variant::TABLE {
        assert!(variants.contains(&v));
    }
    assert!(variants.contains(&Variant::PureIdRec));
    assert!(grid.iter().any(|g| g.variant == Variant::PpmFinetune && g.fraction == 0.5));
}

#[test]
fn grid_cells_parse_by_variant_name() {
    let c = Config::from_toml(
        r#"
[[experiment.grid]]
variant = "Base+QM&EP+PPM (frozen)"
ablate_plugin = true
[[experiment.grid]]
variant = "pure-IDRec"
fraction = 0.25
"#,
    )
    .unwrap();
    assert_eq!(
        c.experiment.grid,
        vec![
            ExperimentConfig { variant: Variant::PpmFrozen, fraction: 1.0, ablate_plugin: true },
            ExperimentConfig { variant: Variant::PureIdRec, fraction: 0.25, ablate_plugin: false },
        ]
    );
    assert_eq!(c.experiment.grid[1].label(), "pure-IDRec @25%");
}

#[test]
fn bad_configs_are_rejected() {
    for bad in [
        "[data]\nnum_itemz = 3",
        "[urm]\nmax_seq_len = 12",
        "[experiment]\nseeds = []",
        "[pipeline]\nurm_epochs = 0",
        "[[experiment.grid]]\nvariant = \"Base\"\nfraction = 0.0",
        "[[experiment.grid]]\nvariant = \"Nope\"",
    ] {
        assert!(Config::from_toml(bad).is_err(), "{bad}");
    }
}

#[test]
fn hash_tracks_content() {
    let a = common::tiny_config();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.urm.epochs += 1;
    assert_ne!(a.hash(), b.hash());
}
