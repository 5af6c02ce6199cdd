use proptest::prelude::*;
use sts_core::data_io::{export_events, generate, ingest, rebin, SynthConfig};
use sts_core::*;

fn small(seed: u64) -> (SynthConfig, RegionGraph, AnomalyTensor) {
    let cfg = SynthConfig {
        grid_rows: 3,
        grid_cols: 2,
        n_categories: 3,
        n_slots: 40,
        slot_seconds: 3600,
        seed,
        ..SynthConfig::default()
    };
    let g = cfg.default_graph().unwrap();
    let x = generate(&cfg, &g).unwrap().0;
    (cfg, g, x)
}

#[test]
fn export_then_ingest_reproduces_the_tensor() {
    for unit in [false, true] {
        let (cfg, g, x) = small(4);
        let mut buf = Vec::new();
        let written = export_events(&x, &g, unit, &mut buf).unwrap();
        let total: f64 = x.values().data().iter().sum();
        let nonzero = x.values().data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(written, if unit { total as usize } else { nonzero });
        let (back, report) = ingest(buf.as_slice(), &g, &cfg.layout()).unwrap();
        assert_eq!(report.records, written);
        assert_eq!(report.accepted, written);
        assert!(report.errors.is_empty());
        assert_eq!(back.values(), x.values());
        assert_eq!(back.category_names, x.category_names);
    }
}

#[test]
fn labelled_regions_round_trip() {
    let (cfg, g, x) = small(1);
    let labels: Vec<String> = (0..g.n_regions()).map(|i| format!("tract-{}", 100 + i)).collect();
    let g = g.with_labels(labels).unwrap();
    let mut buf = Vec::new();
    export_events(&x, &g, false, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",tract-1")));
    let (back, _) = ingest(buf.as_slice(), &g, &cfg.layout()).unwrap();
    assert_eq!(back.values(), x.values());
}

#[test]
fn events_outside_the_range_are_dropped_not_rejected() {
    let (cfg, g, _) = small(0);
    let csv = "timestamp,region_id,category,value\n\
               2019-12-31T23:59:59Z,0,c0,1\n\
               2020-01-01T00:00:00Z,0,c0,2\n\
               2020-01-02T16:00:00Z,0,c0,1\n";
    let (x, report) = ingest(csv.as_bytes(), &g, &cfg.layout()).unwrap();
    assert_eq!((report.accepted, report.dropped), (1, 2));
    assert_eq!(x.get(0, 0, 0), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rebinning_preserves_mass_and_never_adds_zeros(seed in 0u64..1000, factor in 1usize..6) {
        let (_, _, x) = small(seed);
        let (y, dropped) = rebin(&x, factor).unwrap();
        prop_assert_eq!(y.n_slots(), x.n_slots() / factor);
        prop_assert_eq!(dropped, x.n_slots() % factor);
        let kept = |r: usize, c: usize| (0..y.n_slots() * factor).map(|t| x.get(r, t, c)).sum::<f64>();
        for r in 0..x.n_regions() {
            for c in 0..x.n_categories() {
                let s: f64 = (0..y.n_slots()).map(|t| y.get(r, t, c)).sum();
                prop_assert!((s - kept(r, c)).abs() < 1e-9);
            }
        }
        prop_assert!(y.zero_ratio() <= x.zero_ratio() + 1e-12 || dropped > 0);
    }
}
