use std::path::Path;

use epirt::epidata::*;
use epirt::synth::{generate, piecewise_linear, ScenarioSpec};
use epirt::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn integer_counts() -> impl Strategy<Value = Array2<f64>> {
    (1usize..5, 1usize..40).prop_flat_map(|(d, t)| {
        prop::collection::vec((0u32..5000).prop_map(f64::from), d * t)
            .prop_map(move |v| Array2::from_shape_vec((d, t), v).unwrap())
    })
}

proptest! {
    #[test]
    fn long_format_round_trips(values in integer_counts()) {
        let z = model::CountMatrix::from_values(values).unwrap();
        let mut buf = Vec::new();
        write_counts(&mut buf, &z).unwrap();
        let (back, report) = read_daily_long(buf.as_slice(), Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back.values(), z.values());
        prop_assert_eq!(back.territories(), z.territories());
        prop_assert_eq!(back.dates(), z.dates());
        prop_assert_eq!(report.filled_cells, 0);
    }

    #[test]
    fn cumulative_and_daily_are_inverse(values in integer_counts()) {
        let cumulative = daily_to_cumulative(values.view());
        prop_assert_eq!(&cumulative_to_daily(cumulative.view()), &values);
        prop_assert_eq!(cumulative.column(cumulative.ncols() - 1), values.sum_axis(Axis(1)));
    }

    #[test]
    fn wide_loader_differences_and_aggregates(values in integer_counts()) {
        let (d, t) = values.dim();
        let cumulative = daily_to_cumulative(values.view());
        let dates = dates_from("2020-01-22".parse().unwrap(), t);
        let mut csv = String::from("Province/State,Country/Region,Lat,Long");
        for date in &dates {
            csv.push_str(&date.format(",%-m/%-d/%y").to_string());
        }
        csv.push('\n');
        // each country is split over two provinces
        for (i, row) in cumulative.outer_iter().enumerate() {
            for half in [0.25, 0.75] {
                csv.push_str(&format!("p{i},country_{i},0,0"));
                row.iter().for_each(|v| csv.push_str(&format!(",{}", v * half)));
                csv.push('\n');
            }
        }
        let (z, report) = read_cumulative_wide(csv.as_bytes(), Path::new("mem.csv")).unwrap();
        prop_assert_eq!(z.values(), values.view());
        prop_assert_eq!(report.aggregated_rows, d);
        prop_assert_eq!(z.dates(), dates.as_slice());
    }
}

#[test]
fn france_fixture_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/france_departements.graph");
    let g = load_graph(&path).unwrap();
    assert_eq!(g.num_vertices(), 96);
    let names = g.territories().expect("fixture names its vertices");
    assert!(names.iter().any(|n| n == "2A") && names.iter().any(|n| n == "2B"));
    // Corsica is its own component: 2A and 2B touch only each other
    let idx = |code: &str| names.iter().position(|n| n == code).unwrap();
    let neighbors = |v: usize| g.edges().iter().filter(move |e| e.0 == v || e.1 == v).count();
    assert_eq!((neighbors(idx("2A")), neighbors(idx("2B"))), (1, 1));
}

#[test]
fn synthetic_counts_follow_the_renewal_mean() {
    let phi = SerialInterval::default();
    let days = 60;
    let r = piecewise_linear(&[(0, 1.2), (days - 1, 0.9)], days).unwrap();
    let (mut observed, mut expected) = (0.0, 0.0);
    for seed in 0..200 {
        let spec = ScenarioSpec::shared(&[(0, 1.2), (days - 1, 0.9)], 1, days, 30.0, seed).unwrap();
        let (z, _) = generate(&spec, &phi, Execution::Sequential).unwrap();
        assert!(z.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        let phi_z = phi.convolve_past(z.values());
        for t in phi.tau()..days {
            observed += z.values()[[0, t]];
            expected += r[t] * phi_z[[0, t]];
        }
    }
    let ratio = observed / expected;
    assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
}
