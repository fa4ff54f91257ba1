use facecap::parallel::solve_columns;
use facecap::pipeline::Session;
use facecap_core::assets::{generate, AssetSpec};
use facecap_core::quasistatic::{Simulator, SolveSettings};
use facecap_core::rig::JawParams;
use facecap_core::sensitivity::SensitivitySystem;

#[test]
fn threaded_columns_match_sequential_bitwise() {
    let session = Session::from_asset(generate(&AssetSpec::default()).unwrap()).unwrap();
    let sim = Simulator::new(&session.anatomy, &session.basis, SolveSettings::default()).unwrap();
    let b = [0.3, 0.1, 0.4, 0.2, 0.5, 0.1];
    let state = sim
        .solve(&b, &JawParams([0.02, 0.01, 0.0, 0.0, 0.001, 0.0]), None)
        .unwrap();
    let system = SensitivitySystem::new(&sim, &state).unwrap();
    let sequential: Vec<Vec<f64>> = (0..system.num_params())
        .map(|p| system.solve_column(p).unwrap())
        .collect();
    for threads in [1, 2, 3, 5, 12, 64] {
        let cols = solve_columns(&system, threads).unwrap();
        assert_eq!(cols.len(), sequential.len());
        for (a, b) in cols.iter().zip(&sequential) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
