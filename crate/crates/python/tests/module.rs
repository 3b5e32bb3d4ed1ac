use pyo3::prelude::*;
use pyo3::types::PyDict;

fn config(name: &str) -> String {
    format!("{}/../../configs/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn module_functions_round_trip() {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(pygmc::pygmc)(py).into_bound(py);
        let sizes: Vec<(usize, usize)> = m.getattr("output_sizes").unwrap().call1((config("clevr_table4"),)).unwrap().extract().unwrap();
        assert_eq!(sizes.iter().map(|s| s.0).collect::<Vec<_>>(), [64, 32, 16, 8, 8]);

        let f = m.getattr("flops").unwrap();
        let conv = |k: usize| -> u64 {
            let d = f.call1((config("clevr_table4"), k)).unwrap();
            d.cast::<PyDict>().unwrap().get_item("conv_macs").unwrap().unwrap().extract().unwrap()
        };
        assert_eq!(conv(3) - conv(2), conv(2) - conv(1));
        let e = f.call1((config("clevr_table4"), 13)).unwrap_err();
        assert!(e.to_string().contains("k exceeds cardinality"), "{e}");

        let (g, fb): (Vec<f64>, bool) = m.getattr("normalize_gates").unwrap().call1((vec![-1.0, -3.0],)).unwrap().extract().unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
        assert!(fb);
        let (fwd, bwd): (f64, f64) = m.getattr("verify_blocks").unwrap().call1((10u64,)).unwrap().extract().unwrap();
        assert!(fwd <= 1e-10 && bwd <= 1e-10);
    });
}
