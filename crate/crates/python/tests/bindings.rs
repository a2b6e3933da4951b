use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "uda_py").unwrap();
        uda_py::uda_py(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("uda", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.print(py);
            panic!("python assertion failed");
        }
    });
}

#[test]
fn metrics_round_trip_through_python() {
    with_module(
        c"
a = bytes([0, 1, 1, 1, 0, 0, 0, 0])
b = bytes([0, 0, 1, 1, 1, 1, 0, 0])
assert abs(uda.dsc(a, b, 1) - 4 / 7) < 1e-12
assert uda.nsd(bytes(8), bytes(8), (1, 2, 4), 1, 1.0) == 1.0
assert uda.trapezoid_area([(0.0, 100.0), (2.0, 300.0)]) == 400.0
try:
    uda.nsd(a, b, (1, 2, 4), 1, -1.0)
    raise AssertionError('negative tolerance accepted')
except ValueError:
    pass
",
    );
}

#[test]
fn configs_and_volumes() {
    with_module(
        c"
cfg = uda.PipelineConfig.preset('smoke')
assert cfg.hash() == uda.PipelineConfig.from_toml(cfg.to_toml()).hash()
cfg.seed = 4
assert cfg.seed == 4 and len(cfg.hash()) == 64
v = uda.phantom(1, 'A', (2, 32, 32))
assert v.shape == (2, 32, 32) and v.domain == 'A'
assert len(v.intensities) == len(v.labels) == len(v)
assert max(v.labels) < 16
try:
    uda.phantom(1, 'C')
    raise AssertionError('bad domain accepted')
except ValueError:
    pass
assert list(uda.ARMS) == ['no_uda', 'drl', 'drl_st'] and 'smoke' in uda.PRESETS
",
    );
}

#[test]
fn missing_stage_raises_file_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    let code = format!(
        "cfg = uda.PipelineConfig.preset('smoke')\ncfg.output_dir = {:?}\np = uda.Pipeline(cfg)\ntry:\n    p.finetune(1)\n    raise AssertionError('ran without upstream')\nexcept FileNotFoundError:\n    pass\n",
        tmp.path().display().to_string()
    );
    with_module(&std::ffi::CString::new(code).unwrap());
}
