use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(script: &std::ffi::CStr) {
    Python::attach(|py| {
        let module = wrap_pymodule!(alf_py::alf_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("alf", module).unwrap();
        if let Err(e) = py.run(script, None, Some(&locals)) {
            e.print(py);
            panic!("python script failed");
        }
    });
}

#[test]
fn cost_functions() {
    run(c"
assert alf.code_max(64, 128, 3) == 104
assert alf.gain_ratio(64, 128, 3, 104) > 1.0 > alf.gain_ratio(64, 128, 3, 105)
row = alf.layer_cost(64, 128, 3, 8, 8, 104)
assert row['c_code_max'] == 104 and row['economical']
assert row['params_alf'] == 9 * 64 * 104 + 104 * 128
");
}

#[test]
fn masks() {
    run(c"
assert alf.masked_count(0.85, 100) == 85
m = alf.mask_from_importances([3.0, 1.0, 2.0, 0.5], 0.5)
assert m == [True, False, True, False]
try:
    alf.mask_from_importances([], 0.5)
    raise SystemExit('empty importances accepted')
except alf.AlfError:
    pass
");
}

#[test]
fn block_and_container() {
    run(c"
b = alf.AlfBlock(2, 4, 4, 3, padding=1, sigma_inter='relu', seed=1)
x = [0.1 * i for i in range(1 * 5 * 5 * 2)]
y, dims = b.forward(x, (1, 5, 5, 2))
assert dims == (1, 5, 5, 4) and len(y) == 100
b.set_mask([True, False, True, False])
assert b.active_channels == 2 and b.compact() == (2, 4)
assert b.reconstruction_loss() >= 0.0
");
}
