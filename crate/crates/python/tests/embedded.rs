use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

const SCRIPT: &std::ffi::CStr = c"
import math
assert abs(db.loss_two_stage([0.0, 0.0, 0.0], 0, 1.0) - 2 * math.log(3)) < 1e-9
assert db.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
assert db.auc([0.2, 0.3], [1, 1]) is None
data = db.generate(n_samples=1200, positive_fraction=0.15, seed=2, blobs_dim=4).split(2)
test = data.subset('test')
model = db.train_model('softmax', data, seed=1, settings='hidden_dims = [8]\\n[sgd]\\nepochs = 4')
curve = db.uq_sweep(model, test, 20)
assert len(curve) == 20 and curve[-1].deferral_rate == 1.0
try:
    model.predict(test.features)
    raise AssertionError('threshold should be required')
except ValueError:
    pass
try:
    db.loss_one_stage([0.0, 0.0, 0.0], 0, 1.5)
    raise AssertionError('alpha outside [0, 1] accepted')
except ValueError:
    pass
";

#[test]
fn module_works_from_python() {
    Python::initialize();
    Python::attach(|py| {
        let module = wrap_pymodule!(deferbench_py::deferbench_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("db", module).unwrap();
        if let Err(e) = py.run(SCRIPT, Some(&globals), None) {
            e.print(py);
            panic!("python script failed");
        }
    });
}
