use neoxsim_py::neoxsim_py;
use pyo3::prelude::*;

const SCRIPT: &std::ffi::CStr = cr#"
import neoxsim_py as nx
cfg = nx.ModelConfig.preset("tiny")
g = nx.GoldenBlock(cfg, seed=1)
c = nx.ClusterBlock(cfg, seed=1, n_blocks=2, reduction="ring")
x = [0.1 * i - 0.3 for i in range(cfg.hidden)]
y, trace = c.step(x)
assert max(abs(a - b) for a, b in zip(g.step(x), y)) < 1e-12
assert trace["sync_steps"] == 1
assert nx.round16(1.0 + 2.0 ** -11) == 1.0
try:
    nx.ModelConfig.preset("nope")
    raise AssertionError("accepted unknown preset")
except ValueError as e:
    assert "unknown preset" in str(e)
"#;

#[test]
fn module_runs_embedded() {
    pyo3::append_to_inittab!(neoxsim_py);
    Python::initialize();
    Python::attach(|py| py.run(SCRIPT, None, None)).unwrap();
}
