use pyo3::prelude::*;

#[pymodule]
fn hifi_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
