//! Python bindings for the luring defense toolkit.

use pyo3::prelude::*;

#[pymodule]
fn luring_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
