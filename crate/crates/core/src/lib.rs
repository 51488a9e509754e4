//! Detection evaluation, annealed feature fusion, pivot alignment, gradient
//! diagnostics and mixture sampling for multi-modal remote-sensing models.

pub mod detect_eval;
pub mod grad_lab;
pub mod lvsa;
pub mod mixture;
pub mod pivot_align;
pub mod seed;
