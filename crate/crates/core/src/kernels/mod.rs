//! Raw numeric kernels shared by the autodiff graph.

pub mod conv;
pub mod resample;
pub mod scan;

pub use conv::{ConvGeometry, ConvSpec};
pub use resample::{axis_taps, AxisMap, AxisTaps};
pub use scan::{blocked_linear_scan, ScanDims};
