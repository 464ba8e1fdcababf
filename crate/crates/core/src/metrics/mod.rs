//! Full-reference image quality: SSIM, MS-SSIM and UQI on Rec. 601 luma.

mod report;
mod ssim;

pub use report::{MetricReport, MetricRow};
pub use ssim::{ms_ssim, ms_ssim_detailed, ssim, uqi, uqi_detailed, MsSsim, Plane, Uqi, MS_SSIM_WEIGHTS};
