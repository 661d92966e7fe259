//! Clean and attacked detection rates over a pose grid, a simulated
//! approach sequence, and black-box transfer.

mod driveby;
mod grid;
mod outcome;
mod report;
mod sheet;
mod summary;

pub use driveby::{detected_later, driveby_background, simulate_driveby, DriveBy, DriveByReport, FrameRecord, NEAR_SCALE};
pub use grid::{GridPoint, PoseGrid, SkippedPose};
pub use outcome::{classify_outcome, Outcome, LOCALIZATION_IOU};
pub use report::{
    aggregate, eval_backgrounds, eval_pose_grid, eval_pose_grid_at, eval_transfer, evaluate_samples, rates, Aggregates,
    EvalReport, EvalTarget, Observation, PoseRecord, Rates, ReportMeta, ScaleBin, REPORT_SCHEMA,
};
pub use sheet::{contact_sheet, report_frames, AnnotatedFrame};
pub use summary::{summarize, Column, ColumnKind, Summary};
