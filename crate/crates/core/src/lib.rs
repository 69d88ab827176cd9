//! Refined pseudo labeling for source-free domain-adaptive detection.
//!
//! The pipeline turns teacher predictions on unlabeled target frames into
//! student supervision:
//!
//! 1. [`suppression::group_nms`] keeps each survivor's suppressed group and
//!    its mean IoU,
//! 2. [`thresholding`] filters survivors with per-class thresholds drawn
//!    from the class mix of the teacher's foreground predictions,
//! 3. [`assignment::partition`] splits the labels into certain and
//!    uncertain ones by mean IoU,
//! 4. [`losses`] trains certain labels with classification plus box
//!    regression and uncertain ones with a soft teacher distribution,
//! 5. [`training`] runs the student update and the EMA teacher update.
//!
//! [`synth`] builds long-tailed synthetic scenes with a source/target
//! domain gap and [`evaluation`] scores detectors and pseudo labels.

pub mod assignment;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod rng;
pub mod suppression;
pub mod synth;
pub mod thresholding;
pub mod training;

pub use assignment::{match_proposals, partition, ProposalMatch, PseudoLabelSet};
pub use detector::DetectorParams;
pub use error::{Error, Result};
pub use evaluation::{audit_pseudo_labels, average_precision, mean_ap, APResult, BiasAudit};
pub use geometry::{area, iou, BBox};
pub use losses::LossBreakdown;
pub use model::{ClassCatalog, ClassDistribution, Dataset, Frame, GtBox, ScoredBox};
pub use suppression::{group_nms, mean_iou, PseudoBox};
pub use synth::{generate_dataset, pretrain_source, PretrainConfig, SceneConfig, SyntheticDataset};
pub use thresholding::{estimate_thresholds, filter_by_threshold, should_refresh, ThresholdTable};
pub use training::{ema_update, self_train, student_step, TrainConfig, TrainOutcome, TrainReport};
