//! Special functions, reference distributions and the assumption tests.

pub mod dist;
pub mod hypothesis;
pub mod special;

pub use dist::{dist_survival, normal_cdf, normal_sf, Distribution};
pub use hypothesis::{
    correlation_test, edgington_combine, fisher_combine, irwin_hall_cdf, levene_test, obrien_test,
    obrien_transform, pearson_correlation_pvalue, run_test, Combiner, GroupDiagnostic, SampleGroup,
    SampleTable, SkippedGroup, TestKind, TestReport, P_FLOOR,
};
