//! Semantic-pixel matching: align query pixels to support pixels with an
//! assignment over the cosine matching matrix, then refine aligned pixels
//! with a residual bottleneck MLP.

mod assign;
mod matcher;

pub use assign::{
    hungarian_assign, matching_matrix, nn_assign, rearrange, repair_to_bijection, solve_min_cost,
    Assignment, AssignmentKind, MatchingMatrix,
};
pub(crate) use matcher::RowCache;
pub use matcher::{
    decode_matchers, encode_matchers, matcher_forward, read_matchers, write_matchers, LayerMatcher,
    MatcherParams, MatcherSet, MATCHER_MAGIC,
};
