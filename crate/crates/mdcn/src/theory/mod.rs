//! Exact Wasserstein-1 computation on small discrete samples and empirical
//! verification of the generalization bounds the training losses descend on.

mod bounds;
mod ot;

pub use bounds::{
    random_bt_instance, random_thm_instance, verify_prop_bt, verify_thm_bound, BoundReport,
    BtInstance, LipschitzFn, ThmInstance, WeightMode,
};
pub use ot::{prob_discrepancy, w1_exact_1d, w1_exact_assignment, DiscreteDist};
