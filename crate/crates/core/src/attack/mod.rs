//! Input constructors: the structured-form prefix attack and the
//! cluster-guided semantic attack.

pub mod prefix;
pub mod semantic;
