pub mod gradcheck;
pub mod properties;
