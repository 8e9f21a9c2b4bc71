pub mod complements;
pub mod convref;
pub mod decouple;
pub mod error;
pub mod flopsmodel;
pub mod linalg;
pub mod model;
pub mod modelio;
pub mod tensor;
pub mod validate;
