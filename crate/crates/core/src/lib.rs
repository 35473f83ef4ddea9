pub mod geometry;
pub mod clustering;
pub mod synthetic;
pub mod corpus;
pub mod providers;
pub mod representation;
pub mod adapter;
pub mod pipeline;
pub mod refine;
pub mod evalharness;
