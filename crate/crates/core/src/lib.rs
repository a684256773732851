pub mod corpus;
pub mod extraction;
pub mod geo;
pub mod kb;
pub mod llm;
pub mod neighbors;
pub mod privacy;
pub mod prompting;
pub mod recommender;
pub mod pipeline;
pub mod synthetic;
pub mod evaluation;
