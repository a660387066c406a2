pub mod corpus;
pub mod encoders;
pub mod experiment;
pub mod numerics;
pub mod objectives;
pub mod pseudolabel;
pub mod tokenizer;
pub mod training;
pub mod zeroshot;
