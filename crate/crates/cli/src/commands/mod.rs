pub mod eval;
pub mod export;
pub mod gendata;
pub mod run;
pub mod sweep;
