pub mod app;
pub mod doc;
pub mod files;
