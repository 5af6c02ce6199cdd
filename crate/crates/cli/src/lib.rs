pub mod commands;
pub mod manifest;
pub mod run_config;

pub use commands::DataSource;
pub use manifest::RunManifest;
pub use run_config::RunConfig;
