//! One module per subcommand. Each exposes
//! `run(&RunConfig, &[u64], &Path) -> Result<Vec<ResultRecord>>`, reads its
//! whole key schema before calling `finish()`, executes once per seed, and
//! writes its artifacts plus a JSON summary through the record module.

pub mod amortized;
pub mod baseline;
pub mod bench;
pub mod interpolate;
pub mod mesh_match;
pub mod solve;
