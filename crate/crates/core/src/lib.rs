//! Black-box configuration tuning for thread-pool workflows.
//!
//! A problem document names integer or real variables, an objective metric
//! and optional constraints. The optimizer proposes configurations through an
//! ask/tell interface, the runner evaluates them on parallel slots, and every
//! run leaves an archive with a canonical manifest that can be replayed.
//!
//! ```no_run
//! use contune::{document::load_document, runner::{run_cycle, RunOptions}};
//!
//! let doc = load_document("problem.json".as_ref()).unwrap();
//! let outcome = run_cycle(&doc, "runs/first".as_ref(), &RunOptions::default()).unwrap();
//! println!("{:?}", outcome.manifest.best);
//! ```

pub mod archive;
pub mod document;
pub mod problem;
pub mod runner;
pub mod sampling;
pub mod scenario;
pub mod search;
pub mod seed;
pub mod sensitivity;
pub mod surrogate;

pub use contune_sim as sim;
