//! Human-in-the-loop correction of 2D pose-graph maps.
//!
//! A person marks two features on the map with strokes and says how they
//! relate (same wall, same line, parallel or perpendicular). The crate snaps
//! the strokes to scan observations ([`interpret`]), moves the trajectory so
//! the relation holds ([`correction`]) and then optimizes odometry and all
//! human constraints together ([`optimizer`]). [`session`] strings the steps
//! together, [`metrics`] scores the result and [`dataset`] reads, writes and
//! generates the data.
//!
//! ```
//! use hitl_slam::dataset::{generate_bent_hallway, BentHallwayConfig};
//! use hitl_slam::session::{Session, SessionConfig};
//!
//! let g = generate_bent_hallway(&BentHallwayConfig { length: 6.0, ..Default::default() }).graph;
//! let session = Session::new(g, SessionConfig::default()).unwrap();
//! assert_eq!(session.iteration(), 0);
//! ```

pub mod correction;
pub mod dataset;
pub mod geometry;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod protocol;
pub mod residuals;
pub mod session;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/factor-graph.md")]
    mod factor_graph {}
    #[doc = include_str!("../../../book/src/interpretation.md")]
    mod interpretation {}
    #[doc = include_str!("../../../book/src/correction.md")]
    mod correction {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/inconsistency.md")]
    mod inconsistency {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
