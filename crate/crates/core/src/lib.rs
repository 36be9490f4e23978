//! Deterministic, auditable curation of multimodal instruction data.
//!
//! Four stages ([`quality`], [`reference`], [`dedup`], [`redistribution`])
//! shrink a raw pool into a balanced training set, each one writing a
//! complete audit log. Scores come from worker processes reached through the
//! [`gateway`]; a seeded in-process mock stands in for them in tests. The
//! [`pipeline`] module chains the stages with checkpoints and resume.
//!
//! Around the stages sit [`curriculum`] tiering, [`preference`] pairs with
//! the MPO loss, vision-dependence [`diagnostics`] and a [`synthesis`]
//! front end. The guide in `book/` walks through each of them.

pub mod corpus;
pub mod curriculum;
pub mod dedup;
pub mod diagnostics;
pub mod error;
pub mod fixtures;
pub mod gateway;
pub mod pipeline;
pub mod preference;
pub mod quality;
pub mod redistribution;
pub mod reference;
pub mod stage;
pub mod synthesis;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/workers.md")]
    mod workers {}
    #[doc = include_str!("../../../book/src/filters.md")]
    mod filters {}
    #[doc = include_str!("../../../book/src/dedup.md")]
    mod dedup {}
    #[doc = include_str!("../../../book/src/redistribution.md")]
    mod redistribution {}
    #[doc = include_str!("../../../book/src/curriculum.md")]
    mod curriculum {}
    #[doc = include_str!("../../../book/src/preference.md")]
    mod preference {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
