//! Winning-ticket mechanics: θ0 snapshots, iterative magnitude pruning, and
//! ticket resets.
//!
//! The crate owns the state machine of a lottery experiment — capture the
//! initialization ([`snapshot_init`] guards against capturing it late), grow
//! the mask 20% of survivors at a time ([`lottery_prune_iteration`]), rewind
//! to the ticket ([`reset_to_ticket`]) — plus the grid types the harness
//! expands into training jobs ([`LotteryPlan`]). Training itself and report
//! emission live in the harness; the random-re-init arm simply never
//! receives a [`Snapshot`], which is what makes it random.

pub mod error;
pub mod plan;
pub mod ticket;

pub use error::{LotteryError, Result};
pub use plan::{LotteryMode, LotteryPlan};
pub use ticket::{
    lottery_prune_iteration, reset_to_ticket, snapshot_init, Snapshot, SnapshotEntry, TicketState,
};
