//! Reactive optimal power flow (ROPF) solver toolkit.
//!
//! ROPF extends AC optimal power flow with discrete reactive controls: switchable
//! shunt susceptances at buses and transformer tap ratios restricted to a finite
//! catalog. The toolkit builds a lifted mixed-integer formulation in the
//! `(c, s)` voltage-product variables, solves a strengthened mixed-integer
//! second-order cone (MISOCP) relaxation for a global lower bound, recovers an
//! AC-feasible operating point for an upper bound, and reports optimality gaps.
//!
//! Pipeline:
//!
//! 1. [`case_io`] parses MATPOWER case files and attaches shunt/tap catalogs.
//! 2. [`formulation`] builds the MISOCP relaxation (convex envelopes for the
//!    bilinear catalog products, rotated-cone consistency constraints, optional
//!    arctangent outer approximation).
//! 3. [`cuts`] strengthens the root relaxation with cutting planes separating
//!    the relaxation point from the PSD-completable set of each cycle in a
//!    fundamental cycle basis.
//! 4. [`conic`] is the embedded interior-point SOCP solver behind a backend
//!    trait, used for every continuous solve.
//! 5. [`bnb`] runs branch-and-bound over the catalog selection groups.
//! 6. [`recovery`] turns a fixed catalog choice into an AC-feasible point via
//!    Newton power flow and audits it against the exact nonconvex constraints.
//! 7. [`bench`] is the batch harness producing LB / UB / %Gap report tables.

pub mod bench;
pub mod bnb;
pub mod case_io;
pub mod conic;
pub mod cuts;
pub mod formulation;
pub mod program;
pub mod recovery;
