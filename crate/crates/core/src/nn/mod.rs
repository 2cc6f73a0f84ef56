//! Network architectures: block constructors, stage assembly, parameter
//! registry and reports.

pub mod block;
pub mod network;
pub mod params;
pub mod spec;
pub mod summary;

pub use block::{make_block, Block, BlockConfig, BlockKind, Shortcut};
pub use network::{make_network, NamedStage, Network, Stage};
pub use params::{ParamId, ParamKind, ParamStore};
pub use spec::{BlockVariant, Family, NetworkSpec, ShortcutType};
pub use summary::{ParamCount, ShapeReport, StageRow};
