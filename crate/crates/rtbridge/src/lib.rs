//! A self-contained cross-runtime object bridge: a refcounted,
//! arena-allocated native object model tied to a tracing-GC managed object
//! model via delegation stubs, mirrored objects and peer wrappers, with
//! header-based object lookup, a boundary lock, format-string value
//! marshalling and cycle-aware cross-runtime garbage collection.
//!
//! The native side simulates a C-style runtime: integer-addressed arena
//! memory, per-object refcounts, type descriptors with method/get-set/
//! member tables, and a bookkeeping header prepended in memory before each
//! object. The managed side simulates a traced runtime: handle-addressed
//! objects, a root set, an explicit mark-sweep collector and a finalization
//! reference queue. The bridge keeps the two coherent.
//!
//! Entry point: [`Runtime`]. Scenario scripts (see [`scenario`]) drive the
//! whole stack from the CLI and tests.

pub mod arena;
pub mod bridge;
pub mod error;
pub mod ext;
pub mod gcbridge;
pub mod lock;
pub mod managed;
pub mod native;
pub mod render;
pub mod runtime;
pub mod scenario;
pub mod valuefmt;
pub mod world;

pub use arena::{Arena, BridgeHeader, HeaderFlags, NativeRef};
pub use bridge::{HandleTable, StaticTypeRegistry, Strategy};
pub use error::{BridgeError, Result};
pub use ext::{demo_extension, parse_extension_text, ExtensionModuleDef};
pub use gcbridge::{RefreshReport, GC_AUX_TAG};
pub use lock::{BoundaryLock, LockEvent, LockEventKind, NativeGuard};
pub use managed::{
    BuiltinFunction, CollectReport, FinalizationQueue, ListBackend, MPayload, ManagedHandle,
    ManagedHeap,
};
pub use native::{Kind, NativeObject, NativeWorld, Payload, SingletonKind, TypeData};
pub use runtime::{Runtime, RuntimeConfig};
pub use scenario::{emit_stats, run_scenario, ScenarioConfig, ScenarioReport};
pub use valuefmt::{build_value, parse_args, parse_format, FormatSpec, FormatValue};
pub use world::World;
