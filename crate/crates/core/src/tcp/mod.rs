//! TCP packet-injection detection.

mod classify;
mod flow;

pub use classify::{
    analyze_tcp, classify_flow, control_status, discount_singletons, Cell, ControlStatus,
    FlowVerdict, InjectionOutcome, InjectionVerdict, SynFailure, TcpAnalysis,
};
pub use flow::{
    find_collisions, reassemble_flows, CollisionEvent, CollisionKind, FourTuple, SynResponse,
    TcpFlow,
};
