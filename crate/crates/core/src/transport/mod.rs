//! Reliable transport: packets, go-back-N recovery, congestion control,
//! fault injection, spraying and queue pairs.

pub mod cc;
pub mod faults;
pub mod gbn;
pub mod link;
pub mod packet;
pub mod qp;

pub use cc::{CcParams, CongestionControl, Dcqcn, FluidCcLink};
pub use faults::{FaultAction, FaultPlan, RandomFaults};
pub use gbn::{GbnConfig, GbnReceiver, GbnSender};
pub use link::{run_link, LinkConfig, LinkReport, ReliableReceiver, ReliableSender, RxOutcome};
pub use packet::{
    segment, spray_port, Opcode, Packet, CUSTOM_OPCODE_BASE, DEFAULT_MTU, HEADER_BYTES,
};
pub use qp::{QpError, QpEvent, QpMemory, QpMode, QpState, QueuePair};
