//! Offline analysis of censorship measurements: DNS manipulation, TCP packet
//! injection and block-page detection, with simulation and reporting tools.

pub mod blockpage;
pub mod dns;
pub mod geoloc;
pub mod ipmeta;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod tcp;
