//! Delegated variational quantum learning over quantum homomorphic
//! encryption, simulated on a desk.

pub mod simulator;
pub mod pauli_frame;
pub mod classical_he;
pub mod rsp_gadget;
pub mod qhe_core;
pub mod skdecomp;
pub mod vqa;
pub mod protocol;
