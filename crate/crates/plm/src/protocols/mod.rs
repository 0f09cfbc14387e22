//! The four protocol building blocks, phase-structured over the transport:
//! fixed-operand multiplication, growing-operand multiplication, secure
//! permutation, and permuted-plaintext nonlinear evaluation.
//!
//! Each protocol is split into a dealer half (P2, preparation/offline only)
//! and a party half (P0/P1) holding the per-site state. The online share
//! algebra lives in pure helper functions so correctness and noise-scale
//! statistics can be driven without a transport in tests.

pub mod mul_fixed;
pub mod mul_growing;
pub mod nonlinear;
pub mod perm_proto;

pub use mul_fixed::{MulFixedDealer, MulFixedParty};
pub use mul_growing::{MulGrowingDealer, MulGrowingParty};
pub use nonlinear::{nonlinear_dealer_offline, NonlinFn, NonlinearMaskP0, NonlinearMaskP1};
pub use perm_proto::{perm_dealer_offline, PermMaskP0, PermMaskP1};

use crate::error::Result;
use crate::tensor::Tensor;
use crate::transport::{Body, Message, Phase, ProtocolId};

/// Pack several tensors into one flight; the receiver supplies the element
/// counts to split them back out. Used to batch reconstructions that belong
/// to the same round.
pub(crate) fn pack_tensors(phase: Phase, protocol: ProtocolId, parts: &[&Tensor]) -> Message {
    let total: usize = parts.iter().map(|t| t.len()).sum();
    let mut data = Vec::with_capacity(total);
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Message::f32(phase, protocol, Tensor::from_vec(data))
}

pub(crate) fn unpack_tensors(body: Body, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let flat = body.tensor()?;
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(crate::error::Error::Decode(format!(
            "packed payload of {} elements, expected {}",
            flat.len(),
            total
        )));
    }
    let data = flat.into_data();
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for shape in shapes {
        let n: usize = shape.iter().product();
        out.push(Tensor::new(shape.clone(), data[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}
