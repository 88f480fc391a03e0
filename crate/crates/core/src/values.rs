//! Typed element operations over raw payload bytes.
//!
//! Integer reductions use wrapping arithmetic so adversarial payloads stay
//! bit-reproducible; floats reduce in slice order, which is fixed per run.

use crate::registry::{ElemKind, ReduceFn};

macro_rules! reduce_typed {
    ($a:expr, $b:expr, $out:expr, $ty:ty, $f:expr, $wrap_mul:expr) => {{
        let step = std::mem::size_of::<$ty>();
        for ((ca, cb), out) in $a
            .chunks_exact(step)
            .zip($b.chunks_exact(step))
            .zip($out.chunks_exact_mut(step))
        {
            let x = <$ty>::from_le_bytes(ca.try_into().unwrap());
            let y = <$ty>::from_le_bytes(cb.try_into().unwrap());
            let r: $ty = match $f {
                ReduceFn::Sum => $wrap_mul.0(x, y),
                ReduceFn::Prod => $wrap_mul.1(x, y),
                ReduceFn::Min => {
                    if x < y {
                        x
                    } else {
                        y
                    }
                }
                ReduceFn::Max => {
                    if x > y {
                        x
                    } else {
                        y
                    }
                }
            };
            out.copy_from_slice(&r.to_le_bytes());
        }
    }};
}

/// Elementwise `f(a, b)` over two equal-length byte slices.
pub fn reduce_bytes(kind: ElemKind, f: ReduceFn, a: &[u8], b: &[u8]) -> Vec<u8> {
    assert_eq!(a.len(), b.len(), "reduce operand length mismatch");
    assert_eq!(
        a.len() % kind.size(),
        0,
        "payload not a whole number of elements"
    );
    let mut out = vec![0u8; a.len()];
    match kind {
        ElemKind::Int32 => reduce_typed!(a, b, out, i32, f, (i32::wrapping_add, i32::wrapping_mul)),
        ElemKind::Int64 => reduce_typed!(a, b, out, i64, f, (i64::wrapping_add, i64::wrapping_mul)),
        ElemKind::Float32 => reduce_typed!(
            a,
            b,
            out,
            f32,
            f,
            (|x: f32, y: f32| x + y, |x: f32, y: f32| x * y)
        ),
    }
    out
}

pub fn i32s_to_bytes(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_i32s(b: &[u8]) -> Vec<i32> {
    b.chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn i64s_to_bytes(v: &[i64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_i64s(b: &[u8]) -> Vec<i64> {
    b.chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
