//! Shared payload buffers.
//!
//! A `SharedBuffer` is the send/recv buffer handle carried by submissions.
//! During execution, the lanes of a rank touch disjoint element ranges of a
//! buffer (the lane partition is contiguous by lane index), and the host
//! only reads it back once the collective's callback fired. That contract is
//! what makes the unchecked interior access sound.

use std::cell::UnsafeCell;
use std::sync::Arc;

#[derive(Clone)]
pub struct SharedBuffer {
    inner: Arc<Inner>,
}

struct Inner {
    data: UnsafeCell<Box<[u8]>>,
}

// Disjoint-range access only; see module docs.
unsafe impl Send for Inner {}
unsafe impl Sync for Inner {}

impl SharedBuffer {
    pub fn zeroed(len: usize) -> Self {
        SharedBuffer::from_vec(vec![0u8; len])
    }

    pub fn from_vec(data: Vec<u8>) -> Self {
        SharedBuffer {
            inner: Arc::new(Inner {
                data: UnsafeCell::new(data.into_boxed_slice()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        unsafe { (&*self.inner.data.get()).len() }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy `src.len()` bytes into the buffer at `offset`.
    pub fn write(&self, offset: usize, src: &[u8]) {
        let data = unsafe { &mut *self.inner.data.get() };
        data[offset..offset + src.len()].copy_from_slice(src);
    }

    /// Copy `len` bytes out of the buffer at `offset`.
    pub fn read(&self, offset: usize, len: usize) -> Vec<u8> {
        let data = unsafe { &*self.inner.data.get() };
        data[offset..offset + len].to_vec()
    }

    /// Full copy; host-side use once the buffer is quiescent.
    pub fn snapshot(&self) -> Vec<u8> {
        let data = unsafe { &*self.inner.data.get() };
        data.to_vec()
    }
}

impl std::fmt::Debug for SharedBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SharedBuffer({} bytes)", self.len())
    }
}
