//! Per-thread recycling of large activation buffers. Fresh multi-megabyte
//! allocations are returned to the OS on free and page-fault again on the
//! next batch, which costs more than the arithmetic in the early layers.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};

const MAX_POOLED: usize = 24;

pub(crate) trait Pooled: Copy + Default + 'static {
    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<Self>>) -> R) -> R;
}

thread_local! {
    static F64_POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    static U32_POOL: RefCell<Vec<Vec<u32>>> = const { RefCell::new(Vec::new()) };
}

impl Pooled for f64 {
    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<Self>>) -> R) -> R {
        F64_POOL.with(|p| f(&mut p.borrow_mut()))
    }
}

impl Pooled for u32 {
    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<Self>>) -> R) -> R {
        U32_POOL.with(|p| f(&mut p.borrow_mut()))
    }
}

/// A zero-initialized buffer that goes back to the thread's pool on drop.
#[derive(Debug)]
pub(crate) struct Buf<T: Pooled = f64>(Vec<T>);

impl<T: Pooled> Buf<T> {
    pub(crate) fn zeros(len: usize) -> Self {
        let mut v = Self::take(len);
        v.clear();
        v.resize(len, T::default());
        Buf(v)
    }

    fn take(len: usize) -> Vec<T> {
        T::with_pool(|pool| {
            // smallest buffer that fits, else the largest one to grow
            let pick = pool
                .iter()
                .enumerate()
                .filter(|(_, b)| b.capacity() >= len)
                .min_by_key(|(_, b)| b.capacity())
                .map(|(i, _)| i)
                .or_else(|| (0..pool.len()).max_by_key(|&i| pool[i].capacity()));
            pick.map(|i| pool.swap_remove(i)).unwrap_or_default()
        })
    }

    /// Like [`Buf::zeros`] but a recycled buffer keeps its stale contents;
    /// for outputs that are fully overwritten.
    pub(crate) fn dirty(len: usize) -> Self {
        let mut v = Self::take(len);
        if v.len() >= len {
            v.truncate(len);
        } else {
            v.resize(len, T::default());
        }
        Buf(v)
    }

    pub(crate) fn empty() -> Self {
        Buf(Vec::new())
    }

    pub(crate) fn from_slice(s: &[T]) -> Self {
        let mut b = Self::zeros(s.len());
        b.copy_from_slice(s);
        b
    }

    pub(crate) fn with_capacity(cap: usize) -> Self {
        let mut b = Self::zeros(cap);
        b.0.clear();
        b
    }

    pub(crate) fn push(&mut self, v: T) {
        self.0.push(v);
    }
}

impl<T: Pooled> Clone for Buf<T> {
    fn clone(&self) -> Self {
        Self::from_slice(self)
    }
}

impl<T: Pooled> Deref for Buf<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Pooled> DerefMut for Buf<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T: Pooled> Drop for Buf<T> {
    fn drop(&mut self) {
        let v = std::mem::take(&mut self.0);
        if v.capacity() == 0 {
            return;
        }
        T::with_pool(|pool| {
            if pool.len() < MAX_POOLED {
                pool.push(v);
            } else if let Some(i) = (0..pool.len()).min_by_key(|&i| pool[i].capacity()) {
                if pool[i].capacity() < v.capacity() {
                    pool[i] = v;
                }
            }
        });
    }
}
