use crate::error::{Error, Result};
use crate::tensor::{NDArray, Scalar};

/// Bounded FIFO of past backbone feature maps, oldest first.
#[derive(Clone, Debug)]
pub struct MemoryBuffer<T = f32> {
    capacity: usize,
    frames: Vec<NDArray<T>>,
}

impl<T: Scalar> MemoryBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            frames: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[NDArray<T>] {
        &self.frames
    }

    /// Appends a frame, evicting the oldest once the capacity is exceeded.
    /// Returns the evicted frame, if any.
    pub fn push(&mut self, frame: NDArray<T>) -> Result<Option<NDArray<T>>> {
        if let Some(first) = self.frames.first() {
            if first.dims() != frame.dims() {
                return Err(Error::shape("memory_push", first.dims(), frame.dims()));
            }
        }
        if self.capacity == 0 {
            return Ok(Some(frame));
        }
        self.frames.push(frame);
        if self.frames.len() > self.capacity {
            Ok(Some(self.frames.remove(0)))
        } else {
            Ok(None)
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_last_frames_in_order() {
        let mut m = MemoryBuffer::<f32>::new(3);
        for i in 1..=5 {
            m.push(NDArray::filled(&[1, 2, 2, 1], i as f32)).unwrap();
        }
        let held: Vec<f32> = m.frames().iter().map(|f| f.data()[0]).collect();
        assert_eq!(held, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut m = MemoryBuffer::<f32>::new(0);
        m.push(NDArray::zeros(&[2])).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn rejects_mismatched_frames() {
        let mut m = MemoryBuffer::<f32>::new(2);
        m.push(NDArray::zeros(&[1, 2, 2, 3])).unwrap();
        assert!(m.push(NDArray::zeros(&[1, 2, 2, 4])).is_err());
    }
}
