use std::collections::VecDeque;

/// Fixed-size FIFO that holds back each item until `k` newer ones arrived.
#[derive(Debug, Clone)]
pub struct DelayBuffer<B> {
    k: usize,
    fifo: VecDeque<B>,
}

impl<B> DelayBuffer<B> {
    pub fn new(k: usize) -> Self {
        DelayBuffer {
            k,
            fifo: VecDeque::with_capacity(k + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    /// Nothing while fewer than `k` items are held, afterwards the item
    /// pushed `k` calls earlier. `k = 0` passes `b` straight through.
    pub fn push(&mut self, b: B) -> Option<B> {
        self.fifo.push_back(b);
        if self.fifo.len() > self.k {
            self.fifo.pop_front()
        } else {
            None
        }
    }

    /// Empties the buffer, oldest first.
    pub fn drain(&mut self) -> impl Iterator<Item = B> + '_ {
        self.fifo.drain(..)
    }
}

pub fn delay_push<B>(buf: &mut DelayBuffer<B>, b: B) -> Option<B> {
    buf.push(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_delay_passes_through() {
        let mut d = DelayBuffer::new(0);
        assert_eq!(delay_push(&mut d, 7), Some(7));
        assert!(d.is_empty());
    }

    #[test]
    fn k2_fifo() {
        let mut d = DelayBuffer::new(2);
        assert_eq!(d.push("b1"), None);
        assert_eq!(d.push("b2"), None);
        assert_eq!(d.push("b3"), Some("b1"));
        assert_eq!(d.push("b4"), Some("b2"));
        assert_eq!(d.drain().collect::<Vec<_>>(), vec!["b3", "b4"]);
    }

    #[test]
    fn lag_in_data_points() {
        // batches of 128 examples, numbered by their first example
        let mut d = DelayBuffer::new(10);
        let mut lag = None;
        for i in 0..20u64 {
            if let Some(first) = d.push(i * 128) {
                lag = Some(i * 128 - first);
            }
        }
        assert_eq!(lag, Some(1280));
    }

    proptest! {
        #[test]
        fn emits_item_pushed_k_calls_earlier(k in 0usize..20, n in 0usize..100) {
            let mut d = DelayBuffer::new(k);
            for i in 0..n {
                let out = d.push(i);
                prop_assert!(d.len() <= k);
                if i >= k {
                    prop_assert_eq!(out, Some(i - k));
                } else {
                    prop_assert_eq!(out, None);
                }
            }
        }
    }
}
