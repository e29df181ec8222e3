use std::collections::VecDeque;

/// Rolling window of the most recent queries' important-key masks.
///
/// Rows are ordered oldest to newest and every row spans the whole current
/// cache. A key admitted after a row was recorded reads as `false` in that
/// row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceMessage {
    window: usize,
    columns: usize,
    rows: VecDeque<Vec<bool>>,
}

impl ImportanceMessage {
    pub fn new(window: usize) -> Self {
        ImportanceMessage {
            window,
            columns: 0,
            rows: VecDeque::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() >= self.window
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.rows.iter().map(Vec::as_slice)
    }

    /// Adds one `false` column for a newly admitted key.
    pub fn pad(&mut self) {
        self.columns += 1;
        for row in &mut self.rows {
            row.push(false);
        }
    }

    /// Appends the newest mask, dropping the oldest row beyond the window.
    pub fn push(&mut self, mask: Vec<bool>) {
        debug_assert_eq!(mask.len(), self.columns);
        if self.window == 0 {
            return;
        }
        self.rows.push_back(mask);
        while self.rows.len() > self.window {
            self.rows.pop_front();
        }
    }

    /// True for every column flagged by at least one stored row.
    pub fn any(&self) -> Vec<bool> {
        let mut out = vec![false; self.columns];
        for row in &self.rows {
            for (o, &flag) in out.iter_mut().zip(row) {
                *o |= flag;
            }
        }
        out
    }

    /// Number of stored rows flagging each column.
    pub fn counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.columns];
        for row in &self.rows {
            for (o, &flag) in out.iter_mut().zip(row) {
                *o += usize::from(flag);
            }
        }
        out
    }

    /// Keeps only the columns at `indices` (ascending).
    pub fn retain_columns(&mut self, indices: &[usize]) {
        for row in &mut self.rows {
            *row = indices.iter().map(|&i| row[i]).collect();
        }
        self.columns = indices.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_and_rolls() {
        let mut m = ImportanceMessage::new(2);
        m.pad();
        m.push(vec![true]);
        m.pad();
        m.push(vec![false, true]);
        assert_eq!(
            m.rows().collect::<Vec<_>>(),
            vec![&[true, false][..], &[false, true][..]]
        );
        m.pad();
        m.push(vec![false, false, true]);
        assert_eq!(m.len(), 2);
        assert_eq!(m.any(), vec![false, true, true]);
        assert_eq!(m.counts(), vec![0, 1, 1]);
        m.retain_columns(&[1, 2]);
        assert_eq!(m.columns(), 2);
        assert!(m.rows().all(|r| r.len() == 2));
    }

    #[test]
    fn zero_window_stores_nothing() {
        let mut m = ImportanceMessage::new(0);
        m.pad();
        m.push(vec![true]);
        assert!(m.is_empty());
        assert_eq!(m.columns(), 1);
    }
}
