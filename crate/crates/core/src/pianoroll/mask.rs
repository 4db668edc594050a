use std::ops::Range;

/// Set of `(instrument, time)` cells whose values are observed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextMask {
    instruments: usize,
    timesteps: usize,
    cells: Vec<bool>,
    count: usize,
}

impl ContextMask {
    pub fn empty(instruments: usize, timesteps: usize) -> Self {
        ContextMask { instruments, timesteps, cells: vec![false; instruments * timesteps], count: 0 }
    }

    pub fn full(instruments: usize, timesteps: usize) -> Self {
        let n = instruments * timesteps;
        ContextMask { instruments, timesteps, cells: vec![true; n], count: n }
    }

    /// Builds a mask from a cell predicate.
    pub fn from_fn(instruments: usize, timesteps: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = ContextMask::empty(instruments, timesteps);
        for i in 0..instruments {
            for t in 0..timesteps {
                if f(i, t) {
                    mask.insert(i, t);
                }
            }
        }
        mask
    }

    /// Every timestep of one voice.
    pub fn voice(instruments: usize, timesteps: usize, voice: usize) -> Self {
        ContextMask::from_fn(instruments, timesteps, |i, _| i == voice)
    }

    /// Every voice over the given timesteps (clipped to the roll).
    pub fn frames(instruments: usize, timesteps: usize, range: Range<usize>) -> Self {
        ContextMask::from_fn(instruments, timesteps, |_, t| range.contains(&t))
    }

    /// Every voice at timesteps `t ≡ 0 (mod k)`.
    pub fn every(instruments: usize, timesteps: usize, k: usize) -> Self {
        assert!(k > 0, "stride must be positive");
        ContextMask::from_fn(instruments, timesteps, |_, t| t % k == 0)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.instruments, self.timesteps)
    }

    /// Total number of cells `I·T`.
    pub fn capacity(&self) -> usize {
        self.cells.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.cells.len()
    }

    pub fn contains(&self, instrument: usize, time: usize) -> bool {
        self.cells[self.index(instrument, time)]
    }

    /// Adds a cell; returns whether it was newly inserted.
    pub fn insert(&mut self, instrument: usize, time: usize) -> bool {
        let idx = self.index(instrument, time);
        let fresh = !self.cells[idx];
        if fresh {
            self.cells[idx] = true;
            self.count += 1;
        }
        fresh
    }

    pub fn remove(&mut self, instrument: usize, time: usize) -> bool {
        let idx = self.index(instrument, time);
        let present = self.cells[idx];
        if present {
            self.cells[idx] = false;
            self.count -= 1;
        }
        present
    }

    pub fn complement(&self) -> Self {
        ContextMask {
            instruments: self.instruments,
            timesteps: self.timesteps,
            cells: self.cells.iter().map(|&c| !c).collect(),
            count: self.cells.len() - self.count,
        }
    }

    pub fn union(&self, other: &ContextMask) -> Self {
        assert_eq!(self.shape(), other.shape(), "mask shapes differ");
        let cells: Vec<bool> = self.cells.iter().zip(&other.cells).map(|(&a, &b)| a || b).collect();
        let count = cells.iter().filter(|&&c| c).count();
        ContextMask { cells, count, ..*self }
    }

    /// Cells in the mask, instrument-major.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let t_n = self.timesteps;
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(move |(idx, _)| (idx / t_n, idx % t_n))
    }

    /// Cells not in the mask, instrument-major.
    pub fn iter_missing(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let t_n = self.timesteps;
        self.cells.iter().enumerate().filter(|(_, &c)| !c).map(move |(idx, _)| (idx / t_n, idx % t_n))
    }

    fn index(&self, instrument: usize, time: usize) -> usize {
        assert!(
            instrument < self.instruments && time < self.timesteps,
            "cell ({instrument}, {time}) outside {}x{}",
            self.instruments,
            self.timesteps
        );
        instrument * self.timesteps + time
    }
}
