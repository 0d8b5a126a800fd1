use serde::{Deserialize, Serialize};

/// Maximal constant stretch `[start, end)` of one symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub symbol: usize,
    pub start: usize,
    pub end: usize,
}

impl Run {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Per-frame action symbols over `{0..k-1}`; symbol `k` is the null class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    symbols: Vec<usize>,
    k: usize,
}

impl Labeling {
    /// Panics if any symbol exceeds `k` (the null index).
    pub fn new(symbols: Vec<usize>, k: usize) -> Self {
        assert!(
            symbols.iter().all(|&s| s <= k),
            "labeling symbol out of range for k={k}"
        );
        Labeling { symbols, k }
    }

    pub fn from_runs(runs: &[Run], k: usize) -> Self {
        let mut symbols = Vec::new();
        for r in runs {
            symbols.extend(std::iter::repeat_n(r.symbol, r.len()));
        }
        Labeling::new(symbols, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn null(&self) -> usize {
        self.k
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_null(&self, symbol: usize) -> bool {
        symbol == self.k
    }

    pub fn runs(&self) -> Vec<Run> {
        let mut runs: Vec<Run> = Vec::new();
        for (t, &s) in self.symbols.iter().enumerate() {
            match runs.last_mut() {
                Some(r) if r.symbol == s => r.end = t + 1,
                _ => runs.push(Run {
                    symbol: s,
                    start: t,
                    end: t + 1,
                }),
            }
        }
        runs
    }

    pub fn non_null_runs(&self) -> Vec<Run> {
        self.runs().into_iter().filter(|r| r.symbol != self.k).collect()
    }

    /// Frames per action `0..k` (null excluded).
    pub fn lengths(&self) -> Vec<usize> {
        let mut l = vec![0; self.k];
        for &s in &self.symbols {
            if s < self.k {
                l[s] += 1;
            }
        }
        l
    }

    pub fn non_null_count(&self) -> usize {
        self.symbols.iter().filter(|&&s| s < self.k).count()
    }

    /// Number of disconnected runs per action `0..k`.
    pub fn run_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for r in self.runs() {
            if r.symbol < self.k {
                c[r.symbol] += 1;
            }
        }
        c
    }

    /// `T` frames split into `k` equal consecutive blocks labeled `0..k`.
    pub fn uniform_split(t: usize, k: usize) -> Self {
        let symbols = (0..t).map(|i| ((i * k) / t.max(1)).min(k - 1)).collect();
        Labeling::new(symbols, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_partition_frames() {
        let l = Labeling::new(vec![0, 0, 2, 1, 1, 0], 2);
        let runs = l.runs();
        assert_eq!(runs.len(), 4);
        assert_eq!(runs[0], Run { symbol: 0, start: 0, end: 2 });
        assert_eq!(runs.iter().map(Run::len).sum::<usize>(), 6);
        assert_eq!(l.run_counts(), vec![2, 1]);
        assert_eq!(l.lengths(), vec![3, 2]);
        assert_eq!(l.non_null_count(), 5);
        assert_eq!(Labeling::from_runs(&runs, 2), l);
    }

    #[test]
    fn uniform_split_blocks() {
        let l = Labeling::uniform_split(10, 3);
        assert_eq!(l.symbols(), &[0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }
}
