/// Counts live activation scalars and remembers the peak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveMeter {
    live: usize,
    peak: usize,
}

impl LiveMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, scalars: usize) {
        self.live += scalars;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, scalars: usize) {
        self.live = self.live.saturating_sub(scalars);
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}
