/// Maps text to an approximate token count.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / n)`; four characters per token by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharsPerToken(pub usize);

impl Default for CharsPerToken {
    fn default() -> Self {
        CharsPerToken(4)
    }
}

impl TokenEstimator for CharsPerToken {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.0.max(1))
    }
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WhitespaceWords;

impl TokenEstimator for WhitespaceWords {
    fn estimate(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F: Fn(&str) -> usize + Send + Sync> TokenEstimator for F {
    fn estimate(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn estimate_tokens(text: &str, estimator: &dyn TokenEstimator) -> usize {
    estimator.estimate(text)
}
