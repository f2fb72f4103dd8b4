//! Request pacing and retry helpers for the HTTP adapters.

use std::future::Future;
use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Token bucket: holds up to `per_second` tokens and refills continuously.
pub struct RateLimiter {
    per_second: f64,
    state: Mutex<Bucket>,
}

struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        assert!(per_second > 0.0, "rate must be positive");
        Self {
            per_second,
            state: Mutex::new(Bucket {
                tokens: per_second,
                last: Instant::now(),
            }),
        }
    }

    /// Three requests per second without an API key, ten with one.
    pub fn for_eutils(has_api_key: bool) -> Self {
        Self::new(if has_api_key { 10.0 } else { 3.0 })
    }

    pub fn per_second(&self) -> f64 {
        self.per_second
    }

    pub async fn acquire(&self) {
        let mut bucket = self.state.lock().await;
        loop {
            let now = Instant::now();
            let elapsed = now.duration_since(bucket.last).as_secs_f64();
            bucket.tokens = (bucket.tokens + elapsed * self.per_second).min(self.per_second);
            bucket.last = now;
            if bucket.tokens >= 1.0 {
                bucket.tokens -= 1.0;
                return;
            }
            let wait = (1.0 - bucket.tokens) / self.per_second;
            tokio::time::sleep(Duration::from_secs_f64(wait)).await;
        }
    }
}

/// Exponential backoff: `base`, `base * factor`, ... for at most `max_retries`
/// retries after the first attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            factor: 2,
            max_retries: 3,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base * self.factor.pow(retry)
    }

    pub async fn run<T, E, F, Fut>(&self, mut retryable: impl FnMut(&E) -> bool, mut op: F) -> Result<T, E>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, E>>,
    {
        let mut retry = 0;
        loop {
            match op().await {
                Ok(v) => return Ok(v),
                Err(e) if retry < self.max_retries && retryable(&e) => {
                    tokio::time::sleep(self.delay(retry)).await;
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
