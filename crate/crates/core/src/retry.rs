use std::time::Duration;

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds or the attempts are used up, returning the
    /// last error.
    pub fn run<T, E: std::fmt::Display>(&self, what: &str, mut op: impl FnMut(u32) -> Result<T, E>) -> Result<T, E> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < attempts => {
                    let delay = self.base_delay * 2u32.saturating_pow(attempt - 1);
                    log::warn!("{what}: attempt {attempt}/{attempts} failed: {e}; retrying in {delay:?}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_max_attempts() {
        let mut calls = 0;
        let r: Result<(), String> = RetryPolicy::immediate(5).run("t", |_| {
            calls += 1;
            Err("nope".to_string())
        });
        assert!(r.is_err());
        assert_eq!(calls, 5);
    }

    #[test]
    fn succeeds_after_transient_failures() {
        let r: Result<u32, String> =
            RetryPolicy::immediate(5).run(
                "t",
                |attempt| {
                    if attempt < 3 {
                        Err("flaky".into())
                    } else {
                        Ok(attempt)
                    }
                },
            );
        assert_eq!(r.unwrap(), 3);
    }
}
