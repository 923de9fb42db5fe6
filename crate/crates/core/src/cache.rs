//! Sliding-window training cache.
//!
//! Examples arrive in order and the cache holds the most recent `window`
//! of them. Each session trains on the current window for a few epochs,
//! then the window advances by `shift` new examples and the oldest ones are
//! evicted.

use std::io::Write;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Maximum number of cached examples.
    pub window: usize,
    /// New examples per session.
    pub shift: usize,
    pub batch_size: usize,
    pub epochs_per_session: usize,
}

impl CacheConfig {
    pub fn new(window: usize, shift: usize, batch_size: usize, epochs_per_session: usize) -> Result<Self> {
        let cfg = Self {
            window,
            shift,
            batch_size,
            epochs_per_session,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift < 1 || self.shift > self.window {
            return Err(Error::CacheConfig(format!(
                "shift must be in 1..={}, got {}",
                self.window, self.shift
            )));
        }
        if self.batch_size < 1 || self.batch_size > self.window {
            return Err(Error::CacheConfig(format!(
                "batch size must be in 1..={}, got {}",
                self.window, self.batch_size
            )));
        }
        if self.epochs_per_session < 1 {
            return Err(Error::CacheConfig("epochs per session must be at least 1".into()));
        }
        Ok(())
    }

    /// Mini-batches per epoch; a short final batch counts.
    pub fn batches_per_epoch(&self) -> usize {
        self.window.div_ceil(self.batch_size)
    }
}

/// How many times an interior example is used: `epochs * window / shift`.
pub fn effective_epoch(cfg: &CacheConfig) -> Ratio<u64> {
    Ratio::new((cfg.epochs_per_session * cfg.window) as u64, cfg.shift as u64)
}

/// Half-open id range `[start, end)` covered by 1-indexed `session`.
pub fn session_window(session: usize, cfg: &CacheConfig) -> (usize, usize) {
    assert!(session >= 1, "sessions are 1-indexed");
    let start = (session - 1) * cfg.shift;
    (start, start + cfg.window)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Shuffle each epoch with this seed; sequential order when `None`.
    pub shuffle_seed: Option<u64>,
    /// With fewer examples than the window, train one session on what exists
    /// instead of failing.
    pub allow_partial: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Session {
    /// 1-indexed.
    pub index: usize,
    pub start: usize,
    pub end: usize,
    /// `epochs[e][b]` is the ordered list of example ids in mini-batch `b`.
    pub epochs: Vec<Vec<Vec<usize>>>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub config: CacheConfig,
    pub total_examples: usize,
    pub sessions: Vec<Session>,
}

fn batches(ids: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    ids.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn generate_schedule(total_examples: usize, cfg: &CacheConfig, opts: ScheduleOptions) -> Result<Schedule> {
    cfg.validate()?;
    let mut rng = opts.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let mut make_session = |index: usize, start: usize, end: usize| {
        let epochs = (0..cfg.epochs_per_session)
            .map(|_| {
                let mut ids: Vec<usize> = (start..end).collect();
                if let Some(rng) = rng.as_mut() {
                    ids.shuffle(rng);
                }
                batches(&ids, cfg.batch_size)
            })
            .collect();
        Session {
            index,
            start,
            end,
            epochs,
        }
    };

    let mut sessions = Vec::new();
    if total_examples < cfg.window {
        if !opts.allow_partial || total_examples == 0 {
            return Err(Error::WindowNeverFills {
                total: total_examples,
                window: cfg.window,
            });
        }
        sessions.push(make_session(1, 0, total_examples));
    } else {
        let mut s = 1;
        loop {
            let (start, end) = session_window(s, cfg);
            if end > total_examples {
                break;
            }
            sessions.push(make_session(s, start, end));
            s += 1;
        }
    }
    Ok(Schedule {
        config: *cfg,
        total_examples,
        sessions,
    })
}

impl Schedule {
    /// Number of times each example id appears across the whole schedule.
    pub fn usage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.total_examples];
        for session in &self.sessions {
            for epoch in &session.epochs {
                for id in epoch.iter().flatten() {
                    counts[*id] += 1;
                }
            }
        }
        counts
    }

    pub fn optimizer_steps(&self) -> usize {
        self.sessions
            .iter()
            .map(|s| s.epochs.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    /// Ids covered by a full complement of `window / shift` sessions.
    /// Requires `shift` to divide `window`.
    pub fn interior_ids(&self) -> Option<std::ops::Range<usize>> {
        let cfg = &self.config;
        if !cfg.window.is_multiple_of(cfg.shift) || self.sessions.is_empty() {
            return None;
        }
        let last = self.sessions.last()?;
        let lo = cfg.window - cfg.shift;
        let hi = last.start + cfg.shift;
        (lo < hi).then_some(lo..hi)
    }

    /// CSV with columns `session,epoch,minibatch,ids`; ids are space-separated
    /// and all indices except ids are 1-based.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["session", "epoch", "minibatch", "ids"])?;
        for session in &self.sessions {
            for (e, epoch) in session.epochs.iter().enumerate() {
                for (b, batch) in epoch.iter().enumerate() {
                    let ids = batch.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                    w.write_record([session.index.to_string(), (e + 1).to_string(), (b + 1).to_string(), ids])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_config() -> CacheConfig {
        CacheConfig::new(6, 2, 3, 2).unwrap()
    }

    #[test]
    fn reproduces_windowed_table() {
        let schedule = generate_schedule(10, &table_config(), ScheduleOptions::default()).unwrap();
        let expected = [[[0, 1, 2], [3, 4, 5]], [[2, 3, 4], [5, 6, 7]], [[4, 5, 6], [7, 8, 9]]];
        assert_eq!(schedule.sessions.len(), 3);
        for (session, want) in schedule.sessions.iter().zip(expected) {
            assert_eq!(session.epochs.len(), 2);
            for epoch in &session.epochs {
                assert_eq!(epoch, &want.map(|b| b.to_vec()).to_vec());
            }
        }
    }

    #[test]
    fn session_windows() {
        let cfg = table_config();
        assert_eq!(session_window(1, &cfg), (0, 6));
        assert_eq!(session_window(2, &cfg), (2, 8));
        assert_eq!(session_window(3, &cfg), (4, 10));
    }

    #[test]
    fn effective_epochs() {
        assert_eq!(
            effective_epoch(&CacheConfig::new(100, 4, 10, 2).unwrap()),
            Ratio::from_integer(50)
        );
        assert_eq!(effective_epoch(&table_config()), Ratio::from_integer(6));
        assert_eq!(
            effective_epoch(&CacheConfig::new(7, 7, 3, 1).unwrap()),
            Ratio::from_integer(1)
        );
        assert_eq!(
            effective_epoch(&CacheConfig::new(10, 4, 3, 1).unwrap()),
            Ratio::new(5, 2)
        );
    }

    #[test]
    fn plain_batching_degenerate_case() {
        let cfg = CacheConfig::new(4, 4, 4, 1).unwrap();
        let s = generate_schedule(12, &cfg, ScheduleOptions::default()).unwrap();
        let flat: Vec<Vec<usize>> = s.sessions.iter().flat_map(|s| s.epochs[0].clone()).collect();
        assert_eq!(flat, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]]);
    }

    #[test]
    fn short_final_batch() {
        let cfg = CacheConfig::new(5, 5, 2, 1).unwrap();
        let s = generate_schedule(5, &cfg, ScheduleOptions::default()).unwrap();
        assert_eq!(s.sessions[0].epochs[0], vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(cfg.batches_per_epoch(), 3);
    }

    #[test]
    fn invalid_configs() {
        assert!(CacheConfig::new(6, 0, 3, 2).is_err());
        assert!(CacheConfig::new(6, 7, 3, 2).is_err());
        assert!(CacheConfig::new(6, 2, 7, 2).is_err());
        assert!(CacheConfig::new(6, 2, 3, 0).is_err());
    }

    #[test]
    fn window_must_fill_unless_partial() {
        let cfg = table_config();
        assert!(matches!(
            generate_schedule(5, &cfg, ScheduleOptions::default()),
            Err(Error::WindowNeverFills { total: 5, window: 6 })
        ));
        let partial = generate_schedule(
            5,
            &cfg,
            ScheduleOptions {
                allow_partial: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(partial.sessions.len(), 1);
        assert_eq!(partial.sessions[0].epochs[0], vec![vec![0, 1, 2], vec![3, 4]]);
    }

    #[test]
    fn csv_layout() {
        let schedule = generate_schedule(10, &table_config(), ScheduleOptions::default()).unwrap();
        let mut out = Vec::new();
        schedule.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "session,epoch,minibatch,ids");
        assert_eq!(lines[1], "1,1,1,0 1 2");
        assert_eq!(lines[12], "3,2,2,7 8 9");
        assert_eq!(lines.len(), 13);
    }
}
