//! Interaction log ingestion, per-user sequences and the leave-one-out split.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio::{self, BinReader, BinWriter};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset is empty after filtering ({dropped_users} users dropped)")]
    Empty { dropped_users: usize },
    #[error("requested {requested} validation users but the dataset has only {available}")]
    TooManyValidationUsers { requested: usize, available: usize },
    #[error("user {user} has {len} interactions, at least 3 are required")]
    SequenceTooShort { user: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] binio::FormatError),
}

/// Layout of a raw interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// MovieLens `user::item::rating::timestamp`.
    DoubleColon,
    /// Tab or comma separated `user,item,timestamp` or `user,item,rating,timestamp`.
    Delimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParseOptions {
    /// Users with fewer interactions (after item filtering) are dropped.
    pub min_user_interactions: usize,
    /// Items with fewer raw interactions are removed before users are counted.
    pub min_item_interactions: usize,
    /// Collect malformed lines instead of failing on the first one.
    pub lenient: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            min_user_interactions: 3,
            min_item_interactions: 1,
            lenient: false,
        }
    }
}

/// Per-user, timestamp ordered item sequences over a dense item index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    /// Raw user id of each dense user, ascending.
    pub user_ids: Vec<u64>,
    /// Dense item sequences, one per user, in `user_ids` order.
    pub sequences: Vec<Vec<usize>>,
    /// Raw item id of each dense item, ascending.
    pub item_ids: Vec<u64>,
}

/// What `parse_interactions` discarded on the way.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub records: usize,
    pub dropped_users: usize,
    pub dropped_items: usize,
    pub dropped_interactions: usize,
    pub skipped_lines: Vec<(usize, String)>,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_index(&self) -> HashMap<u64, usize> {
        self.item_ids.iter().enumerate().map(|(i, &raw)| (raw, i)).collect()
    }

    pub fn user_index(&self) -> HashMap<u64, usize> {
        self.user_ids.iter().enumerate().map(|(i, &raw)| (raw, i)).collect()
    }

    /// Builds a dataset from interactions already in their final form.
    pub fn from_interactions(
        interactions: &[Interaction],
        opts: &ParseOptions,
    ) -> Result<(Self, ParseReport), DataError> {
        let mut report = ParseReport {
            records: interactions.len(),
            ..Default::default()
        };

        let mut item_counts: HashMap<u64, usize> = HashMap::new();
        for it in interactions {
            *item_counts.entry(it.item_id).or_default() += 1;
        }
        report.dropped_items = item_counts
            .values()
            .filter(|&&c| c < opts.min_item_interactions)
            .count();

        // stable: equal timestamps keep file order
        let mut per_user: BTreeMap<u64, Vec<(i64, u64)>> = BTreeMap::new();
        for it in interactions {
            if item_counts[&it.item_id] < opts.min_item_interactions {
                report.dropped_interactions += 1;
                continue;
            }
            per_user
                .entry(it.user_id)
                .or_default()
                .push((it.timestamp, it.item_id));
        }

        let mut kept: Vec<(u64, Vec<u64>)> = Vec::with_capacity(per_user.len());
        for (user, mut events) in per_user {
            if events.len() < opts.min_user_interactions.max(1) {
                report.dropped_users += 1;
                report.dropped_interactions += events.len();
                continue;
            }
            events.sort_by_key(|&(ts, _)| ts);
            kept.push((user, events.into_iter().map(|(_, item)| item).collect()));
        }
        if kept.is_empty() {
            return Err(DataError::Empty {
                dropped_users: report.dropped_users,
            });
        }

        let mut item_ids: Vec<u64> = kept.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let index: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();

        let user_ids = kept.iter().map(|(u, _)| *u).collect();
        let sequences = kept
            .iter()
            .map(|(_, s)| s.iter().map(|raw| index[raw]).collect())
            .collect();
        Ok((
            InteractionDataset {
                user_ids,
                sequences,
                item_ids,
            },
            report,
        ))
    }

    /// Restricts the dataset to the given dense users, keeping the item index.
    pub fn subset_users(&self, users: &[usize]) -> InteractionDataset {
        let mut users = users.to_vec();
        users.sort_unstable();
        users.dedup();
        InteractionDataset {
            user_ids: users.iter().map(|&u| self.user_ids[u]).collect(),
            sequences: users.iter().map(|&u| self.sequences[u].clone()).collect(),
            item_ids: self.item_ids.clone(),
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut lens: Vec<usize> = self.sequences.iter().map(Vec::len).collect();
        lens.sort_unstable();
        let n = lens.len();
        let median = if n % 2 == 1 {
            lens[n / 2] as f64
        } else {
            (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
        };
        DatasetSummary {
            num_users: n,
            num_items: self.num_items(),
            num_interactions: self.num_interactions(),
            mean_sequence_length: self.num_interactions() as f64 / n as f64,
            median_sequence_length: median,
        }
    }

    const MAGIC: [u8; 4] = *b"GRDS";
    const VERSION: u32 = 1;

    /// Writes the binary cache: header, item table, then per user
    /// `(raw user id, item count, dense item ids)`.
    pub fn write_cache<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut w = BinWriter::new(w);
        w.header(Self::MAGIC, Self::VERSION)?;
        w.u64(self.num_users() as u64)?;
        w.u64(self.num_items() as u64)?;
        for &raw in &self.item_ids {
            w.u64(raw)?;
        }
        for (user, seq) in self.user_ids.iter().zip(&self.sequences) {
            w.u64(*user)?;
            w.u32(seq.len() as u32)?;
            for &item in seq {
                w.u32(item as u32)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_cache<R: Read>(r: R) -> Result<Self, DataError> {
        let mut r = BinReader::new(r);
        r.header(Self::MAGIC, Self::VERSION)?;
        let num_users = r.len_u64()?;
        let num_items = r.len_u64()?;
        let item_ids = (0..num_items).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let mut user_ids = Vec::with_capacity(num_users);
        let mut sequences = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            user_ids.push(r.u64()?);
            let len = r.u32()? as usize;
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                let item = r.u32()? as usize;
                if item >= num_items {
                    return Err(binio::FormatError::Corrupt(format!(
                        "item {item} outside catalogue of {num_items}"
                    ))
                    .into());
                }
                seq.push(item);
            }
            sequences.push(seq);
        }
        r.finish()?;
        Ok(InteractionDataset {
            user_ids,
            sequences,
            item_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSummary {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub mean_sequence_length: f64,
    pub median_sequence_length: f64,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Number of users\t{}", self.num_users)?;
        writeln!(f, "Number of items\t{}", self.num_items)?;
        writeln!(f, "Number of interactions\t{}", self.num_interactions)?;
        writeln!(f, "Average sequence length\t{:.2}", self.mean_sequence_length)?;
        writeln!(f, "Median sequence length\t{}", self.median_sequence_length)
    }
}

fn decode_line(bytes: &[u8]) -> std::borrow::Cow<'_, str> {
    match std::str::from_utf8(bytes) {
        Ok(s) => std::borrow::Cow::Borrowed(s),
        // Latin-1 maps each byte to the code point of the same value.
        Err(_) => std::borrow::Cow::Owned(bytes.iter().map(|&b| b as char).collect()),
    }
}

fn parse_fields(line: &str, format: InputFormat) -> Result<Interaction, String> {
    let fields: Vec<&str> = match format {
        InputFormat::DoubleColon => line.split("::").collect(),
        InputFormat::Delimited => line.split(['\t', ',']).map(str::trim).collect(),
    };
    let (user, item, ts) = match (format, fields.len()) {
        (InputFormat::DoubleColon, 4) => (fields[0], fields[1], fields[3]),
        (InputFormat::Delimited, 3) => (fields[0], fields[1], fields[2]),
        (InputFormat::Delimited, 4) => (fields[0], fields[1], fields[3]),
        (_, n) => return Err(format!("expected 4 fields (3 or 4 when delimited), found {n}")),
    };
    let user_id = user
        .trim()
        .parse::<u64>()
        .map_err(|e| format!("bad user id {user:?}: {e}"))?;
    let item_id = item
        .trim()
        .parse::<u64>()
        .map_err(|e| format!("bad item id {item:?}: {e}"))?;
    let ts = ts.trim();
    let timestamp = match ts.parse::<i64>() {
        Ok(v) => v,
        Err(_) => {
            let v = ts
                .parse::<f64>()
                .map_err(|e| format!("bad timestamp {ts:?}: {e}"))?;
            if !v.is_finite() {
                return Err(format!("non-finite timestamp {ts:?}"));
            }
            v as i64
        }
    };
    Ok(Interaction {
        user_id,
        item_id,
        timestamp,
    })
}

/// Parses a raw interaction log. Blank lines are ignored; ratings are discarded.
pub fn parse_interactions<R: Read>(
    mut source: R,
    format: InputFormat,
    opts: &ParseOptions,
) -> Result<(InteractionDataset, ParseReport), DataError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut interactions = Vec::new();
    let mut skipped = Vec::new();
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = decode_line(raw);
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_fields(line, format) {
            Ok(it) => interactions.push(it),
            Err(reason) if opts.lenient => skipped.push((idx + 1, reason)),
            Err(reason) => return Err(DataError::Malformed { line: idx + 1, reason }),
        }
    }
    let (ds, mut report) = InteractionDataset::from_interactions(&interactions, opts)?;
    report.skipped_lines = skipped;
    Ok((ds, report))
}

/// Training inputs and held-out targets for leave-one-out evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub num_items: usize,
    /// Per-user training sequence (held-out suffix removed).
    pub train: Vec<Vec<usize>>,
    /// Per-user final item.
    pub test_target: Vec<usize>,
    /// Dense ids of the validation users, ascending.
    pub validation_users: Vec<usize>,
    /// Second-to-last item for validation users, `None` elsewhere.
    pub validation_target: Vec<Option<usize>>,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.len()
    }

    /// Everything except the test target: the conditioning history at test time.
    pub fn test_history(&self, user: usize) -> Vec<usize> {
        let mut h = self.train[user].clone();
        h.extend(self.validation_target[user]);
        h
    }

    pub fn full_sequence(&self, user: usize) -> Vec<usize> {
        let mut s = self.test_history(user);
        s.push(self.test_target[user]);
        s
    }
}

pub fn leave_one_out_split(
    ds: &InteractionDataset,
    n_validation_users: usize,
    seed: u64,
) -> Result<SplitDataset, DataError> {
    let n = ds.num_users();
    if n_validation_users > n {
        return Err(DataError::TooManyValidationUsers {
            requested: n_validation_users,
            available: n,
        });
    }
    if let Some((user, seq)) = ds.sequences.iter().enumerate().find(|(_, s)| s.len() < 3) {
        return Err(DataError::SequenceTooShort { user, len: seq.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation_users = sample(&mut rng, n, n_validation_users).into_vec();
    validation_users.sort_unstable();

    let mut is_val = vec![false; n];
    for &u in &validation_users {
        is_val[u] = true;
    }
    let mut train = Vec::with_capacity(n);
    let mut test_target = Vec::with_capacity(n);
    let mut validation_target = Vec::with_capacity(n);
    for (u, seq) in ds.sequences.iter().enumerate() {
        let last = seq.len() - 1;
        test_target.push(seq[last]);
        if is_val[u] {
            validation_target.push(Some(seq[last - 1]));
            train.push(seq[..last - 1].to_vec());
        } else {
            validation_target.push(None);
            train.push(seq[..last].to_vec());
        }
    }
    Ok(SplitDataset {
        num_items: ds.num_items(),
        train,
        test_target,
        validation_users,
        validation_target,
    })
}

/// Keeps the most recent `max_len` items.
pub fn truncate_sequence(seq: &[usize], max_len: usize) -> &[usize] {
    assert!(max_len >= 1, "max_len must be positive");
    &seq[seq.len().saturating_sub(max_len)..]
}
